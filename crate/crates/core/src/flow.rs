//! Conditional RealNVP: an invertible generator x = G(z, y) with exact
//! log-det Jacobian, built from affine coupling layers whose scale/shift nets
//! read [passive half ∥ y].
//!
//! Each flow step is two coupling layers: the first leaves even-indexed
//! coordinates untouched, the second leaves odd-indexed ones. Internally a
//! column permutation makes both halves contiguous, so the coupling itself
//! always splits [first na cols | rest]. At d=1 the even-passive layer
//! transforms nothing and is skipped; the odd-passive layer conditions on y
//! alone, so the flow degenerates to x = exp(s(y))·z + t(y).
//!
//! Scale outputs pass through 2·tanh, bounding |s| ≤ 2: invertible for every
//! reachable parameter setting. Final layers of every coupling net start at
//! zero, so a fresh flow is the identity map.

use std::sync::Arc;

use crate::config::Config;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// What the flow is conditioned on when the measurement comes from a masking
/// operator: the zero-filled signal alone (blind mode), or with the binary
/// mask appended (operator known at inference time).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionMode {
    MaskedSignal,
    MaskedSignalPlusMask,
}

impl ConditionMode {
    pub fn parse(s: &str) -> Result<ConditionMode> {
        match s {
            "masked_signal" => Ok(ConditionMode::MaskedSignal),
            "masked_signal_plus_mask" => Ok(ConditionMode::MaskedSignalPlusMask),
            other => Err(Error::Format(format!("unknown condition mode {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConditionMode::MaskedSignal => "masked_signal",
            ConditionMode::MaskedSignalPlusMask => "masked_signal_plus_mask",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FlowSpec {
    /// Flow steps; each contributes two coupling layers.
    pub steps: usize,
    /// Hidden depth/width of every coupling net.
    pub hidden_layers: usize,
    pub hidden_width: usize,
}

impl Default for FlowSpec {
    fn default() -> Self {
        FlowSpec {
            steps: 24,
            hidden_layers: 1,
            hidden_width: 64,
        }
    }
}

impl FlowSpec {
    pub fn from_config(cfg: &Config) -> Result<FlowSpec> {
        let d = FlowSpec::default();
        Ok(FlowSpec {
            steps: cfg.get_usize("flow.steps", d.steps)?,
            hidden_layers: cfg.get_usize("flow.hidden_layers", d.hidden_layers)?,
            hidden_width: cfg.get_usize("flow.hidden_width", d.hidden_width)?,
        })
    }
}

pub struct ConditionalFlow {
    dim: usize,
    cond_dim: usize,
    spec: FlowSpec,
    params: ParamStore,
    /// Even-indexed coordinates first / odd-indexed first, plus inverses.
    perm_even: Arc<Vec<usize>>,
    perm_odd: Arc<Vec<usize>>,
    inv_even: Arc<Vec<usize>>,
    inv_odd: Arc<Vec<usize>>,
}

fn invert_perm(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; p.len()];
    for (j, &src) in p.iter().enumerate() {
        inv[src] = j;
    }
    inv
}

impl ConditionalFlow {
    pub fn new(dim: usize, cond_dim: usize, spec: FlowSpec, rng: &mut Rng) -> Self {
        assert!(dim >= 1 && cond_dim >= 1 && spec.steps >= 1);
        let evens: Vec<usize> = (0..dim).step_by(2).collect();
        let odds: Vec<usize> = (1..dim).step_by(2).collect();
        let perm_even: Vec<usize> = evens.iter().chain(odds.iter()).cloned().collect();
        let perm_odd: Vec<usize> = odds.iter().chain(evens.iter()).cloned().collect();
        let inv_even = invert_perm(&perm_even);
        let inv_odd = invert_perm(&perm_odd);

        let mut flow = ConditionalFlow {
            dim,
            cond_dim,
            spec,
            params: ParamStore::new(),
            perm_even: Arc::new(perm_even),
            perm_odd: Arc::new(perm_odd),
            inv_even: Arc::new(inv_even),
            inv_odd: Arc::new(inv_odd),
        };
        for step in 0..spec.steps {
            for half in [Half::EvenPassive, Half::OddPassive] {
                let (na, nb) = flow.split_widths(half);
                if nb == 0 {
                    continue;
                }
                for net in ["s", "t"] {
                    flow.init_coupling_net(&net_prefix(step, half, net), na + cond_dim, nb, rng);
                }
            }
        }
        flow
    }

    fn init_coupling_net(&mut self, prefix: &str, n_in: usize, n_out: usize, rng: &mut Rng) {
        let mut fan_in = n_in;
        for l in 0..self.spec.hidden_layers {
            let scale = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * self.spec.hidden_width)
                .map(|_| rng.normal() * scale)
                .collect();
            self.params.insert(
                &format!("{prefix}.l{l}.w"),
                Tensor::constant(fan_in, self.spec.hidden_width, w),
            );
            self.params
                .insert(&format!("{prefix}.l{l}.b"), Tensor::zeros(1, self.spec.hidden_width));
            fan_in = self.spec.hidden_width;
        }
        self.params
            .insert(&format!("{prefix}.out.w"), Tensor::zeros(fan_in, n_out));
        self.params
            .insert(&format!("{prefix}.out.b"), Tensor::zeros(1, n_out));
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn spec(&self) -> FlowSpec {
        self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// (passive width, transformed width) under a partition.
    fn split_widths(&self, half: Half) -> (usize, usize) {
        let evens = self.dim.div_ceil(2);
        let odds = self.dim - evens;
        match half {
            Half::EvenPassive => (evens, odds),
            Half::OddPassive => (odds, evens),
        }
    }

    fn net_forward(&self, prefix: &str, input: &Tensor) -> Tensor {
        let rows = input.rows();
        let mut h = input.clone();
        for l in 0..self.spec.hidden_layers {
            let w = self.params.get(&format!("{prefix}.l{l}.w"));
            let b = self.params.get(&format!("{prefix}.l{l}.b"));
            h = h.matmul(w).add(&b.broadcast_rows(rows)).tanh();
        }
        let w = self.params.get(&format!("{prefix}.out.w"));
        let b = self.params.get(&format!("{prefix}.out.b"));
        h.matmul(w).add(&b.broadcast_rows(rows))
    }

    /// Scale and shift fields for one coupling layer, from the passive half
    /// and the condition. The scale is 2·tanh(ŝ).
    fn scale_shift(
        &self,
        step: usize,
        half: Half,
        xa: Option<&Tensor>,
        y: &Tensor,
    ) -> (Tensor, Tensor) {
        let net_in = match xa {
            Some(xa) => xa.concat_cols(y),
            None => y.clone(),
        };
        let s = self
            .net_forward(&net_prefix(step, half, "s"), &net_in)
            .tanh()
            .scale(2.0);
        let t = self.net_forward(&net_prefix(step, half, "t"), &net_in);
        (s, t)
    }

    fn perms(&self, half: Half) -> (&Arc<Vec<usize>>, &Arc<Vec<usize>>) {
        match half {
            Half::EvenPassive => (&self.perm_even, &self.inv_even),
            Half::OddPassive => (&self.perm_odd, &self.inv_odd),
        }
    }

    /// One coupling layer. `invert` solves for the pre-image instead; the
    /// returned per-row Σs is the layer's forward log-det either way.
    fn couple(&self, x: &Tensor, y: &Tensor, step: usize, half: Half, invert: bool) -> (Tensor, Tensor) {
        let (na, nb) = self.split_widths(half);
        if nb == 0 {
            return (x.clone(), Tensor::zeros(x.rows(), 1));
        }
        let (perm, inv) = self.perms(half);
        let xp = x.permute_cols(perm);
        let (xa, xb) = if na > 0 {
            let (a, b) = xp.split_cols(na);
            (Some(a), b)
        } else {
            (None, xp)
        };
        let (s, t) = self.scale_shift(step, half, xa.as_ref(), y);
        let xb_out = if invert {
            xb.sub(&t).mul(&s.neg().exp())
        } else {
            xb.mul(&s.exp()).add(&t)
        };
        let joined = match xa {
            Some(xa) => xa.concat_cols(&xb_out),
            None => xb_out,
        };
        (joined.permute_cols(inv), s.row_sum())
    }

    fn run(&self, v: &Tensor, y: &Tensor, invert: bool) -> Result<(Tensor, Tensor)> {
        if v.cols() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "flow",
                expected: format!("[_, {}]", self.dim),
                got: format!("{:?}", v.shape()),
            });
        }
        if y.cols() != self.cond_dim {
            return Err(Error::ShapeMismatch {
                op: "flow condition",
                expected: format!("[_, {}]", self.cond_dim),
                got: format!("{:?}", y.shape()),
            });
        }
        let y = if y.rows() == v.rows() {
            y.clone()
        } else if y.rows() == 1 {
            y.broadcast_rows(v.rows())
        } else {
            return Err(Error::ShapeMismatch {
                op: "flow condition",
                expected: format!("[{} or 1, {}]", v.rows(), self.cond_dim),
                got: format!("{:?}", y.shape()),
            });
        };

        let mut x = v.clone();
        let mut logdet = Tensor::zeros(v.rows(), 1);
        let mut layers: Vec<(usize, Half)> = Vec::with_capacity(self.spec.steps * 2);
        for step in 0..self.spec.steps {
            layers.push((step, Half::EvenPassive));
            layers.push((step, Half::OddPassive));
        }
        if invert {
            layers.reverse();
        }
        for (step, half) in layers {
            let (next, s_sum) = self.couple(&x, &y, step, half, invert);
            x = next;
            logdet = logdet.add(&s_sum);
        }
        // The accumulated Σs is the forward log-det; the inverse map's own
        // log-det is its negation.
        if invert {
            logdet = logdet.neg();
        }
        Ok((x, logdet))
    }

    /// x = G(z, y) with per-row log|det dG/dz| as a [B,1] tensor. `y` is
    /// either per-row ([B,m]) or shared ([1,m]).
    pub fn forward(&self, z: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
        self.run(z, y, false)
    }

    /// z = G⁻¹(x, y) with log|det dG⁻¹/dx| = −log|det dG/dz| at the matched
    /// point.
    pub fn inverse(&self, x: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
        self.run(x, y, true)
    }

    /// Per-row log q(x|y) = log N(z; 0, I) + log|det dG⁻¹/dx|, shape [B,1].
    pub fn log_prob(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let (z, logdet_inv) = self.inverse(x, y)?;
        let d = self.dim as f64;
        let base = z
            .square()
            .row_sum()
            .scale(-0.5)
            .add_scalar(-0.5 * d * (2.0 * std::f64::consts::PI).ln());
        Ok(base.add(&logdet_inv))
    }

    /// N posterior draws for one measurement: rows are G(zᵢ, y), zᵢ ~ N(0,I).
    /// One batched forward pass, no diffusion-time iteration; output is
    /// detached.
    pub fn sample_posterior(&self, y: &Tensor, n: usize, rng: &mut Rng) -> Result<Tensor> {
        assert!(n >= 1);
        let z = Tensor::randn(n, self.dim, rng);
        let (x, _) = self.forward(&z, y)?;
        Ok(x.detach())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.insert(
            "__arch",
            Tensor::row(vec![
                self.dim as f64,
                self.cond_dim as f64,
                self.spec.steps as f64,
                self.spec.hidden_layers as f64,
                self.spec.hidden_width as f64,
            ]),
        );
        for (name, t) in self.params.iter() {
            c.insert(name, t.detach());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<ConditionalFlow> {
        let arch = c.require("__arch")?;
        if arch.len() != 5 {
            return Err(Error::Format("malformed flow arch record".into()));
        }
        let a = arch.data();
        let spec = FlowSpec {
            steps: a[2] as usize,
            hidden_layers: a[3] as usize,
            hidden_width: a[4] as usize,
        };
        // Architecture first (zero params), then overwrite from the payload.
        let mut flow = ConditionalFlow::new(a[0] as usize, a[1] as usize, spec, &mut Rng::new(0));
        let names: Vec<String> = flow.params.names().map(String::from).collect();
        for name in names {
            flow.params.insert(&name, c.require(&name)?.clone());
        }
        Ok(flow)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Half {
    EvenPassive,
    OddPassive,
}

fn net_prefix(step: usize, half: Half, net: &str) -> String {
    let tag = match half {
        Half::EvenPassive => "a",
        Half::OddPassive => "b",
    };
    format!("k{step}.{tag}.{net}")
}
