//! Distillation of a frozen score prior into the conditional flow: per step,
//! draw a batch of measurements and latents, push z through G_φ, and descend
//! fidelity + prior + entropy on φ alone.
//!
//! The prior term backpropagates through the score network's input (the
//! teacher's weights are frozen, its Jacobian is not dropped), which is what
//! separates this objective from score-distillation-style gradients.

use std::path::PathBuf;

use crate::config::Config;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::flow::{ConditionMode, ConditionalFlow};
use crate::operators::{BatchOp, MeasurementSet};
use crate::optim::AdamConfig;
use crate::rng::Rng;
use crate::score::{dsm_residual_given, Score};
use crate::tensor::Tensor;

/// Spikes beyond this global gradient norm are rescaled, not fatal.
const GRAD_CLIP: f64 = 100.0;

#[derive(Debug, Clone)]
pub struct DistillConfig {
    pub sigma_y: f64,
    /// MC samples of (t, ε) per batch item per step.
    pub n_t_samples: usize,
    pub lr: f64,
    pub batch: usize,
    pub iters: u64,
    /// Adds the closed-form ½α_T²‖x̂0‖² tail of the bound; nearly constant
    /// because α_T is tiny, kept switchable for ablation.
    pub include_terminal_term: bool,
    pub condition_mode: ConditionMode,
    pub log_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            sigma_y: 0.1,
            n_t_samples: 1,
            lr: 1e-5,
            batch: 64,
            iters: 20_000,
            include_terminal_term: true,
            condition_mode: ConditionMode::MaskedSignal,
            log_every: 200,
            checkpoint_every: 0,
            checkpoint_path: None,
        }
    }
}

impl DistillConfig {
    pub fn from_config(cfg: &Config) -> Result<DistillConfig> {
        let d = DistillConfig::default();
        let out = DistillConfig {
            sigma_y: cfg.get_f64("distill.sigma_y", d.sigma_y)?,
            n_t_samples: cfg.get_usize("distill.n_t_samples", d.n_t_samples)?,
            lr: cfg.get_f64("distill.lr", d.lr)?,
            batch: cfg.get_usize("distill.batch", d.batch)?,
            iters: cfg.get_u64("distill.iters", d.iters)?,
            include_terminal_term: cfg
                .get_bool("distill.include_terminal_term", d.include_terminal_term)?,
            condition_mode: ConditionMode::parse(
                &cfg.get_str("flow.condition_mode", d.condition_mode.name()),
            )?,
            log_every: cfg.get_u64("distill.log_every", d.log_every)?,
            checkpoint_every: cfg.get_u64("distill.checkpoint_every", d.checkpoint_every)?,
            checkpoint_path: None,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_y <= 0.0 || !self.sigma_y.is_finite() {
            return Err(Error::InvalidArg(format!(
                "distill sigma_y {} must be positive",
                self.sigma_y
            )));
        }
        if self.n_t_samples == 0 {
            return Err(Error::InvalidArg("n_t_samples must be ≥ 1".into()));
        }
        if self.batch == 0 || self.iters == 0 {
            return Err(Error::InvalidArg("batch and iters must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One logged step of the objective; all three terms are costs and total is
/// their sum.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub fidelity: f64,
    pub prior: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Mean over the batch of ‖y − A(x̂0)‖²/(2σ_y²); additive measurement
/// constants are dropped.
pub fn fidelity_loss(
    x0_hat: &Tensor,
    y: &Tensor,
    op: &BatchOp,
    sigma_y: f64,
) -> Result<Tensor> {
    let ax = op.apply(x0_hat)?;
    if ax.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "fidelity",
            expected: format!("{:?}", ax.shape()),
            got: format!("{:?}", y.shape()),
        });
    }
    let scale = 1.0 / (2.0 * sigma_y * sigma_y * x0_hat.rows() as f64);
    Ok(y.sub(&ax).square().sum().scale(scale))
}

/// Unbiased MC estimate of the negated prior bound at x̂0, averaged per batch
/// item: (T−eps)/2 · E[g²‖s_θ(x_t,t) + ε/σ_t‖²] with t ~ U(eps_min, T),
/// plus ½α_T²‖x̂0‖² when the terminal term is on. Gradients flow through
/// x_t = α x̂0 + σ ε into both the explicit term and the score input.
pub fn elbo_prior_loss(
    x0_hat: &Tensor,
    score: &dyn Score,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    cfg: &DistillConfig,
) -> Result<Tensor> {
    let (b, d) = (x0_hat.rows(), x0_hat.cols());
    let n = cfg.n_t_samples;
    // replicate the batch n times with a selection matrix so the replication
    // itself is differentiable
    let x_rep = if n == 1 {
        x0_hat.clone()
    } else {
        let mut sel = vec![0.0; (b * n) * b];
        for r in 0..b * n {
            sel[r * b + (r % b)] = 1.0;
        }
        Tensor::constant(b * n, b, sel).matmul(x0_hat)
    };
    let ts: Vec<f64> = (0..b * n)
        .map(|_| rng.uniform_in(sched.eps_min, sched.t_max))
        .collect();
    let noise = Tensor::randn(b * n, d, rng);
    let span = 0.5 * (sched.t_max - sched.eps_min);
    let mut loss = dsm_residual_given(score, &x_rep, &ts, &noise, sched)?.scale(span);
    if cfg.include_terminal_term {
        let (alpha_t, _) = sched.alpha_sigma(sched.t_max)?;
        loss = loss.add(
            &x0_hat
                .square()
                .sum()
                .scale(0.5 * alpha_t * alpha_t / b as f64),
        );
    }
    Ok(loss)
}

/// Mean over the batch of log π(z) − logdet: the negated entropy of the
/// induced posterior (a cost; minimizing spreads q out). `logdet` is the
/// per-row log-det from the same forward pass that produced x̂0.
pub fn entropy_loss(z: &Tensor, logdet: &Tensor) -> Tensor {
    assert_eq!(z.rows(), logdet.rows(), "z/logdet row mismatch");
    let b = z.rows() as f64;
    z.gaussian_logpdf().sub(&logdet.sum()).scale(1.0 / b)
}

fn require_finite(term: &'static str, value: f64, step: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Diverged { term, step })
    }
}

/// Fit the flow against a frozen score over a set of measurements. Adam
/// touches φ only; the returned trace holds every step's LossBreakdown.
pub fn distill_train(
    flow: &mut ConditionalFlow,
    score: &dyn Score,
    set: &MeasurementSet,
    sched: &NoiseSchedule,
    cfg: &DistillConfig,
    rng: &mut Rng,
) -> Result<Vec<(u64, LossBreakdown)>> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::InvalidArg("empty measurement set".into()));
    }
    if flow.dim() != set.signal_dim {
        return Err(Error::ShapeMismatch {
            op: "distill",
            expected: format!("flow dim {}", set.signal_dim),
            got: format!("{}", flow.dim()),
        });
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.iters as usize);
    for step in 1..=cfg.iters {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.below(set.len())).collect();
        let (y, op) = set.batch(&idx)?;
        let conds = set.conditions(&idx, cfg.condition_mode)?;
        if conds.cols() != flow.cond_dim() {
            return Err(Error::ShapeMismatch {
                op: "distill condition",
                expected: format!("flow cond dim {}", flow.cond_dim()),
                got: format!("{}", conds.cols()),
            });
        }
        let z = Tensor::randn(cfg.batch, flow.dim(), rng);
        let (x0_hat, logdet) = flow.forward(&z, &conds)?;

        let fid = fidelity_loss(&x0_hat, &y, &op, cfg.sigma_y)?;
        let pri = elbo_prior_loss(&x0_hat, score, sched, rng, cfg)?;
        let ent = entropy_loss(&z, &logdet);
        let breakdown = LossBreakdown {
            fidelity: require_finite("fidelity", fid.item(), step)?,
            prior: require_finite("prior", pri.item(), step)?,
            entropy: require_finite("entropy", ent.item(), step)?,
            total: 0.0,
        };
        let total = fid.add(&pri).add(&ent);
        let breakdown = LossBreakdown {
            total: breakdown.fidelity + breakdown.prior + breakdown.entropy,
            ..breakdown
        };

        let mut grads = total.backward()?;
        if !grads.all_finite() {
            return Err(Error::Diverged {
                term: "gradient",
                step,
            });
        }
        let norm = flow.params().grad_norm(&grads);
        if norm > GRAD_CLIP {
            grads.scale_all(GRAD_CLIP / norm);
        }
        flow.params_mut().adam_step(&grads, &adam);

        trace.push((step, breakdown));
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            if let Some(path) = &cfg.checkpoint_path {
                flow.to_container().save(path)?;
            }
        }
    }
    Ok(trace)
}

/// CSV rows (step, fidelity, prior, entropy, total), thinned to the log
/// interval plus the final step.
pub fn trace_to_csv(trace: &[(u64, LossBreakdown)], log_every: u64) -> String {
    let mut out = String::from("step,fidelity,prior,entropy,total\n");
    let every = log_every.max(1);
    let last = trace.len();
    for (i, (step, b)) in trace.iter().enumerate() {
        if step % every == 0 || i + 1 == last || i == 0 {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                step, b.fidelity, b.prior, b.entropy, b.total
            ));
        }
    }
    out
}
