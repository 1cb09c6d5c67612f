//! The diffusion prior: a dense score network trained by denoising score
//! matching, plus closed-form score oracles for Gaussian and Gaussian-mixture
//! priors.
//!
//! The network predicts ε̂(x_t, t); the score is −ε̂/σ_t. Time enters as
//! Fourier features appended to x. Both the network and the oracles build
//! their outputs from graph ops, so gradients flow through the score's input
//! wherever a caller needs them (guidance, distillation).

use std::f64::consts::PI;

use crate::config::Config;
use crate::container::Container;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Pairs of (sin, cos) time features; 4 pairs = 8 features.
pub const FOURIER_PAIRS: usize = 4;

/// A score field s(x_t, t) ≈ ∇ log p_t(x_t).
pub trait Score {
    fn dim(&self) -> usize;

    /// Evaluate at a batch: row i of `x_t` pairs with `ts[i]` (a length-1
    /// `ts` is shared by all rows). Output shape equals `x_t`; the result is
    /// differentiable w.r.t. `x_t` when `x_t` is tracked.
    fn score(&self, x_t: &Tensor, ts: &[f64], sched: &NoiseSchedule) -> Result<Tensor>;
}

fn check_batch(who: &'static str, dim: usize, x_t: &Tensor, ts: &[f64]) -> Result<()> {
    if x_t.cols() != dim {
        return Err(Error::ShapeMismatch {
            op: who,
            expected: format!("[_, {dim}]"),
            got: format!("{:?}", x_t.shape()),
        });
    }
    if ts.len() != 1 && ts.len() != x_t.rows() {
        return Err(Error::InvalidArg(format!(
            "{who}: {} times for {} rows",
            ts.len(),
            x_t.rows()
        )));
    }
    Ok(())
}

fn row_time(ts: &[f64], i: usize) -> f64 {
    ts[if ts.len() == 1 { 0 } else { i }]
}

/// Per-row kernel coefficients, validated against the schedule.
fn alpha_sigma_rows(sched: &NoiseSchedule, ts: &[f64], rows: usize) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(rows);
    for i in 0..rows {
        let t = sched.usable_time(row_time(ts, i))?;
        out.push(sched.alpha_sigma(t)?);
    }
    Ok(out)
}

/// [rows, 2·FOURIER_PAIRS] matrix of (sin 2ᵏπt, cos 2ᵏπt) features.
pub fn time_features(ts: &[f64], rows: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * 2 * FOURIER_PAIRS);
    for i in 0..rows {
        let t = row_time(ts, i);
        for k in 0..FOURIER_PAIRS {
            let w = (1u64 << k) as f64 * PI * t;
            data.push(w.sin());
            data.push(w.cos());
        }
    }
    Tensor::constant(rows, 2 * FOURIER_PAIRS, data)
}

pub struct ScoreNetwork {
    dim: usize,
    hidden_layers: usize,
    hidden_width: usize,
    params: ParamStore,
}

impl ScoreNetwork {
    /// Hidden stack is tanh MLP; the output layer starts at zero so the
    /// initial score field is identically zero.
    pub fn new(dim: usize, hidden_layers: usize, hidden_width: usize, rng: &mut Rng) -> Self {
        assert!(dim >= 1 && hidden_layers >= 1 && hidden_width >= 1);
        let mut params = ParamStore::new();
        let mut fan_in = dim + 2 * FOURIER_PAIRS;
        for l in 0..hidden_layers {
            let scale = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * hidden_width)
                .map(|_| rng.normal() * scale)
                .collect();
            params.insert(&format!("l{l}.w"), Tensor::constant(fan_in, hidden_width, w));
            params.insert(&format!("l{l}.b"), Tensor::zeros(1, hidden_width));
            fan_in = hidden_width;
        }
        params.insert("out.w", Tensor::zeros(fan_in, dim));
        params.insert("out.b", Tensor::zeros(1, dim));
        ScoreNetwork {
            dim,
            hidden_layers,
            hidden_width,
            params,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// A weight-frozen copy: same map, but the parameters are untracked
    /// constants, so a backward pass through this network propagates into
    /// its input only. This is the teacher handed to distillation.
    pub fn frozen(&self) -> ScoreNetwork {
        let mut params = ParamStore::new();
        for (name, t) in self.params.iter() {
            params.insert_constant(name, t.detach());
        }
        ScoreNetwork {
            dim: self.dim,
            hidden_layers: self.hidden_layers,
            hidden_width: self.hidden_width,
            params,
        }
    }

    /// ε̂(x_t, t): raw network output before the −1/σ_t conversion.
    fn eps_hat(&self, x_t: &Tensor, ts: &[f64]) -> Tensor {
        let rows = x_t.rows();
        let mut h = x_t.concat_cols(&time_features(ts, rows));
        for l in 0..self.hidden_layers {
            let w = self.params.get(&format!("l{l}.w"));
            let b = self.params.get(&format!("l{l}.b"));
            h = h.matmul(w).add(&b.broadcast_rows(rows)).tanh();
        }
        let w = self.params.get("out.w");
        let b = self.params.get("out.b");
        h.matmul(w).add(&b.broadcast_rows(rows))
    }
}

impl Score for ScoreNetwork {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x_t: &Tensor, ts: &[f64], sched: &NoiseSchedule) -> Result<Tensor> {
        check_batch("score_network", self.dim, x_t, ts)?;
        let rows = x_t.rows();
        let coeffs = alpha_sigma_rows(sched, ts, rows)?;
        let eps_hat = self.eps_hat(x_t, ts);
        let mut neg_inv_sigma = Vec::with_capacity(rows * self.dim);
        for (_, sigma) in &coeffs {
            neg_inv_sigma.extend(std::iter::repeat_n(-1.0 / sigma, self.dim));
        }
        let out = eps_hat.mul(&Tensor::constant(rows, self.dim, neg_inv_sigma));
        if !out.all_finite() {
            return Err(Error::NonFinite {
                op: "score_network",
            });
        }
        Ok(out)
    }
}

/// Closed-form score for a diagonal Gaussian prior N(μ0, diag v0): the
/// marginal at t is N(α_t μ0, α_t²v0 + σ_t²), so the score is
/// −(x − α_t μ0)/(α_t²v0 + σ_t²) per coordinate.
pub struct AnalyticGaussianScore {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

impl AnalyticGaussianScore {
    pub fn new(mu: Vec<f64>, var: Vec<f64>) -> Self {
        assert_eq!(mu.len(), var.len());
        assert!(var.iter().all(|&v| v > 0.0), "variances must be positive");
        AnalyticGaussianScore { mu, var }
    }

    pub fn standard(dim: usize) -> Self {
        AnalyticGaussianScore::new(vec![0.0; dim], vec![1.0; dim])
    }

    /// log p_t(x) of the perturbed marginal, for likelihood oracles.
    pub fn log_marginal_density(&self, x: &[f64], t: f64, sched: &NoiseSchedule) -> Result<f64> {
        let (alpha, sigma) = sched.alpha_sigma(t)?;
        let mut lp = 0.0;
        for ((&xk, &mk), &vk) in x.iter().zip(&self.mu).zip(&self.var) {
            let mv = alpha * alpha * vk + sigma * sigma;
            let d = xk - alpha * mk;
            lp += -0.5 * ((2.0 * PI * mv).ln() + d * d / mv);
        }
        Ok(lp)
    }
}

impl Score for AnalyticGaussianScore {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn score(&self, x_t: &Tensor, ts: &[f64], sched: &NoiseSchedule) -> Result<Tensor> {
        let d = self.mu.len();
        check_batch("analytic_gaussian_score", d, x_t, ts)?;
        let rows = x_t.rows();
        let coeffs = alpha_sigma_rows(sched, ts, rows)?;
        let mut shift = Vec::with_capacity(rows * d);
        let mut neg_inv = Vec::with_capacity(rows * d);
        for (alpha, sigma) in &coeffs {
            for k in 0..d {
                shift.push(alpha * self.mu[k]);
                neg_inv.push(-1.0 / (alpha * alpha * self.var[k] + sigma * sigma));
            }
        }
        Ok(x_t
            .sub(&Tensor::constant(rows, d, shift))
            .mul(&Tensor::constant(rows, d, neg_inv)))
    }
}

/// Closed-form score for a full-covariance Gaussian prior N(μ0, Σ0). The
/// marginal at t is N(α_t μ0, α_t²Σ0 + σ_t²I); its score is
/// −(α_t²Σ0 + σ_t²I)⁻¹(x − α_t μ0), assembled from graph ops column by
/// column so it stays differentiable w.r.t. x. Oracle-scale d only (one
/// dense inverse per row).
pub struct AnalyticCovGaussianScore {
    pub mu: Vec<f64>,
    /// Row-major d×d.
    pub cov: Vec<f64>,
}

impl AnalyticCovGaussianScore {
    pub fn new(mu: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mu.len();
        if cov.len() != d * d {
            return Err(Error::ShapeMismatch {
                op: "analytic_cov_score",
                expected: format!("{d}x{d} covariance"),
                got: format!("len {}", cov.len()),
            });
        }
        crate::linalg::cholesky(&cov, d)?;
        Ok(AnalyticCovGaussianScore { mu, cov })
    }

    fn marginal_precision(&self, alpha: f64, sigma: f64) -> Result<Vec<f64>> {
        let d = self.mu.len();
        let mut m: Vec<f64> = self.cov.iter().map(|&c| alpha * alpha * c).collect();
        for k in 0..d {
            m[k * d + k] += sigma * sigma;
        }
        crate::linalg::invert(&m, d)
    }

    /// log p_t(x) of the perturbed marginal.
    pub fn log_marginal_density(&self, x: &[f64], t: f64, sched: &NoiseSchedule) -> Result<f64> {
        let d = self.mu.len();
        let (alpha, sigma) = sched.alpha_sigma(t)?;
        let mut m: Vec<f64> = self.cov.iter().map(|&c| alpha * alpha * c).collect();
        for k in 0..d {
            m[k * d + k] += sigma * sigma;
        }
        let l = crate::linalg::cholesky(&m, d)?;
        let logdet: f64 = (0..d).map(|k| 2.0 * l[k * d + k].ln()).sum();
        let p = crate::linalg::invert(&m, d)?;
        let c: Vec<f64> = (0..d).map(|k| x[k] - alpha * self.mu[k]).collect();
        let mut quad = 0.0;
        for i in 0..d {
            for j in 0..d {
                quad += c[i] * p[i * d + j] * c[j];
            }
        }
        Ok(-0.5 * (d as f64 * (2.0 * PI).ln() + logdet + quad))
    }
}

impl Score for AnalyticCovGaussianScore {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn score(&self, x_t: &Tensor, ts: &[f64], sched: &NoiseSchedule) -> Result<Tensor> {
        let d = self.mu.len();
        check_batch("analytic_cov_score", d, x_t, ts)?;
        let rows = x_t.rows();
        let coeffs = alpha_sigma_rows(sched, ts, rows)?;
        let mut shift = vec![0.0; rows * d];
        // coef[k*d + j][r] multiplies centered column j in output column k
        let mut coef = vec![vec![0.0; rows]; d * d];
        let mut cache: Option<((f64, f64), Vec<f64>)> = None;
        for (r, &(alpha, sigma)) in coeffs.iter().enumerate() {
            let fresh = match &cache {
                Some((key, _)) => *key != (alpha, sigma),
                None => true,
            };
            if fresh {
                cache = Some(((alpha, sigma), self.marginal_precision(alpha, sigma)?));
            }
            let p = &cache.as_ref().unwrap().1;
            for k in 0..d {
                shift[r * d + k] = alpha * self.mu[k];
                for j in 0..d {
                    coef[k * d + j][r] = -p[k * d + j];
                }
            }
        }
        let centered = x_t.sub(&Tensor::constant(rows, d, shift));
        let mut out: Option<Tensor> = None;
        for k in 0..d {
            let mut col: Option<Tensor> = None;
            for j in 0..d {
                let term = centered
                    .slice_cols(j, j + 1)
                    .mul(&Tensor::constant(rows, 1, coef[k * d + j].clone()));
                col = Some(match col {
                    Some(c) => c.add(&term),
                    None => term,
                });
            }
            let col = col.unwrap();
            out = Some(match out {
                Some(o) => o.concat_cols(&col),
                None => col,
            });
        }
        Ok(out.unwrap())
    }
}

#[derive(Clone)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

/// Diagonal Gaussian mixture prior. Perturbation keeps it a mixture: each
/// component becomes N(α_t μ_j, α_t²v_j + σ_t²) with unchanged weights.
pub struct AnalyticMixtureScore {
    comps: Vec<MixtureComponent>,
    dim: usize,
}

impl AnalyticMixtureScore {
    pub fn new(mut comps: Vec<MixtureComponent>) -> Result<Self> {
        if comps.is_empty() {
            return Err(Error::InvalidArg("mixture needs at least one component".into()));
        }
        let dim = comps[0].mu.len();
        let mut total = 0.0;
        for c in &comps {
            if c.mu.len() != dim || c.var.len() != dim {
                return Err(Error::InvalidArg("mixture component dims differ".into()));
            }
            if c.weight <= 0.0 || c.var.iter().any(|&v| v <= 0.0) {
                return Err(Error::InvalidArg(
                    "mixture weights and variances must be positive".into(),
                ));
            }
            total += c.weight;
        }
        for c in &mut comps {
            c.weight /= total;
        }
        Ok(AnalyticMixtureScore { comps, dim })
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.comps
    }

    /// Per-component log densities at one point, already including log w_j.
    fn comp_logs(&self, x: &[f64], alpha: f64, sigma: f64) -> Vec<f64> {
        self.comps
            .iter()
            .map(|c| {
                let mut lp = c.weight.ln();
                for ((&xk, &mk), &vk) in x.iter().zip(&c.mu).zip(&c.var) {
                    let mv = alpha * alpha * vk + sigma * sigma;
                    let d = xk - alpha * mk;
                    lp += -0.5 * ((2.0 * PI * mv).ln() + d * d / mv);
                }
                lp
            })
            .collect()
    }

    pub fn log_marginal_density(&self, x: &[f64], t: f64, sched: &NoiseSchedule) -> Result<f64> {
        let (alpha, sigma) = sched.alpha_sigma(t)?;
        let logs = self.comp_logs(x, alpha, sigma);
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln())
    }
}

impl Score for AnalyticMixtureScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x_t: &Tensor, ts: &[f64], sched: &NoiseSchedule) -> Result<Tensor> {
        let d = self.dim;
        check_batch("analytic_mixture_score", d, x_t, ts)?;
        let rows = x_t.rows();
        let coeffs = alpha_sigma_rows(sched, ts, rows)?;

        // Responsibilities are a softmax over component log densities. Each
        // row's shift comes from detached values; any constant shift cancels
        // exactly in the ratio, so value and gradient both stay exact.
        let xd = x_t.data();
        let mut shifts = vec![f64::NEG_INFINITY; rows];
        for c in &self.comps {
            for i in 0..rows {
                let (alpha, sigma) = coeffs[i];
                let mut lp = c.weight.ln();
                for k in 0..d {
                    let mv = alpha * alpha * c.var[k] + sigma * sigma;
                    let diff = xd[i * d + k] - alpha * c.mu[k];
                    lp += -0.5 * ((2.0 * PI * mv).ln() + diff * diff / mv);
                }
                shifts[i] = shifts[i].max(lp);
            }
        }

        let ones_row = Tensor::full(1, d, 1.0);
        let mut total_resp: Option<Tensor> = None;
        let mut weighted_score: Option<Tensor> = None;
        for c in &self.comps {
            let mut shift = Vec::with_capacity(rows * d);
            let mut neg_inv = Vec::with_capacity(rows * d);
            let mut log_const = Vec::with_capacity(rows);
            for i in 0..rows {
                let (alpha, sigma) = coeffs[i];
                // log w_j plus the x-independent part of the log density,
                // minus the per-row shift.
                let mut lc = c.weight.ln() - shifts[i];
                for k in 0..d {
                    let mv = alpha * alpha * c.var[k] + sigma * sigma;
                    shift.push(alpha * c.mu[k]);
                    neg_inv.push(-1.0 / mv);
                    lc += -0.5 * (2.0 * PI * mv).ln();
                }
                log_const.push(lc);
            }
            let diff = x_t.sub(&Tensor::constant(rows, d, shift));
            let neg_inv = Tensor::constant(rows, d, neg_inv);
            // exponent: −½ Σ_k diff²/mv + lc, as [rows,1]
            let quad = diff
                .square()
                .mul(&neg_inv)
                .row_sum()
                .scale(0.5)
                .add(&Tensor::constant(rows, 1, log_const));
            let resp = quad.exp();
            let comp_score = diff.mul(&neg_inv);
            let contrib = resp.matmul(&ones_row).mul(&comp_score);
            total_resp = Some(match total_resp {
                Some(t) => t.add(&resp),
                None => resp,
            });
            weighted_score = Some(match weighted_score {
                Some(w) => w.add(&contrib),
                None => contrib,
            });
        }
        let total = total_resp.unwrap().matmul(&ones_row);
        Ok(weighted_score.unwrap().div(&total))
    }
}

/// Mean over the batch of g(t_i)²·‖score(x_t) + ε_i/σ_i‖² with explicit
/// draws. x_t = α_t x0 + σ_t ε is built here, so when `x0` is tracked the
/// gradient flows into it both directly and through the score input.
pub fn dsm_residual_given(
    score: &dyn Score,
    x0: &Tensor,
    ts: &[f64],
    noise: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if x0.shape() != noise.shape() {
        return Err(Error::ShapeMismatch {
            op: "dsm_residual",
            expected: format!("{:?}", x0.shape()),
            got: format!("{:?}", noise.shape()),
        });
    }
    let (rows, d) = (x0.rows(), x0.cols());
    let coeffs = alpha_sigma_rows(sched, ts, rows)?;
    let mut a = Vec::with_capacity(rows * d);
    let mut s = Vec::with_capacity(rows * d);
    let mut inv_sigma = Vec::with_capacity(rows * d);
    let mut g2 = Vec::with_capacity(rows * d);
    for (i, &(alpha, sigma)) in coeffs.iter().enumerate() {
        let beta = sched.rate(sched.usable_time(row_time(ts, i))?);
        for _ in 0..d {
            a.push(alpha);
            s.push(sigma);
            inv_sigma.push(1.0 / sigma);
            g2.push(beta);
        }
    }
    let x_t = x0
        .mul(&Tensor::constant(rows, d, a))
        .add(&noise.mul(&Tensor::constant(rows, d, s)));
    let target = noise.mul(&Tensor::constant(rows, d, inv_sigma));
    let sc = score.score(&x_t, ts, sched)?;
    // residual s_θ + ε/σ, weighted by g² = β(t)
    let weighted = sc
        .add(&target)
        .square()
        .mul(&Tensor::constant(rows, d, g2));
    Ok(weighted.sum().scale(1.0 / rows as f64))
}

/// Denoising score matching loss: t ~ U(eps_min, T) and ε ~ N(0,I) drawn per
/// batch row, likelihood weighting λ(t) = g(t)².
pub fn dsm_loss(
    score: &dyn Score,
    batch: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    let ts: Vec<f64> = (0..batch.rows())
        .map(|_| rng.uniform_in(sched.eps_min, sched.t_max))
        .collect();
    let noise = Tensor::randn(batch.rows(), batch.cols(), rng);
    dsm_residual_given(score, batch, &ts, &noise, sched)
}

#[derive(Debug, Clone)]
pub struct ScoreTrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub iters: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// Loss-trace granularity; a trace row is (step, loss).
    pub log_every: usize,
}

impl Default for ScoreTrainConfig {
    fn default() -> Self {
        ScoreTrainConfig {
            lr: 2e-4,
            batch: 64,
            iters: 10_000,
            hidden_layers: 4,
            hidden_width: 256,
            log_every: 500,
        }
    }
}

impl ScoreTrainConfig {
    pub fn from_config(cfg: &Config) -> Result<ScoreTrainConfig> {
        let d = ScoreTrainConfig::default();
        Ok(ScoreTrainConfig {
            lr: cfg.get_f64("score.lr", d.lr)?,
            batch: cfg.get_usize("score.batch", d.batch)?,
            iters: cfg.get_usize("score.iters", d.iters)?,
            hidden_layers: cfg.get_usize("score.hidden_layers", d.hidden_layers)?,
            hidden_width: cfg.get_usize("score.hidden_width", d.hidden_width)?,
            log_every: cfg.get_usize("score.log_every", d.log_every)?,
        })
    }
}

/// Continue DSM training on an existing network. Returns the loss trace.
pub fn train_score_net(
    net: &mut ScoreNetwork,
    data: &Tensor,
    sched: &NoiseSchedule,
    cfg: &ScoreTrainConfig,
    rng: &mut Rng,
) -> Result<Vec<(u64, f64)>> {
    if data.rows() == 0 {
        return Err(Error::InvalidArg("empty training dataset".into()));
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut trace = Vec::new();
    for step in 0..cfg.iters {
        let batch = sample_rows(data, cfg.batch, rng);
        let loss = dsm_loss(net, &batch, sched, rng)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                term: "dsm",
                step: step as u64,
            });
        }
        let grads = loss.backward()?;
        net.params_mut().adam_step(&grads, &adam);
        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.iters {
            trace.push((step as u64, value));
        }
    }
    Ok(trace)
}

/// Fresh network trained by DSM on `data` ([n, d] rows of x₀ samples).
pub fn train_score(
    data: &Tensor,
    sched: &NoiseSchedule,
    cfg: &ScoreTrainConfig,
    rng: &mut Rng,
) -> Result<(ScoreNetwork, Vec<(u64, f64)>)> {
    let mut net = ScoreNetwork::new(data.cols(), cfg.hidden_layers, cfg.hidden_width, rng);
    let trace = train_score_net(&mut net, data, sched, cfg, rng)?;
    Ok((net, trace))
}

pub(crate) fn sample_rows(data: &Tensor, batch: usize, rng: &mut Rng) -> Tensor {
    let (n, d) = (data.rows(), data.cols());
    let mut out = Vec::with_capacity(batch * d);
    for _ in 0..batch {
        let i = rng.below(n);
        out.extend_from_slice(&data.data()[i * d..(i + 1) * d]);
    }
    Tensor::constant(batch, d, out)
}

/// Mean squared difference between two score fields over given probe points
/// and times, averaged over (point, time, coordinate).
pub fn score_mse(
    a: &dyn Score,
    b: &dyn Score,
    probes: &Tensor,
    ts: &[f64],
    sched: &NoiseSchedule,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for &t in ts {
        let sa = a.score(probes, &[t], sched)?;
        let sb = b.score(probes, &[t], sched)?;
        total += sa
            .data()
            .iter()
            .zip(sb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
        count += probes.len();
    }
    Ok(total / count as f64)
}

const ARCH_KEY: &str = "__arch";

impl ScoreNetwork {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.insert(
            ARCH_KEY,
            Tensor::row(vec![
                self.dim as f64,
                self.hidden_layers as f64,
                self.hidden_width as f64,
                FOURIER_PAIRS as f64,
            ]),
        );
        for (name, t) in self.params.iter() {
            c.insert(name, t.detach());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<ScoreNetwork> {
        let arch = c.require(ARCH_KEY)?;
        if arch.len() != 4 {
            return Err(Error::Format("malformed score arch record".into()));
        }
        let dim = arch.data()[0] as usize;
        let hidden_layers = arch.data()[1] as usize;
        let hidden_width = arch.data()[2] as usize;
        if arch.data()[3] as usize != FOURIER_PAIRS {
            return Err(Error::Format(format!(
                "checkpoint uses {} Fourier pairs, this build has {FOURIER_PAIRS}",
                arch.data()[3]
            )));
        }
        let mut params = ParamStore::new();
        for l in 0..hidden_layers {
            for suffix in ["w", "b"] {
                let name = format!("l{l}.{suffix}");
                params.insert(&name, c.require(&name)?.clone());
            }
        }
        params.insert("out.w", c.require("out.w")?.clone());
        params.insert("out.b", c.require("out.b")?.clone());
        Ok(ScoreNetwork {
            dim,
            hidden_layers,
            hidden_width,
            params,
        })
    }
}
