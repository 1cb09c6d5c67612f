//! Variance-preserving SDE: linear noise rate β(t), closed-form perturbation
//! kernel, drift/diffusion coefficients, and Tweedie denoising.
//!
//! Kernel: p(x_t|x₀) = N(α_t x₀, σ_t² I) with α_t = exp(−½∫₀ᵗβ) and
//! α_t² + σ_t² = 1. σ_t is the kernel standard deviation; β(t) always means
//! the rate.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Diffusion horizon T.
    pub t_max: f64,
    /// Smallest time at which score-dependent quantities are evaluated;
    /// below it σ_t is too small to divide by.
    pub eps_min: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            beta_min: 0.1,
            beta_max: 20.0,
            t_max: 1.0,
            eps_min: 1e-3,
        }
    }
}

impl NoiseSchedule {
    pub fn from_config(cfg: &Config) -> Result<NoiseSchedule> {
        let d = NoiseSchedule::default();
        let sched = NoiseSchedule {
            beta_min: cfg.get_f64("sde.beta_min", d.beta_min)?,
            beta_max: cfg.get_f64("sde.beta_max", d.beta_max)?,
            t_max: cfg.get_f64("sde.T", d.t_max)?,
            eps_min: cfg.get_f64("sde.eps_min", d.eps_min)?,
        };
        if sched.beta_min <= 0.0
            || sched.beta_max < sched.beta_min
            || sched.t_max <= 0.0
            || sched.eps_min <= 0.0
            || sched.eps_min >= sched.t_max
        {
            return Err(Error::InvalidArg(format!("bad schedule {sched:?}")));
        }
        Ok(sched)
    }

    /// Noise rate β(t), linear in t.
    pub fn rate(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min) / self.t_max
    }

    /// ∫₀ᵗ β(s) ds, closed form for the linear rate.
    pub fn rate_integral(&self, t: f64) -> f64 {
        self.beta_min * t + (self.beta_max - self.beta_min) * t * t / (2.0 * self.t_max)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !t.is_finite() || t < 0.0 || t > self.t_max {
            return Err(Error::TimeOutOfRange {
                t,
                lo: 0.0,
                hi: self.t_max,
            });
        }
        Ok(())
    }

    /// Validate a time for score-dependent work: must lie in
    /// [eps_min, t_max] up to integrator round-off, and is clamped into that
    /// interval so a terminal step landing at eps_min − 1e-16 stays usable.
    pub fn usable_time(&self, t: f64) -> Result<f64> {
        const SLACK: f64 = 1e-9;
        if !t.is_finite() || t < self.eps_min - SLACK || t > self.t_max + SLACK {
            return Err(Error::TimeOutOfRange {
                t,
                lo: self.eps_min,
                hi: self.t_max,
            });
        }
        Ok(t.clamp(self.eps_min, self.t_max))
    }

    /// Kernel coefficients (α_t, σ_t). Valid on [0, T]; callers that divide
    /// by σ_t must stay at or above `eps_min`.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        self.check_time(t)?;
        let alpha = (-0.5 * self.rate_integral(t)).exp();
        let sigma = (1.0 - alpha * alpha).max(0.0).sqrt();
        Ok((alpha, sigma))
    }

    /// Sampled kernel point x_t = α_t x₀ + σ_t ε together with the kernel
    /// score ∇_{x_t} log p(x_t|x₀) = −ε/σ_t.
    pub fn perturb(&self, x0: &Tensor, t: f64, noise: &Tensor) -> Result<(Tensor, Tensor)> {
        if x0.shape() != noise.shape() {
            return Err(Error::ShapeMismatch {
                op: "perturb",
                expected: format!("{:?}", x0.shape()),
                got: format!("{:?}", noise.shape()),
            });
        }
        let (alpha, sigma) = self.alpha_sigma(t)?;
        if sigma < 1e-300 {
            return Err(Error::Degenerate(format!("sigma_t = 0 at t = {t}")));
        }
        let x_t = x0.scale(alpha).add(&noise.scale(sigma));
        let kernel_score = noise.scale(-1.0 / sigma);
        Ok((x_t, kernel_score))
    }

    /// Forward-SDE coefficients: drift f(x,t) = −½β(t)·x and diffusion
    /// g(t) = √β(t).
    pub fn drift_diffusion(&self, x: &Tensor, t: f64) -> (Tensor, f64) {
        let beta = self.rate(t);
        (x.scale(-0.5 * beta), beta.sqrt())
    }

    /// Posterior-mean denoiser x̂₀ = (x_t + σ_t²·score)/α_t. Differentiable
    /// through both x_t and score.
    pub fn tweedie_denoise(&self, x_t: &Tensor, t: f64, score: &Tensor) -> Result<Tensor> {
        if x_t.shape() != score.shape() {
            return Err(Error::ShapeMismatch {
                op: "tweedie_denoise",
                expected: format!("{:?}", x_t.shape()),
                got: format!("{:?}", score.shape()),
            });
        }
        let (alpha, sigma) = self.alpha_sigma(t)?;
        if alpha < 1e-8 {
            return Err(Error::Degenerate(format!("alpha_t = {alpha:.3e} at t = {t}")));
        }
        Ok(x_t.add(&score.scale(sigma * sigma)).scale(1.0 / alpha))
    }
}
