//! Evaluation plumbing: reconstruction metrics, the linear-Gaussian
//! posterior oracle, drivers that run a reconstructor over a measurement
//! set, the wall-time protocol, CSV/image emission, and a two-sample
//! distribution test.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::flow::{ConditionMode, ConditionalFlow};
use crate::linalg;
use crate::operators::{condition_vector, EvalSet, ForwardOperator, Measurement};
use crate::rng::Rng;
use crate::samplers::{dps_sample, SamplerConfig};
use crate::score::Score;
use crate::tensor::Tensor;

pub fn mse(x: &Tensor, reference: &Tensor) -> Result<f64> {
    if x.shape() != reference.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            expected: format!("{:?}", reference.shape()),
            got: format!("{:?}", x.shape()),
        });
    }
    let n = x.data().len() as f64;
    Ok(x.data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// 10·log10(peak²/MSE); an exact match reports +∞.
pub fn psnr(x: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    if peak <= 0.0 {
        return Err(Error::InvalidArg(format!("peak {peak} must be > 0")));
    }
    let m = mse(x, reference)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_patch(xs: &[f64], ys: &[f64], c1: f64, c2: f64) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cxy = 0.0;
    for (a, b) in xs.iter().zip(ys) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cxy += (a - mx) * (b - my);
    }
    vx /= n;
    vy /= n;
    cxy /= n;
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
        / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// SSIM with a sliding 1D uniform window over each row's coordinates,
/// averaged over all window positions and rows. The 1D window is the
/// declared convention for vertex signals without a canonical pixel grid.
pub fn ssim(x: &Tensor, reference: &Tensor, peak: f64, window: usize) -> Result<f64> {
    if x.shape() != reference.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            expected: format!("{:?}", reference.shape()),
            got: format!("{:?}", x.shape()),
        });
    }
    let (n, d) = (x.rows(), x.cols());
    if window == 0 || window > d {
        return Err(Error::InvalidArg(format!(
            "ssim window {window} does not fit signal length {d}"
        )));
    }
    let c1 = (SSIM_K1 * peak) * (SSIM_K1 * peak);
    let c2 = (SSIM_K2 * peak) * (SSIM_K2 * peak);
    let mut acc = 0.0;
    let mut count = 0usize;
    for r in 0..n {
        let xr = &x.data()[r * d..(r + 1) * d];
        let yr = &reference.data()[r * d..(r + 1) * d];
        for p in 0..=(d - window) {
            acc += ssim_patch(&xr[p..p + window], &yr[p..p + window], c1, c2);
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// SSIM with a sliding square uniform window over row-major (h, w) grids;
/// each tensor row is one image.
pub fn ssim_grid(
    x: &Tensor,
    reference: &Tensor,
    h: usize,
    w: usize,
    peak: f64,
    window: usize,
) -> Result<f64> {
    if x.shape() != reference.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim_grid",
            expected: format!("{:?}", reference.shape()),
            got: format!("{:?}", x.shape()),
        });
    }
    if h * w != x.cols() {
        return Err(Error::ShapeMismatch {
            op: "ssim_grid",
            expected: format!("rows of length {}", h * w),
            got: format!("length {}", x.cols()),
        });
    }
    if window == 0 || window > h || window > w {
        return Err(Error::InvalidArg(format!(
            "ssim window {window} does not fit a {h}x{w} grid"
        )));
    }
    let c1 = (SSIM_K1 * peak) * (SSIM_K1 * peak);
    let c2 = (SSIM_K2 * peak) * (SSIM_K2 * peak);
    let d = h * w;
    let mut acc = 0.0;
    let mut count = 0usize;
    let mut px = vec![0.0; window * window];
    let mut py = vec![0.0; window * window];
    for r in 0..x.rows() {
        let xr = &x.data()[r * d..(r + 1) * d];
        let yr = &reference.data()[r * d..(r + 1) * d];
        for i in 0..=(h - window) {
            for j in 0..=(w - window) {
                for a in 0..window {
                    for b in 0..window {
                        px[a * window + b] = xr[(i + a) * w + (j + b)];
                        py[a * window + b] = yr[(i + a) * w + (j + b)];
                    }
                }
                acc += ssim_patch(&px, &py, c1, c2);
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

/// Dense [out_dim × in_dim] matrix of a linear operator, read off by
/// applying it to the standard basis.
pub fn operator_matrix(op: &ForwardOperator) -> Result<Vec<f64>> {
    let (d, m) = (op.in_dim(), op.out_dim());
    let mut eye = vec![0.0; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
    }
    let cols = op.apply(&Tensor::constant(d, d, eye))?;
    let mut a = vec![0.0; m * d];
    for i in 0..d {
        for j in 0..m {
            a[j * d + i] = cols.data()[i * m + j];
        }
    }
    Ok(a)
}

/// Exact posterior for a Gaussian prior observed through a linear operator
/// with isotropic Gaussian noise.
#[derive(Debug, Clone)]
pub struct ConjugatePosterior {
    pub mean: Vec<f64>,
    /// Row-major d×d, symmetrized after inversion.
    pub cov: Vec<f64>,
    pub dim: usize,
}

/// Σ_post = (Σ0⁻¹ + AᵀA/σ_y²)⁻¹ and μ_post = Σ_post(Σ0⁻¹μ0 + Aᵀy/σ_y²).
pub fn conjugate_posterior(
    mu0: &[f64],
    cov0: &[f64],
    op: &ForwardOperator,
    sigma_y: f64,
    y: &[f64],
) -> Result<ConjugatePosterior> {
    let d = mu0.len();
    let m = op.out_dim();
    if cov0.len() != d * d || op.in_dim() != d || y.len() != m {
        return Err(Error::ShapeMismatch {
            op: "conjugate_posterior",
            expected: format!("mu0 [{d}], cov0 [{d}x{d}], y [{m}]"),
            got: format!("cov0 len {}, y len {}", cov0.len(), y.len()),
        });
    }
    if sigma_y <= 0.0 {
        return Err(Error::InvalidArg(format!("sigma_y {sigma_y} must be > 0")));
    }
    let a = operator_matrix(op)?;
    let prior_prec = linalg::invert(cov0, d)?;
    let inv_var = 1.0 / (sigma_y * sigma_y);
    let mut prec = prior_prec.clone();
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..m {
                s += a[k * d + i] * a[k * d + j];
            }
            prec[i * d + j] += s * inv_var;
        }
    }
    let cov_raw = linalg::invert(&prec, d)?;
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] = 0.5 * (cov_raw[i * d + j] + cov_raw[j * d + i]);
        }
    }
    let mut rhs = vec![0.0; d];
    for i in 0..d {
        let mut s = 0.0;
        for j in 0..d {
            s += prior_prec[i * d + j] * mu0[j];
        }
        for k in 0..m {
            s += a[k * d + i] * y[k] * inv_var;
        }
        rhs[i] = s;
    }
    let mut mean = vec![0.0; d];
    for i in 0..d {
        mean[i] = (0..d).map(|j| cov[i * d + j] * rhs[j]).sum();
    }
    Ok(ConjugatePosterior { mean, cov, dim: d })
}

/// Sample mean, covariance, and the draws themselves from `n` flow samples
/// under one condition vector. Covariance is omitted at n = 1.
pub struct PosteriorStats {
    pub mean: Vec<f64>,
    /// Row-major d×d with 1/(n−1) normalization; None when n = 1.
    pub cov: Option<Vec<f64>>,
    pub samples: Tensor,
}

pub fn posterior_stats(
    flow: &ConditionalFlow,
    cond: &Tensor,
    n: usize,
    rng: &mut Rng,
) -> Result<PosteriorStats> {
    if n == 0 {
        return Err(Error::InvalidArg("need at least one posterior draw".into()));
    }
    let samples = flow.sample_posterior(cond, n, rng)?;
    let d = samples.cols();
    let nf = n as f64;
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for k in 0..d {
            mean[k] += samples.data()[r * d + k];
        }
    }
    for v in &mut mean {
        *v /= nf;
    }
    let cov = if n > 1 {
        let mut c = vec![0.0; d * d];
        for r in 0..n {
            let row = &samples.data()[r * d..(r + 1) * d];
            for i in 0..d {
                for j in 0..d {
                    c[i * d + j] += (row[i] - mean[i]) * (row[j] - mean[j]);
                }
            }
        }
        for v in &mut c {
            *v /= nf - 1.0;
        }
        Some(c)
    } else {
        None
    };
    Ok(PosteriorStats { mean, cov, samples })
}

#[derive(Debug, Clone, Copy)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    /// Seconds for this reconstruction.
    pub wall_time: f64,
    /// Score-network (or flow) forward passes per posterior draw.
    pub nfe: u64,
}

/// Anything that turns one measurement into an [1, d] reconstruction,
/// optionally averaging n_avg posterior draws.
pub trait Reconstructor {
    fn name(&self) -> &str;
    fn nfe(&self) -> u64;
    fn reconstruct(&self, meas: &Measurement, n_avg: usize, rng: &mut Rng) -> Result<Tensor>;
}

fn row_mean(samples: &Tensor) -> Tensor {
    let (n, d) = (samples.rows(), samples.cols());
    let mut out = vec![0.0; d];
    for r in 0..n {
        for k in 0..d {
            out[k] += samples.data()[r * d + k];
        }
    }
    for v in &mut out {
        *v /= n as f64;
    }
    Tensor::row(out)
}

pub struct FlowReconstructor<'a> {
    pub flow: &'a ConditionalFlow,
    pub mode: ConditionMode,
}

impl Reconstructor for FlowReconstructor<'_> {
    fn name(&self) -> &str {
        "flow"
    }
    fn nfe(&self) -> u64 {
        1
    }
    fn reconstruct(&self, meas: &Measurement, n_avg: usize, rng: &mut Rng) -> Result<Tensor> {
        let cond = condition_vector(meas, self.mode)?;
        let samples = self.flow.sample_posterior(&cond, n_avg, rng)?;
        Ok(row_mean(&samples))
    }
}

pub struct DpsReconstructor<'a> {
    pub score: &'a dyn Score,
    pub sched: &'a NoiseSchedule,
    pub cfg: SamplerConfig,
}

impl Reconstructor for DpsReconstructor<'_> {
    fn name(&self) -> &str {
        "dps"
    }
    fn nfe(&self) -> u64 {
        self.cfg.steps as u64
    }
    fn reconstruct(&self, meas: &Measurement, n_avg: usize, rng: &mut Rng) -> Result<Tensor> {
        let op = meas.operator.as_ref().ok_or_else(|| {
            Error::InvalidArg("guided sampling needs the measurement operator".into())
        })?;
        let samples = dps_sample(
            self.score,
            self.sched,
            &meas.y,
            op,
            meas.sigma_y,
            &self.cfg,
            n_avg,
            rng,
        )?;
        Ok(row_mean(&samples))
    }
}

pub struct EvalRow {
    pub id: u64,
    pub report: MetricReport,
}

pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_mse: f64,
    pub median_wall_time: f64,
    pub nfe: u64,
}

/// How SSIM windows the signal.
#[derive(Debug, Clone, Copy)]
pub enum SsimLayout {
    Flat { window: usize },
    Grid { h: usize, w: usize, window: usize },
}

/// Run a reconstructor over every measurement of an evaluation set and
/// score against the held-out truths. Ground truth reaches only this
/// function, never the reconstructor.
pub fn evaluate(
    rec: &dyn Reconstructor,
    eval: &EvalSet,
    n_avg: usize,
    peak: f64,
    layout: SsimLayout,
    rng: &mut Rng,
) -> Result<EvalReport> {
    if eval.set.items.len() != eval.truths.len() {
        return Err(Error::Format(
            "evaluation set truth count does not match measurements".into(),
        ));
    }
    let mut rows = Vec::with_capacity(eval.set.items.len());
    let mut times = Vec::with_capacity(eval.set.items.len());
    let (mut sp, mut ss, mut sm) = (0.0, 0.0, 0.0);
    for (meas, truth) in eval.set.items.iter().zip(&eval.truths) {
        let t0 = Instant::now();
        let xhat = rec.reconstruct(meas, n_avg, rng)?;
        let dt = t0.elapsed().as_secs_f64();
        let m = mse(&xhat, truth)?;
        let p = psnr(&xhat, truth, peak)?;
        let s = match layout {
            SsimLayout::Flat { window } => ssim(&xhat, truth, peak, window)?,
            SsimLayout::Grid { h, w, window } => ssim_grid(&xhat, truth, h, w, peak, window)?,
        };
        sp += p;
        ss += s;
        sm += m;
        times.push(dt);
        rows.push(EvalRow {
            id: meas.id,
            report: MetricReport {
                psnr: p,
                ssim: s,
                mse: m,
                wall_time: dt,
                nfe: rec.nfe(),
            },
        });
    }
    let n = rows.len() as f64;
    times.sort_by(f64::total_cmp);
    let median = if times.is_empty() {
        0.0
    } else {
        times[times.len() / 2]
    };
    Ok(EvalReport {
        mean_psnr: sp / n,
        mean_ssim: ss / n,
        mean_mse: sm / n,
        median_wall_time: median,
        nfe: rec.nfe(),
        rows,
    })
}

pub fn report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut out = String::from("id,psnr,ssim,mse,wall_time,nfe\n");
    for row in &report.rows {
        let r = &row.report;
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.id, r.psnr, r.ssim, r.mse, r.wall_time, r.nfe
        ));
    }
    let mut f = std::fs::File::create(path).map_err(Error::Io)?;
    f.write_all(out.as_bytes()).map_err(Error::Io)
}

/// Median of 100 timed calls after 10 warmups. Single thread; the medians
/// make speed comparisons stable against scheduler noise.
pub fn median_wall_time(mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..10 {
        f()?;
    }
    let mut times = Vec::with_capacity(100);
    for _ in 0..100 {
        let t0 = Instant::now();
        f()?;
        times.push(t0.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(0.5 * (times[49] + times[50]))
}

fn quantize(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// 8-bit binary PGM; values are clamped to [0,1] before quantization.
pub fn emit_pgm(values: &[f64], w: usize, h: usize, path: &Path) -> Result<()> {
    if values.len() != w * h {
        return Err(Error::ShapeMismatch {
            op: "emit_pgm",
            expected: format!("{} values", w * h),
            got: format!("{}", values.len()),
        });
    }
    let mut f = std::fs::File::create(path).map_err(Error::Io)?;
    f.write_all(format!("P5\n{w} {h}\n255\n").as_bytes())
        .map_err(Error::Io)?;
    f.write_all(&quantize(values)).map_err(Error::Io)
}

/// 8-bit binary PPM from interleaved RGB triples.
pub fn emit_ppm(values: &[f64], w: usize, h: usize, path: &Path) -> Result<()> {
    if values.len() != 3 * w * h {
        return Err(Error::ShapeMismatch {
            op: "emit_ppm",
            expected: format!("{} values", 3 * w * h),
            got: format!("{}", values.len()),
        });
    }
    let mut f = std::fs::File::create(path).map_err(Error::Io)?;
    f.write_all(format!("P6\n{w} {h}\n255\n").as_bytes())
        .map_err(Error::Io)?;
    f.write_all(&quantize(values)).map_err(Error::Io)
}

fn pairwise_mean_dist(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.cols();
    let (na, nb) = (a.rows(), b.rows());
    let mut s = 0.0;
    for i in 0..na {
        let ra = &a.data()[i * d..(i + 1) * d];
        for j in 0..nb {
            let rb = &b.data()[j * d..(j + 1) * d];
            s += ra
                .iter()
                .zip(rb)
                .map(|(u, v)| (u - v) * (u - v))
                .sum::<f64>()
                .sqrt();
        }
    }
    s / (na * nb) as f64
}

/// Squared energy distance 2·E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖; zero iff the
/// distributions agree. O(n²·d).
pub fn energy_distance(a: &Tensor, b: &Tensor) -> f64 {
    2.0 * pairwise_mean_dist(a, b) - pairwise_mean_dist(a, a) - pairwise_mean_dist(b, b)
}

/// Permutation p-value for the hypothesis that two sample sets came from
/// the same distribution.
pub fn energy_distance_pvalue(a: &Tensor, b: &Tensor, n_perm: usize, rng: &mut Rng) -> f64 {
    let d = a.cols();
    let (na, nb) = (a.rows(), b.rows());
    let observed = energy_distance(a, b);
    let mut pool: Vec<f64> = a.data().to_vec();
    pool.extend_from_slice(b.data());
    let mut idx: Vec<usize> = (0..na + nb).collect();
    let mut hits = 0usize;
    for _ in 0..n_perm {
        rng.shuffle(&mut idx);
        let gather = |range: std::ops::Range<usize>| {
            let mut out = Vec::with_capacity(range.len() * d);
            for &r in &idx[range] {
                out.extend_from_slice(&pool[r * d..(r + 1) * d]);
            }
            out
        };
        let pa = Tensor::constant(na, d, gather(0..na));
        let pb = Tensor::constant(nb, d, gather(na..na + nb));
        if energy_distance(&pa, &pb) >= observed {
            hits += 1;
        }
    }
    (hits + 1) as f64 / (n_perm + 1) as f64
}
