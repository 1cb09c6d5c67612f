//! Shipping gate: one test per release criterion, each ending in a single
//! PASS line with the measured numbers (visible under --nocapture).
//!
//! Heavy artifacts (the flagship conjugate-posterior flow, the blobs teacher
//! and its two distilled flows) are trained once in lazy statics and shared.
//! Every test takes a global gate first so the wall-clock measurements in the
//! speed criterion never compete with concurrent training threads.

use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use once_cell::sync::Lazy;

use ampost_core::diffusion::NoiseSchedule;
use ampost_core::distill::{distill_train, DistillConfig};
use ampost_core::flow::{ConditionMode, ConditionalFlow, FlowSpec};
use ampost_core::harness::{conjugate_posterior, median_wall_time, posterior_stats, psnr};
use ampost_core::operators::{
    condition_vector, gen_toy_dataset, ForwardOperator, MeasurementSet, OpSpec, ToyKind,
    GAUSS2D_COV, GAUSS2D_MEAN,
};
use ampost_core::rng::Rng;
use ampost_core::samplers::{dps_sample, elbo_full, pf_ode_loglik, SamplerConfig};
use ampost_core::score::{
    score_mse, train_score_net, AnalyticCovGaussianScore, ScoreNetwork, ScoreTrainConfig,
};
use ampost_core::tensor::{finite_diff_gradient, Tensor};

static GATE: Mutex<()> = Mutex::new(());

fn gate() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn randn_mat(r: usize, c: usize, rng: &mut Rng) -> Tensor {
    Tensor::constant(r, c, (0..r * c).map(|_| rng.normal()).collect())
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

fn gauss2d_cov_flat() -> Vec<f64> {
    GAUSS2D_COV.iter().flatten().copied().collect()
}

// ---------------------------------------------------------------------------
// criterion 1: reverse-mode gradients vs central finite differences

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Largest relative gradient deviation over every entry of every input of
/// the scalar-valued graph built by `f`.
fn max_grad_err(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> Tensor) -> f64 {
    let vars: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::var(t.rows(), t.cols(), t.to_vec()))
        .collect();
    let loss = f(&vars);
    assert_eq!(loss.shape(), [1, 1], "probe loss must be scalar");
    let grads = loss.backward().unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v).expect("probe input missing from gradients").to_vec();
        let fd = finite_diff_gradient(
            |t| {
                let mut alt: Vec<Tensor> = inputs.to_vec();
                alt[i] = t.clone();
                f(&alt).item()
            },
            v,
            1e-5,
        );
        for (a, b) in analytic.iter().zip(fd.data()) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    worst
}

fn probe_op(
    name: &str,
    rng: &mut Rng,
    worst: &mut f64,
    mut make: impl FnMut(&mut Rng) -> (Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> Tensor>),
) {
    for k in 0..100 {
        let (inputs, f) = make(rng);
        let e = max_grad_err(&inputs, f.as_ref());
        assert!(e < 1e-6, "{name} probe {k}: gradient rel err {e:.3e} >= 1e-6");
        if e > *worst {
            *worst = e;
        }
    }
}

#[test]
fn autodiff_matches_finite_differences() {
    let _g = gate();
    let t0 = Instant::now();
    let mut rng = Rng::new(11);
    let mut worst = 0.0f64;
    let mut kinds = 0usize;

    probe_op("add", &mut rng, &mut worst, |r| {
        let (a, b, w) = (randn_mat(3, 4, r), randn_mat(3, 4, r), randn_mat(3, 4, r));
        (vec![a, b], Box::new(move |x| x[0].add(&x[1]).mul(&w).sum()))
    });
    kinds += 1;
    probe_op("sub", &mut rng, &mut worst, |r| {
        let (a, b, w) = (randn_mat(3, 4, r), randn_mat(3, 4, r), randn_mat(3, 4, r));
        (vec![a, b], Box::new(move |x| x[0].sub(&x[1]).mul(&w).sum()))
    });
    kinds += 1;
    probe_op("mul", &mut rng, &mut worst, |r| {
        let (a, b, w) = (randn_mat(3, 4, r), randn_mat(3, 4, r), randn_mat(3, 4, r));
        (vec![a, b], Box::new(move |x| x[0].mul(&x[1]).mul(&w).sum()))
    });
    kinds += 1;
    // denominators held away from zero so the central difference stays smooth
    probe_op("div", &mut rng, &mut worst, |r| {
        let a = randn_mat(3, 4, r);
        let b = Tensor::constant(
            3,
            4,
            (0..12)
                .map(|_| {
                    let n = r.normal();
                    n.signum() * (0.5 + n.abs())
                })
                .collect(),
        );
        let w = randn_mat(3, 4, r);
        (vec![a, b], Box::new(move |x| x[0].div(&x[1]).mul(&w).sum()))
    });
    kinds += 1;
    probe_op("matmul", &mut rng, &mut worst, |r| {
        let (a, b, w) = (randn_mat(3, 4, r), randn_mat(4, 2, r), randn_mat(3, 2, r));
        (vec![a, b], Box::new(move |x| x[0].matmul(&x[1]).mul(&w).sum()))
    });
    kinds += 1;
    probe_op("exp", &mut rng, &mut worst, |r| {
        let (a, w) = (randn_mat(3, 4, r), randn_mat(3, 4, r));
        (vec![a], Box::new(move |x| x[0].exp().mul(&w).sum()))
    });
    kinds += 1;
    // strictly positive inputs, bounded away from the log singularity
    probe_op("log", &mut rng, &mut worst, |r| {
        let a = Tensor::constant(3, 4, (0..12).map(|_| 0.2 + 2.8 * r.uniform()).collect());
        let w = randn_mat(3, 4, r);
        (vec![a], Box::new(move |x| x[0].log().mul(&w).sum()))
    });
    kinds += 1;
    probe_op("tanh", &mut rng, &mut worst, |r| {
        let (a, w) = (randn_mat(3, 4, r), randn_mat(3, 4, r));
        (vec![a], Box::new(move |x| x[0].tanh().mul(&w).sum()))
    });
    kinds += 1;
    // inputs held away from the relu kink where the derivative jumps
    probe_op("relu", &mut rng, &mut worst, |r| {
        let a = Tensor::constant(
            3,
            4,
            (0..12)
                .map(|_| {
                    let n = r.normal();
                    n.signum() * (0.1 + n.abs())
                })
                .collect(),
        );
        let w = randn_mat(3, 4, r);
        (vec![a], Box::new(move |x| x[0].relu().mul(&w).sum()))
    });
    kinds += 1;
    probe_op("square", &mut rng, &mut worst, |r| {
        let (a, w) = (randn_mat(3, 4, r), randn_mat(3, 4, r));
        (vec![a], Box::new(move |x| x[0].square().mul(&w).sum()))
    });
    kinds += 1;
    probe_op("scale", &mut rng, &mut worst, |r| {
        let (a, w) = (randn_mat(3, 4, r), randn_mat(3, 4, r));
        let c = 0.5 + 2.0 * r.uniform();
        (vec![a], Box::new(move |x| x[0].scale(c).mul(&w).sum()))
    });
    kinds += 1;
    probe_op("neg", &mut rng, &mut worst, |r| {
        let (a, w) = (randn_mat(3, 4, r), randn_mat(3, 4, r));
        (vec![a], Box::new(move |x| x[0].neg().mul(&w).sum()))
    });
    kinds += 1;
    probe_op("add_scalar", &mut rng, &mut worst, |r| {
        let (a, w) = (randn_mat(3, 4, r), randn_mat(3, 4, r));
        let c = r.normal();
        (vec![a], Box::new(move |x| x[0].add_scalar(c).mul(&w).sum()))
    });
    kinds += 1;
    probe_op("sum", &mut rng, &mut worst, |r| {
        let (a, w) = (randn_mat(3, 4, r), randn_mat(3, 4, r));
        (vec![a], Box::new(move |x| x[0].mul(&w).sum()))
    });
    kinds += 1;
    probe_op("mean", &mut rng, &mut worst, |r| {
        let (a, w) = (randn_mat(3, 4, r), randn_mat(3, 4, r));
        (vec![a], Box::new(move |x| x[0].mul(&w).mean()))
    });
    kinds += 1;
    probe_op("row_sum", &mut rng, &mut worst, |r| {
        let (a, w) = (randn_mat(4, 3, r), randn_mat(4, 1, r));
        (vec![a], Box::new(move |x| x[0].row_sum().mul(&w).sum()))
    });
    kinds += 1;
    probe_op("gaussian_logpdf", &mut rng, &mut worst, |r| {
        let (a, w) = (randn_mat(3, 4, r), randn_mat(3, 4, r));
        (vec![a], Box::new(move |x| x[0].mul(&w).gaussian_logpdf()))
    });
    kinds += 1;
    probe_op("concat_cols", &mut rng, &mut worst, |r| {
        let (a, b, w) = (randn_mat(3, 2, r), randn_mat(3, 3, r), randn_mat(3, 5, r));
        (vec![a, b], Box::new(move |x| x[0].concat_cols(&x[1]).mul(&w).sum()))
    });
    kinds += 1;
    probe_op("concat_rows", &mut rng, &mut worst, |r| {
        let (a, b, w) = (randn_mat(2, 4, r), randn_mat(3, 4, r), randn_mat(5, 4, r));
        (vec![a, b], Box::new(move |x| x[0].concat_rows(&x[1]).mul(&w).sum()))
    });
    kinds += 1;
    probe_op("slice_cols", &mut rng, &mut worst, |r| {
        let (a, w) = (randn_mat(3, 5, r), randn_mat(3, 3, r));
        (vec![a], Box::new(move |x| x[0].slice_cols(1, 4).mul(&w).sum()))
    });
    kinds += 1;
    probe_op("split_cols", &mut rng, &mut worst, |r| {
        let (a, wl, wr) = (randn_mat(3, 5, r), randn_mat(3, 2, r), randn_mat(3, 3, r));
        (
            vec![a],
            Box::new(move |x| {
                let (l, rr) = x[0].split_cols(2);
                l.mul(&wl).sum().add(&rr.mul(&wr).sum())
            }),
        )
    });
    kinds += 1;
    probe_op("reshape", &mut rng, &mut worst, |r| {
        let (a, w) = (randn_mat(3, 4, r), randn_mat(2, 6, r));
        (vec![a], Box::new(move |x| x[0].reshape(2, 6).mul(&w).sum()))
    });
    kinds += 1;
    probe_op("broadcast_rows", &mut rng, &mut worst, |r| {
        let (a, w) = (randn_mat(1, 4, r), randn_mat(5, 4, r));
        (vec![a], Box::new(move |x| x[0].broadcast_rows(5).mul(&w).sum()))
    });
    kinds += 1;
    probe_op("permute_cols", &mut rng, &mut worst, |r| {
        let (a, w) = (randn_mat(3, 5, r), randn_mat(3, 5, r));
        let mut p: Vec<usize> = (0..5).collect();
        r.shuffle(&mut p);
        let perm = Arc::new(p);
        (vec![a], Box::new(move |x| x[0].permute_cols(&perm).mul(&w).sum()))
    });
    kinds += 1;

    let el = t0.elapsed().as_secs_f64();
    assert!(el < 60.0, "autodiff check took {el:.1}s, limit 60s");
    println!(
        "acceptance 01 autodiff gradients: PASS ({kinds} op kinds x 100 probes, worst rel err {worst:.2e}, {el:.1}s)"
    );
}

// ---------------------------------------------------------------------------
// criterion 2: flow invertibility and log-det exactness

/// log|det| of a small dense matrix by partial-pivot elimination.
fn logdet_abs(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        let p = a[col][col];
        assert!(p.abs() > 1e-12, "numeric Jacobian is singular");
        acc += p.abs().ln();
        for row in col + 1..n {
            let f = a[row][col] / p;
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    acc
}

#[test]
fn flow_round_trip_and_logdet_are_exact() {
    let _g = gate();
    let t0 = Instant::now();
    let d = 6;
    let spec = FlowSpec {
        steps: 3,
        hidden_layers: 1,
        hidden_width: 32,
    };
    let mut flow = ConditionalFlow::new(d, 3, spec, &mut Rng::new(21));
    // a fresh flow is the identity map (zero-init couplings); jiggle every
    // weight so the map under test has nontrivial scales everywhere. The
    // jiggle is kept moderate so central differences stay in their accurate
    // regime when the Jacobian is probed below.
    let names: Vec<String> = flow.params().names().map(str::to_string).collect();
    let mut prng = Rng::new(22);
    for name in &names {
        let (r, c, data) = {
            let t = flow.params().get(name);
            let data: Vec<f64> = t.to_vec().iter().map(|v| v + 0.12 * prng.normal()).collect();
            (t.rows(), t.cols(), data)
        };
        flow.params_mut().insert(name, Tensor::var(r, c, data));
    }

    let mut rng = Rng::new(23);
    let z = Tensor::randn(1000, d, &mut rng);
    let y = Tensor::randn(1000, 3, &mut rng);
    let (x, _) = flow.forward(&z, &y).unwrap();
    let (z2, _) = flow.inverse(&x, &y).unwrap();
    let round_trip = z
        .data()
        .iter()
        .zip(z2.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(round_trip < 1e-8, "round-trip sup-norm {round_trip:.3e} >= 1e-8");

    let h = 1e-6;
    let mut worst_ld = 0.0f64;
    for _ in 0..5 {
        let z0 = Tensor::randn(1, d, &mut rng);
        let y0 = Tensor::randn(1, 3, &mut rng);
        let (_, ld) = flow.forward(&z0, &y0).unwrap();
        let mut jac = vec![vec![0.0; d]; d];
        for k in 0..d {
            let mut zp = z0.to_vec();
            zp[k] += h;
            let mut zm = z0.to_vec();
            zm[k] -= h;
            let xp = flow.forward(&Tensor::row(zp), &y0).unwrap().0;
            let xm = flow.forward(&Tensor::row(zm), &y0).unwrap().0;
            for i in 0..d {
                jac[i][k] = (xp.data()[i] - xm.data()[i]) / (2.0 * h);
            }
        }
        let gap = (logdet_abs(jac) - ld.item()).abs();
        worst_ld = worst_ld.max(gap);
        assert!(gap < 1e-5, "log-det vs numeric Jacobian: abs err {gap:.3e} >= 1e-5");
    }

    let el = t0.elapsed().as_secs_f64();
    assert!(el < 60.0, "flow exactness check took {el:.1}s, limit 60s");
    println!(
        "acceptance 02 flow exactness: PASS (1000-pair round trip {round_trip:.2e}, log-det gap {worst_ld:.2e} at d={d}, {el:.1}s)"
    );
}

// ---------------------------------------------------------------------------
// criteria 3 and 4: flagship conjugate-posterior distillation + amortization

const FLAGSHIP_SIGMA_Y: f64 = 0.5;

struct Flagship {
    flow: ConditionalFlow,
    train_secs: f64,
    steps: u64,
}

static FLAGSHIP: Lazy<Flagship> = Lazy::new(|| {
    let sched = NoiseSchedule::default();
    let teacher =
        AnalyticCovGaussianScore::new(GAUSS2D_MEAN.to_vec(), gauss2d_cov_flat()).unwrap();
    let mut rng = Rng::new(1001);
    let signals = gen_toy_dataset(ToyKind::Gauss2d, 1024, &mut rng);
    let set = MeasurementSet::synthesize(&signals, &OpSpec::Identity, FLAGSHIP_SIGMA_Y, false, &mut rng)
        .unwrap();
    let spec = FlowSpec {
        steps: 8,
        hidden_layers: 1,
        hidden_width: 48,
    };
    let mut flow = ConditionalFlow::new(2, 2, spec, &mut Rng::new(2002));
    let mut train_rng = Rng::new(2003);
    let t0 = Instant::now();
    let mut steps = 0;
    for &(lr, iters) in &[(1e-3, 10_000u64), (2e-4, 8_000), (5e-5, 6_000)] {
        let cfg = DistillConfig {
            sigma_y: FLAGSHIP_SIGMA_Y,
            n_t_samples: 2,
            lr,
            batch: 64,
            iters,
            condition_mode: ConditionMode::MaskedSignal,
            log_every: 2000,
            ..DistillConfig::default()
        };
        distill_train(&mut flow, &teacher, &set, &sched, &cfg, &mut train_rng).unwrap();
        steps += iters;
    }
    Flagship {
        flow,
        train_secs: t0.elapsed().as_secs_f64(),
        steps,
    }
});

/// Worst per-coordinate posterior-mean error and worst relative Frobenius
/// covariance error over `n_y` measurements the flow never trained on.
fn flagship_posterior_check(flow: &ConditionalFlow, eval_seed: u64, n_y: usize) -> (f64, f64) {
    let cov0 = gauss2d_cov_flat();
    let op = ForwardOperator::identity(2);
    let mut eval_rng = Rng::new(eval_seed);
    let mut worst_mean = 0.0f64;
    let mut worst_cov = 0.0f64;
    for _ in 0..n_y {
        let gt = gen_toy_dataset(ToyKind::Gauss2d, 1, &mut eval_rng);
        let y: Vec<f64> = gt
            .data()
            .iter()
            .map(|v| v + FLAGSHIP_SIGMA_Y * eval_rng.normal())
            .collect();
        let oracle =
            conjugate_posterior(&GAUSS2D_MEAN, &cov0, &op, FLAGSHIP_SIGMA_Y, &y).unwrap();
        let stats = posterior_stats(flow, &Tensor::row(y), 10_000, &mut eval_rng).unwrap();
        for k in 0..2 {
            worst_mean = worst_mean.max((stats.mean[k] - oracle.mean[k]).abs());
        }
        let cov = stats.cov.expect("10k draws always yield a covariance");
        let num: f64 = (0..4)
            .map(|i| (cov[i] - oracle.cov[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = oracle.cov.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst_cov = worst_cov.max(num / den);
    }
    (worst_mean, worst_cov)
}

#[test]
fn distilled_flow_matches_conjugate_posterior() {
    let _g = gate();
    let t0 = Instant::now();
    let art = &*FLAGSHIP;
    assert!(art.steps <= 50_000);
    let (worst_mean, worst_cov) = flagship_posterior_check(&art.flow, 9999, 5);
    assert!(
        worst_mean < 0.05,
        "posterior mean err {worst_mean:.4} >= 0.05 per coordinate"
    );
    assert!(
        worst_cov < 0.15,
        "posterior cov rel Frobenius err {worst_cov:.4} >= 0.15"
    );
    let el = t0.elapsed().as_secs_f64();
    assert!(el < 900.0, "flagship criterion took {el:.0}s, limit 900s");
    println!(
        "acceptance 03 conjugate-posterior distillation: PASS (5 held-out y, mean err {worst_mean:.4}, cov rel-F {worst_cov:.4}, {} steps in {:.0}s, {el:.0}s)",
        art.steps, art.train_secs
    );
}

#[test]
fn flagship_tolerances_hold_on_unseen_measurements() {
    let _g = gate();
    let t0 = Instant::now();
    let art = &*FLAGSHIP;
    // a second, disjoint batch of fresh measurements: same tolerances must
    // hold with no per-measurement adaptation of any kind
    let (worst_mean, worst_cov) = flagship_posterior_check(&art.flow, 4444, 5);
    assert!(
        worst_mean < 0.05,
        "unseen-y posterior mean err {worst_mean:.4} >= 0.05 per coordinate"
    );
    assert!(
        worst_cov < 0.15,
        "unseen-y posterior cov rel Frobenius err {worst_cov:.4} >= 0.15"
    );
    let el = t0.elapsed().as_secs_f64();
    assert!(el < 900.0, "amortization criterion took {el:.0}s, limit 900s");
    println!(
        "acceptance 04 amortization to unseen y: PASS (5 fresh y, mean err {worst_mean:.4}, cov rel-F {worst_cov:.4}, {el:.0}s)"
    );
}

// ---------------------------------------------------------------------------
// criterion 5: the training bound never exceeds the exact model likelihood

#[test]
fn elbo_lower_bounds_ode_loglik() {
    let _g = gate();
    let t0 = Instant::now();
    let sched = NoiseSchedule::default();
    let teacher =
        AnalyticCovGaussianScore::new(GAUSS2D_MEAN.to_vec(), gauss2d_cov_flat()).unwrap();
    let mut rng = Rng::new(41);
    let points = gen_toy_dataset(ToyKind::Gauss2d, 20, &mut rng);
    let mut min_slack = f64::INFINITY;
    for i in 0..20 {
        let x0 = Tensor::row(points.data()[i * 2..(i + 1) * 2].to_vec());
        let ll = pf_ode_loglik(&teacher, &sched, &x0, 1e-8).unwrap();
        let (b, se) = elbo_full(&teacher, &sched, &x0, 4096, 8, &mut rng).unwrap();
        assert!(
            b <= ll + 3.0 * se,
            "point {i}: bound {b:.5} exceeds loglik {ll:.5} + 3*{se:.5}"
        );
        min_slack = min_slack.min(ll + 3.0 * se - b);
    }
    let el = t0.elapsed().as_secs_f64();
    assert!(el < 300.0, "bound check took {el:.0}s, limit 300s");
    println!(
        "acceptance 05 variational bound: PASS (20 points, min slack {min_slack:.3} nats, {el:.1}s)"
    );
}

// ---------------------------------------------------------------------------
// criterion 6: learned score approaches the analytic score

#[test]
fn trained_score_network_matches_analytic_score() {
    let _g = gate();
    let t0 = Instant::now();
    let sched = NoiseSchedule::default();
    let oracle =
        AnalyticCovGaussianScore::new(GAUSS2D_MEAN.to_vec(), gauss2d_cov_flat()).unwrap();
    let mut rng = Rng::new(42);
    let data = gen_toy_dataset(ToyKind::Gauss2d, 4096, &mut rng);

    // probe grid: the two-sigma box around the prior mean (marginal sd is 1)
    let n_side = 15;
    let mut probe_rows = Vec::with_capacity(n_side * n_side * 2);
    for i in 0..n_side {
        for j in 0..n_side {
            let fx = i as f64 / (n_side - 1) as f64;
            let fy = j as f64 / (n_side - 1) as f64;
            probe_rows.push(GAUSS2D_MEAN[0] - 2.0 + 4.0 * fx);
            probe_rows.push(GAUSS2D_MEAN[1] - 2.0 + 4.0 * fy);
        }
    }
    let probes = Tensor::constant(n_side * n_side, 2, probe_rows);
    let ts: Vec<f64> = (1..10).map(|k| k as f64 / 10.0).collect();

    let cfg = ScoreTrainConfig {
        lr: 5e-4,
        batch: 128,
        iters: 10_000,
        hidden_layers: 2,
        hidden_width: 64,
        log_every: 5000,
    };
    let mut net = ScoreNetwork::new(2, cfg.hidden_layers, cfg.hidden_width, &mut Rng::new(43));
    train_score_net(&mut net, &data, &sched, &cfg, &mut Rng::new(44)).unwrap();
    let m = score_mse(&net, &oracle, &probes, &ts, &sched).unwrap();
    assert!(m < 0.05, "score MSE {m:.4} >= 0.05 after {} iters", cfg.iters);
    let el = t0.elapsed().as_secs_f64();
    assert!(el < 600.0, "score training took {el:.0}s, limit 600s");
    println!(
        "acceptance 06 learned score: PASS (MSE {m:.4} over 225 probes x 9 times after {} iters, {el:.0}s)",
        cfg.iters
    );
}

// ---------------------------------------------------------------------------
// criterion 7: guided sampler recovers the 1D conjugate mean, degrading
// as the step budget shrinks

#[test]
fn guided_sampler_mean_degrades_with_coarser_steps() {
    let _g = gate();
    let t0 = Instant::now();
    let sched = NoiseSchedule::default();
    // prior N(0,1), y = 2 with unit noise: posterior is N(1, 1/2)
    let teacher = AnalyticCovGaussianScore::new(vec![0.0], vec![1.0]).unwrap();
    let op = ForwardOperator::identity(1);
    let y = Tensor::row(vec![2.0]);
    let fine = SamplerConfig {
        steps: 1000,
        zeta: 2.5e-3,
        ..SamplerConfig::default()
    };
    let coarse = SamplerConfig {
        steps: 20,
        zeta: 2.5e-3,
        ..SamplerConfig::default()
    };
    let chain_mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.rows() as f64;
    let xs_fine =
        dps_sample(&teacher, &sched, &y, &op, 1.0, &fine, 10_000, &mut Rng::new(71)).unwrap();
    let xs_coarse = dps_sample(&teacher, &sched, &y, &op, 1.0, &coarse, 10_000, &mut Rng::new(72))
        .unwrap();
    let err_fine = (chain_mean(&xs_fine) - 1.0).abs();
    let err_coarse = (chain_mean(&xs_coarse) - 1.0).abs();
    assert!(err_fine < 0.1, "1000-step mean err {err_fine:.4} >= 0.1");
    assert!(
        err_coarse > err_fine,
        "20-step err {err_coarse:.4} not worse than 1000-step err {err_fine:.4}"
    );
    let el = t0.elapsed().as_secs_f64();
    assert!(el < 600.0, "guided sampler check took {el:.0}s, limit 600s");
    println!(
        "acceptance 07 guided sampler: PASS (1e4 chains, |mean-1| = {err_fine:.4} at 1000 steps vs {err_coarse:.4} at 20, {el:.0}s)"
    );
}

// ---------------------------------------------------------------------------
// criteria 8-10: blobs imputation (averaging pattern, speed, blind masks)

const BLOBS_SIGMA_Y: f64 = 0.1;
const BLOBS_DIM: usize = 64;

struct Blobs {
    teacher: ScoreNetwork,
    flow30: ConditionalFlow,
    blind_flow: ConditionalFlow,
    train_secs: f64,
}

static BLOBS: Lazy<Blobs> = Lazy::new(|| {
    let sched = NoiseSchedule::default();
    let t0 = Instant::now();
    let mut rng = Rng::new(501);
    let data = gen_toy_dataset(ToyKind::Blobs8x8, 2048, &mut rng);
    let tcfg = ScoreTrainConfig {
        lr: 2e-4,
        batch: 64,
        iters: 4000,
        hidden_layers: 2,
        hidden_width: 128,
        log_every: 1000,
    };
    let mut teacher = ScoreNetwork::new(BLOBS_DIM, tcfg.hidden_layers, tcfg.hidden_width, &mut rng);
    train_score_net(&mut teacher, &data, &sched, &tcfg, &mut rng).unwrap();
    let teacher = teacher.frozen();

    // known-mask flow: 30% dropout, conditioned on the masked signal plus
    // the observation mask itself
    let train_signals = gen_toy_dataset(ToyKind::Blobs8x8, 1024, &mut rng);
    let set30 = MeasurementSet::synthesize(
        &train_signals,
        &OpSpec::Mask { p: 0.3 },
        BLOBS_SIGMA_Y,
        false,
        &mut rng,
    )
    .unwrap();
    let spec = FlowSpec {
        steps: 6,
        hidden_layers: 1,
        hidden_width: 96,
    };
    let mut flow30 = ConditionalFlow::new(BLOBS_DIM, 2 * BLOBS_DIM, spec, &mut Rng::new(601));
    let mut train_rng = Rng::new(602);
    for &(lr, iters) in &[(1e-3, 2500u64), (2e-4, 1500)] {
        let cfg = DistillConfig {
            sigma_y: BLOBS_SIGMA_Y,
            n_t_samples: 1,
            lr,
            batch: 32,
            iters,
            condition_mode: ConditionMode::MaskedSignalPlusMask,
            log_every: 500,
            ..DistillConfig::default()
        };
        distill_train(&mut flow30, &teacher, &set30, &sched, &cfg, &mut train_rng).unwrap();
    }

    // blind flow: operators withheld, training masks drawn at four dropout
    // levels spanning 30-60%, conditioning on the masked signal alone
    let levels = [0.3, 0.4, 0.5, 0.6];
    let mut blind_set = MeasurementSet::synthesize(
        &gen_toy_dataset(ToyKind::Blobs8x8, 256, &mut rng),
        &OpSpec::Mask { p: levels[0] },
        BLOBS_SIGMA_Y,
        true,
        &mut rng,
    )
    .unwrap();
    for &p in &levels[1..] {
        let extra = MeasurementSet::synthesize(
            &gen_toy_dataset(ToyKind::Blobs8x8, 256, &mut rng),
            &OpSpec::Mask { p },
            BLOBS_SIGMA_Y,
            true,
            &mut rng,
        )
        .unwrap();
        blind_set.items.extend(extra.items);
    }
    let mut blind_flow = ConditionalFlow::new(
        BLOBS_DIM,
        BLOBS_DIM,
        FlowSpec {
            steps: 6,
            hidden_layers: 1,
            hidden_width: 96,
        },
        &mut Rng::new(701),
    );
    let mut btrain_rng = Rng::new(702);
    for &(lr, iters) in &[(1e-3, 2500u64), (2e-4, 1500)] {
        let cfg = DistillConfig {
            sigma_y: BLOBS_SIGMA_Y,
            n_t_samples: 1,
            lr,
            batch: 32,
            iters,
            condition_mode: ConditionMode::MaskedSignal,
            log_every: 500,
            ..DistillConfig::default()
        };
        distill_train(&mut blind_flow, &teacher, &blind_set, &sched, &cfg, &mut btrain_rng)
            .unwrap();
    }
    Blobs {
        teacher,
        flow30,
        blind_flow,
        train_secs: t0.elapsed().as_secs_f64(),
    }
});

/// The held-out 30%-mask evaluation set shared by the averaging and speed
/// criteria; regenerated from its seed so each test stays self-contained.
fn blobs_eval_set() -> (Tensor, MeasurementSet, Rng) {
    let mut eval_rng = Rng::new(603);
    let held = gen_toy_dataset(ToyKind::Blobs8x8, 100, &mut eval_rng);
    let set = MeasurementSet::synthesize(
        &held,
        &OpSpec::Mask { p: 0.3 },
        BLOBS_SIGMA_Y,
        false,
        &mut eval_rng,
    )
    .unwrap();
    (held, set, eval_rng)
}

#[test]
fn posterior_averaging_beats_single_draws() {
    let _g = gate();
    let t0 = Instant::now();
    let art = &*BLOBS;
    let (held, eval30, mut eval_rng) = blobs_eval_set();
    let mut wins = 0;
    let mut db128 = 0.0;
    let mut db1 = 0.0;
    for (i, meas) in eval30.items.iter().enumerate() {
        let truth = Tensor::constant(
            1,
            BLOBS_DIM,
            held.data()[i * BLOBS_DIM..(i + 1) * BLOBS_DIM].to_vec(),
        );
        let cond = condition_vector(meas, ConditionMode::MaskedSignalPlusMask).unwrap();
        let s128 = art.flow30.sample_posterior(&cond, 128, &mut eval_rng).unwrap();
        let s1 = art.flow30.sample_posterior(&cond, 1, &mut eval_rng).unwrap();
        let p128 = psnr(&row_mean(&s128), &truth, 1.0).unwrap();
        let p1 = psnr(&s1, &truth, 1.0).unwrap();
        if p128 > p1 {
            wins += 1;
        }
        db128 += p128;
        db1 += p1;
    }
    assert!(wins >= 90, "128-draw mean beat a single draw on only {wins}/100 measurements");
    let el = t0.elapsed().as_secs_f64();
    println!(
        "acceptance 08 posterior averaging: PASS ({wins}/100 wins, mean PSNR {:.2} vs {:.2} dB, teacher+flows {:.0}s, {el:.0}s)",
        db128 / 100.0,
        db1 / 100.0,
        art.train_secs
    );
}

#[test]
fn flow_reconstruction_is_50x_faster_than_guided_sampling() {
    let _g = gate();
    let art = &*BLOBS;
    let sched = NoiseSchedule::default();
    let (_, eval30, _) = blobs_eval_set();
    let meas = &eval30.items[0];
    let cond = condition_vector(meas, ConditionMode::MaskedSignalPlusMask).unwrap();
    let op = meas.operator.clone().expect("known-mask set records its operator");

    let mut f_rng = Rng::new(604);
    let flow_t =
        median_wall_time(|| art.flow30.sample_posterior(&cond, 1, &mut f_rng).map(|_| ()))
            .unwrap();
    let dps_cfg = SamplerConfig {
        steps: 1000,
        zeta: 2.5e-5,
        ..SamplerConfig::default()
    };
    let mut d_rng = Rng::new(605);
    let dps_t = median_wall_time(|| {
        dps_sample(
            &art.teacher,
            &sched,
            &meas.y,
            &op,
            BLOBS_SIGMA_Y,
            &dps_cfg,
            1,
            &mut d_rng,
        )
        .map(|_| ())
    })
    .unwrap();
    let ratio = dps_t / flow_t;
    assert!(
        ratio >= 50.0,
        "flow/1000-step speed ratio {ratio:.1}x < 50x (flow {flow_t:.2e}s, dps {dps_t:.2e}s)"
    );
    println!(
        "acceptance 09 sampling speed: PASS (median over 100 runs: flow {flow_t:.2e}s vs 1000-step dps {dps_t:.2e}s, {ratio:.0}x)"
    );
}

#[test]
fn blind_flow_beats_masked_input_at_every_level() {
    let _g = gate();
    let t0 = Instant::now();
    let art = &*BLOBS;
    let mut lines = Vec::new();
    for &p in &[0.3, 0.4, 0.5, 0.6] {
        let mut lrng = Rng::new(800 + (p * 10.0) as u64);
        let truths = gen_toy_dataset(ToyKind::Blobs8x8, 16, &mut lrng);
        let es = MeasurementSet::synthesize(&truths, &OpSpec::Mask { p }, BLOBS_SIGMA_Y, true, &mut lrng)
            .unwrap();
        let mut flow_db = 0.0;
        let mut input_db = 0.0;
        for (i, meas) in es.items.iter().enumerate() {
            let truth = Tensor::constant(
                1,
                BLOBS_DIM,
                truths.data()[i * BLOBS_DIM..(i + 1) * BLOBS_DIM].to_vec(),
            );
            let cond = condition_vector(meas, ConditionMode::MaskedSignal).unwrap();
            let s = art.blind_flow.sample_posterior(&cond, 64, &mut lrng).unwrap();
            flow_db += psnr(&row_mean(&s), &truth, 1.0).unwrap();
            input_db += psnr(&meas.y, &truth, 1.0).unwrap();
        }
        flow_db /= 16.0;
        input_db /= 16.0;
        assert!(
            flow_db > input_db,
            "mask level {p}: flow {flow_db:.2} dB <= masked input {input_db:.2} dB"
        );
        lines.push(format!("{:.0}%: {flow_db:.1} > {input_db:.1}", p * 100.0));
    }
    let el = t0.elapsed().as_secs_f64();
    println!(
        "acceptance 10 blind imputation: PASS (PSNR dB by mask level: {}; {el:.0}s)",
        lines.join(", ")
    );
}

// ---------------------------------------------------------------------------
// criterion 11: bit-for-bit determinism of checkpoints and samples

#[test]
fn identical_seeds_reproduce_checkpoints_and_samples() {
    let _g = gate();
    let t0 = Instant::now();
    let sched = NoiseSchedule::default();
    let teacher =
        AnalyticCovGaussianScore::new(GAUSS2D_MEAN.to_vec(), gauss2d_cov_flat()).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let run = |tag: &str| -> (Vec<u8>, Vec<f64>, Vec<f64>) {
        let mut rng = Rng::new(111);
        let signals = gen_toy_dataset(ToyKind::Gauss2d, 64, &mut rng);
        let set = MeasurementSet::synthesize(&signals, &OpSpec::Identity, 0.5, false, &mut rng)
            .unwrap();
        let path = dir.path().join(format!("ckpt_{tag}.bin"));
        let mut flow = ConditionalFlow::new(
            2,
            2,
            FlowSpec {
                steps: 2,
                hidden_layers: 1,
                hidden_width: 16,
            },
            &mut Rng::new(112),
        );
        let cfg = DistillConfig {
            sigma_y: 0.5,
            n_t_samples: 1,
            lr: 1e-3,
            batch: 16,
            iters: 60,
            condition_mode: ConditionMode::MaskedSignal,
            checkpoint_every: 30,
            checkpoint_path: Some(path.clone()),
            ..DistillConfig::default()
        };
        distill_train(&mut flow, &teacher, &set, &sched, &cfg, &mut Rng::new(113)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let flow_samples = flow
            .sample_posterior(&Tensor::row(vec![0.3, -0.1]), 8, &mut Rng::new(114))
            .unwrap()
            .to_vec();
        let dps_cfg = SamplerConfig {
            steps: 50,
            zeta: 2.5e-3,
            ..SamplerConfig::default()
        };
        let dps = dps_sample(
            &teacher,
            &sched,
            &Tensor::row(vec![0.3, -0.1]),
            &ForwardOperator::identity(2),
            0.5,
            &dps_cfg,
            4,
            &mut Rng::new(115),
        )
        .unwrap()
        .to_vec();
        (bytes, flow_samples, dps)
    };

    let (ck1, fs1, dp1) = run("a");
    let (ck2, fs2, dp2) = run("b");
    assert_eq!(ck1.len(), ck2.len());
    assert!(ck1 == ck2, "checkpoint bytes differ between identically seeded runs");
    assert_eq!(fs1.len(), fs2.len());
    assert!(
        fs1.iter().zip(&fs2).all(|(a, b)| a.to_bits() == b.to_bits()),
        "flow samples differ between identically seeded runs"
    );
    assert_eq!(dp1.len(), dp2.len());
    assert!(
        dp1.iter().zip(&dp2).all(|(a, b)| a.to_bits() == b.to_bits()),
        "guided-sampler chains differ between identically seeded runs"
    );
    let el = t0.elapsed().as_secs_f64();
    println!(
        "acceptance 11 determinism: PASS ({}-byte checkpoints and all samples bit-identical, {el:.1}s)",
        ck1.len()
    );
}
