use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ampost_core::config::{resolve_seed, Config};
use ampost_core::container::Container;
use ampost_core::diffusion::NoiseSchedule;
use ampost_core::distill::{distill_train, trace_to_csv, DistillConfig};
use ampost_core::flow::{ConditionMode, ConditionalFlow, FlowSpec};
use ampost_core::harness::{
    conjugate_posterior, emit_pgm, evaluate, psnr, report_csv, DpsReconstructor,
    FlowReconstructor, Reconstructor, SsimLayout,
};
use ampost_core::operators::{
    condition_dim, condition_vector, gen_toy_dataset, EvalSet, ForwardOperator, MeasurementSet,
    OpSpec, ToyKind,
};
use ampost_core::samplers::{dps_sample, pf_ode_loglik, reverse_sde_sample, SamplerConfig};
use ampost_core::score::{train_score_net, AnalyticCovGaussianScore, ScoreNetwork, ScoreTrainConfig};
use ampost_core::tensor::finite_diff_gradient;
use ampost_core::{Rng, Tensor};

/// Amortized posterior sampling: train a diffusion prior, distill it into a
/// conditional flow, sample and evaluate reconstructions.
#[derive(Parser)]
#[command(name = "ampost", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a toy dataset, optionally pushed through a forward operator.
    MakeData(MakeDataArgs),
    /// Fit a score network to a signals container by denoising score matching.
    TrainScore(TrainScoreArgs),
    /// Distill a trained score into a measurement-conditional flow.
    Distill(DistillArgs),
    /// Draw posterior (or unconditional) samples from a checkpoint.
    Sample(SampleArgs),
    /// Score a reconstructor against a held-out evaluation set.
    Evaluate(EvaluateArgs),
    /// Run fast self-checks against closed-form references.
    OracleCheck,
}

#[derive(Args)]
struct MakeDataArgs {
    /// gauss2d, mixture2d, moons, blobs8x8, sphere_field
    #[arg(long)]
    kind: String,
    /// Number of signals to draw
    #[arg(long)]
    n: usize,
    /// Forward operator spec: id, mask:p=0.3, blur:sigma=1.0, down:f=2.
    /// Without it the output is a plain signals container.
    #[arg(long, requires = "sigma_y")]
    op: Option<String>,
    /// Measurement noise level
    #[arg(long, requires = "op")]
    sigma_y: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Mark the set blind: consumers condition on the masked signal alone
    #[arg(long, requires = "op")]
    blind: bool,
    /// Keep ground-truth signals alongside the measurements (for evaluate)
    #[arg(long, requires = "op")]
    with_truth: bool,
}

#[derive(Args)]
struct TrainScoreArgs {
    /// Flat key=value config; score.* and schedule.* keys apply
    #[arg(long)]
    config: PathBuf,
    /// Signals container from make-data
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path for the trained network
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DistillArgs {
    /// Score network checkpoint (the teacher)
    #[arg(long)]
    score: PathBuf,
    /// Measurement container from make-data
    #[arg(long)]
    measurements: PathBuf,
    /// Flat key=value config; distill.*, flow.* and schedule.* keys apply
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint path for the distilled flow
    #[arg(long)]
    out: PathBuf,
    /// Write the loss trace as CSV
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Flow,
    Dps,
    Uncond,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long, value_enum)]
    method: Method,
    /// Reverse-process steps (dps and uncond)
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// Guidance weight (dps)
    #[arg(long, default_value_t = 1e-3)]
    zeta: f64,
    /// Score checkpoint (dps and uncond)
    #[arg(long)]
    score: Option<PathBuf>,
    /// Flow checkpoint (flow)
    #[arg(long)]
    flow: Option<PathBuf>,
    /// Measurement container; required unless the method is uncond
    #[arg(long)]
    measurements: Option<PathBuf>,
    /// Which measurement of the container to condition on
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Number of samples to draw
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Flow conditioning: masked_signal or masked_signal_plus_mask
    #[arg(long, default_value = "masked_signal")]
    mode: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// flow or dps
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long)]
    flow: Option<PathBuf>,
    #[arg(long)]
    score: Option<PathBuf>,
    /// Evaluation container from make-data --with-truth
    #[arg(long)]
    eval: PathBuf,
    /// Per-item metrics CSV
    #[arg(long)]
    out: PathBuf,
    /// Posterior draws averaged per reconstruction
    #[arg(long, default_value_t = 128)]
    n_avg: usize,
    /// Peak signal value for PSNR/SSIM
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
    /// SSIM window width
    #[arg(long, default_value_t = 7)]
    window: usize,
    /// Treat signals as HxW images for SSIM, e.g. 8x8
    #[arg(long)]
    grid: Option<String>,
    /// Reverse-process steps (dps)
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// Guidance weight (dps)
    #[arg(long, default_value_t = 1e-3)]
    zeta: f64,
    /// Flow conditioning: masked_signal or masked_signal_plus_mask
    #[arg(long, default_value = "masked_signal")]
    mode: String,
    /// Directory for reconstruction/truth PGM images; needs --grid
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::MakeData(a) => make_data(a),
        Cmd::TrainScore(a) => train_score_cmd(a),
        Cmd::Distill(a) => distill_cmd(a),
        Cmd::Sample(a) => sample_cmd(a),
        Cmd::Evaluate(a) => evaluate_cmd(a),
        Cmd::OracleCheck => oracle_check(),
    }
}

fn empty_config() -> Config {
    Config::parse("").expect("empty config")
}

fn load_score(path: &Path) -> anyhow::Result<ScoreNetwork> {
    let c = Container::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ScoreNetwork::from_container(&c)?)
}

fn load_flow(path: &Path) -> anyhow::Result<ConditionalFlow> {
    let c = Container::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ConditionalFlow::from_container(&c)?)
}

fn make_data(a: MakeDataArgs) -> anyhow::Result<()> {
    let kind = ToyKind::parse(&a.kind)?;
    let seed = resolve_seed(a.seed, &empty_config())?;
    let mut rng = Rng::new(seed);
    let xs = gen_toy_dataset(kind, a.n, &mut rng);
    match a.op {
        None => {
            let mut c = Container::new();
            c.insert("signals", xs);
            c.save(&a.out)?;
            println!(
                "wrote {} signals of dim {} to {}",
                a.n,
                kind.dim(),
                a.out.display()
            );
        }
        Some(op) => {
            let spec = OpSpec::parse(&op)?;
            let sigma_y = a.sigma_y.expect("clap enforces sigma_y with op");
            if a.with_truth {
                let eval = EvalSet::synthesize(&xs, &spec, sigma_y, a.blind, &mut rng)?;
                eval.save(&a.out)?;
                println!(
                    "wrote {} measurements with ground truth to {}",
                    a.n,
                    a.out.display()
                );
            } else {
                let set = MeasurementSet::synthesize(&xs, &spec, sigma_y, a.blind, &mut rng)?;
                set.save(&a.out)?;
                println!("wrote {} measurements to {}", a.n, a.out.display());
            }
        }
    }
    Ok(())
}

fn train_score_cmd(a: TrainScoreArgs) -> anyhow::Result<()> {
    let cfg = Config::load(&a.config)?;
    let seed = resolve_seed(a.seed, &cfg)?;
    let sched = NoiseSchedule::from_config(&cfg)?;
    let tcfg = ScoreTrainConfig::from_config(&cfg)?;
    let data =
        Container::load(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let xs = data.require("signals")?;

    let mut rng = Rng::new(seed);
    let mut net = ScoreNetwork::new(xs.cols(), tcfg.hidden_layers, tcfg.hidden_width, &mut rng);
    let trace = train_score_net(&mut net, xs, &sched, &tcfg, &mut rng)?;
    for (step, loss) in &trace {
        println!("step {step} dsm {loss:.6}");
    }
    net.to_container().save(&a.out)?;
    println!(
        "trained score for {} steps on {} signals, saved to {}",
        tcfg.iters,
        xs.rows(),
        a.out.display()
    );
    Ok(())
}

fn distill_cmd(a: DistillArgs) -> anyhow::Result<()> {
    let cfg = Config::load(&a.config)?;
    let seed = resolve_seed(a.seed, &cfg)?;
    let sched = NoiseSchedule::from_config(&cfg)?;
    let teacher = load_score(&a.score)?.frozen();
    let set = MeasurementSet::load(&a.measurements)
        .with_context(|| format!("loading {}", a.measurements.display()))?;
    if set.is_empty() {
        bail!("empty measurement set {}", a.measurements.display());
    }

    let mut dcfg = DistillConfig::from_config(&cfg)?;
    // The set records the noise level it was synthesized with; an explicit
    // distill.sigma_y key still wins.
    dcfg.sigma_y = cfg.get_f64("distill.sigma_y", set.sigma_y)?;
    dcfg.validate()?;
    dcfg.checkpoint_path = Some(a.out.clone());
    if set.blind && dcfg.condition_mode == ConditionMode::MaskedSignalPlusMask {
        bail!("blind measurement set cannot condition on the mask");
    }

    let spec = FlowSpec::from_config(&cfg)?;
    let cond_dim = condition_dim(set.items[0].y.cols(), dcfg.condition_mode);
    let mut rng = Rng::new(seed);
    let mut flow = ConditionalFlow::new(set.signal_dim, cond_dim, spec, &mut rng);
    let trace = distill_train(&mut flow, &teacher, &set, &sched, &dcfg, &mut rng)?;

    let every = dcfg.log_every.max(1);
    for (i, (step, b)) in trace.iter().enumerate() {
        if step % every == 0 || i + 1 == trace.len() {
            println!(
                "step {step} total {:.6} fidelity {:.6} prior {:.6} entropy {:.6}",
                b.total, b.fidelity, b.prior, b.entropy
            );
        }
    }
    flow.to_container().save(&a.out)?;
    println!(
        "distilled flow over {} measurements for {} steps, saved to {}",
        set.len(),
        dcfg.iters,
        a.out.display()
    );
    if let Some(path) = a.trace {
        fs::write(&path, trace_to_csv(&trace, dcfg.log_every))?;
        println!("loss trace written to {}", path.display());
    }
    Ok(())
}

fn sample_cmd(a: SampleArgs) -> anyhow::Result<()> {
    let seed = resolve_seed(a.seed, &empty_config())?;
    let mut rng = Rng::new(seed);
    let sched = NoiseSchedule::default();
    let mut out = Container::new();

    let load_measurement = |path: &Option<PathBuf>| -> anyhow::Result<MeasurementSet> {
        let path = path
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("--measurements is required for this method"))?;
        let set = MeasurementSet::load(path)
            .with_context(|| format!("loading {}", path.display()))?;
        if a.index >= set.len() {
            bail!("measurement index {} out of range ({})", a.index, set.len());
        }
        Ok(set)
    };

    let samples = match a.method {
        Method::Flow => {
            let path = a
                .flow
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("--flow is required for method flow"))?;
            let flow = load_flow(path)?;
            let set = load_measurement(&a.measurements)?;
            let meas = &set.items[a.index];
            let mode = ConditionMode::parse(&a.mode)?;
            let cond = condition_vector(meas, mode)?;
            out.insert("y", meas.y.clone());
            flow.sample_posterior(&cond, a.n, &mut rng)?
        }
        Method::Dps => {
            let path = a
                .score
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("--score is required for method dps"))?;
            let teacher = load_score(path)?.frozen();
            let set = load_measurement(&a.measurements)?;
            let meas = &set.items[a.index];
            let op = meas
                .operator
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("guided sampling needs the forward operator; this measurement is blind"))?;
            let cfg = SamplerConfig {
                steps: a.steps,
                zeta: a.zeta,
                ..Default::default()
            };
            out.insert("y", meas.y.clone());
            dps_sample(&teacher, &sched, &meas.y, op, meas.sigma_y, &cfg, a.n, &mut rng)?
        }
        Method::Uncond => {
            let path = a
                .score
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("--score is required for method uncond"))?;
            let teacher = load_score(path)?.frozen();
            let cfg = SamplerConfig {
                steps: a.steps,
                zeta: 0.0,
                ..Default::default()
            };
            reverse_sde_sample(&teacher, &sched, &cfg, a.n, &mut rng)?
        }
    };

    let (n, d) = (samples.rows(), samples.cols());
    out.insert("samples", samples);
    out.save(&a.out)?;
    println!("wrote {n} samples of dim {d} to {}", a.out.display());
    Ok(())
}

fn parse_grid(s: &str, dim: usize) -> anyhow::Result<(usize, usize)> {
    let Some((h, w)) = s.split_once('x') else {
        bail!("grid {s:?}: expected HxW, e.g. 8x8");
    };
    let (h, w): (usize, usize) = (h.parse()?, w.parse()?);
    if h * w != dim {
        bail!("grid {h}x{w} does not tile signals of dim {dim}");
    }
    Ok((h, w))
}

fn evaluate_cmd(a: EvaluateArgs) -> anyhow::Result<()> {
    let seed = resolve_seed(a.seed, &empty_config())?;
    let mut rng = Rng::new(seed);
    let eval =
        EvalSet::load(&a.eval).with_context(|| format!("loading {}", a.eval.display()))?;
    let sched = NoiseSchedule::default();

    let grid = a
        .grid
        .as_deref()
        .map(|s| parse_grid(s, eval.set.signal_dim))
        .transpose()?;
    let layout = match grid {
        Some((h, w)) => SsimLayout::Grid {
            h,
            w,
            window: a.window,
        },
        None => SsimLayout::Flat { window: a.window },
    };

    // Keep whichever model the method needs alive for the borrow in `rec`.
    let flow;
    let teacher;
    let rec: Box<dyn Reconstructor> = match a.method {
        Method::Flow => {
            let path = a
                .flow
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("--flow is required for method flow"))?;
            flow = load_flow(path)?;
            Box::new(FlowReconstructor {
                flow: &flow,
                mode: ConditionMode::parse(&a.mode)?,
            })
        }
        Method::Dps => {
            let path = a
                .score
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("--score is required for method dps"))?;
            teacher = load_score(path)?.frozen();
            Box::new(DpsReconstructor {
                score: &teacher,
                sched: &sched,
                cfg: SamplerConfig {
                    steps: a.steps,
                    zeta: a.zeta,
                    ..Default::default()
                },
            })
        }
        Method::Uncond => bail!("evaluate supports methods flow and dps"),
    };

    let report = evaluate(rec.as_ref(), &eval, a.n_avg, a.peak, layout, &mut rng)?;
    report_csv(&report, &a.out)?;
    println!(
        "{} items: mean psnr {:.3} dB, mean ssim {:.4}, mean mse {:.6}, median wall {:.3e} s, nfe {}",
        report.rows.len(),
        report.mean_psnr,
        report.mean_ssim,
        report.mean_mse,
        report.median_wall_time,
        report.nfe
    );

    if let Some(dir) = a.images {
        let Some((h, w)) = grid else {
            bail!("--images needs --grid to lay signals out as pixels");
        };
        fs::create_dir_all(&dir)?;
        for (i, meas) in eval.set.items.iter().enumerate() {
            let recon = rec.reconstruct(meas, a.n_avg, &mut rng)?;
            emit_pgm(recon.data(), w, h, &dir.join(format!("recon_{i:03}.pgm")))?;
            emit_pgm(
                eval.truths[i].data(),
                w,
                h,
                &dir.join(format!("truth_{i:03}.pgm")),
            )?;
        }
        println!("wrote {} image pairs to {}", eval.set.items.len(), dir.display());
    }
    Ok(())
}

/// Each check compares a live computation against an independent reference
/// (closed form or finite differences) and fails loudly on drift.
fn oracle_check() -> anyhow::Result<()> {
    let mut passed = 0usize;
    let mut check = |name: &str, err: f64, tol: f64| -> anyhow::Result<()> {
        if !(err.is_finite() && err < tol) {
            bail!("oracle {name}: error {err:.3e} exceeds {tol:.1e}");
        }
        println!("{name}: ok (err {err:.3e} < {tol:.1e})");
        passed += 1;
        Ok(())
    };

    // Noise schedule against hand-evaluated constants of the default rates.
    let sched = NoiseSchedule::default();
    let (alpha_t, sigma_t) = sched.alpha_sigma(sched.t_max)?;
    let (_, sigma_eps) = sched.alpha_sigma(sched.eps_min)?;
    let sched_err = (sched.rate_integral(sched.t_max) - 10.05)
        .abs()
        .max((alpha_t - 6.571586494929613e-3).abs())
        .max((sigma_t - 0.9999784068923386).abs())
        .max((sigma_eps - 1.0485416335095232e-2).abs());
    check("schedule constants", sched_err, 1e-12)?;

    // Reverse-mode gradients against central differences on a composite map.
    let mut rng = Rng::new(7);
    let x = Tensor::var(3, 4, Tensor::randn(3, 4, &mut rng).to_vec());
    let w = Tensor::randn(4, 2, &mut rng);
    let m = Tensor::randn(3, 2, &mut rng);
    let loss = x.matmul(&w).tanh().mul(&m).square().sum();
    let grads = loss.backward()?;
    let got = grads.wrt(&x).expect("x participates");
    let want = finite_diff_gradient(
        |v| v.matmul(&w).tanh().mul(&m).square().sum().item(),
        &x,
        1e-5,
    );
    let mut grad_err = 0.0f64;
    for (g, f) in got.iter().zip(want.data()) {
        let rel = (g - f).abs() / g.abs().max(f.abs()).max(1.0);
        grad_err = grad_err.max(rel);
    }
    check("autodiff vs finite differences", grad_err, 1e-6)?;

    // Flow invertibility and its log-determinant on a jiggled 2D flow.
    let mut rng = Rng::new(8);
    let mut flow = ConditionalFlow::new(
        2,
        1,
        FlowSpec {
            steps: 2,
            hidden_layers: 1,
            hidden_width: 8,
        },
        &mut rng,
    );
    let names: Vec<String> = flow.params().names().map(String::from).collect();
    for name in names {
        let t = flow.params().get(&name).detach();
        let noise = Tensor::randn(t.rows(), t.cols(), &mut rng).scale(0.1);
        flow.params_mut().insert(&name, t.add(&noise));
    }
    let z = Tensor::randn(64, 2, &mut rng);
    let y = Tensor::randn(64, 1, &mut rng);
    let (x, logdet) = flow.forward(&z, &y)?;
    let (z_back, _) = flow.inverse(&x, &y)?;
    let round_trip = z
        .data()
        .iter()
        .zip(z_back.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    check("flow round trip", round_trip, 1e-8)?;

    // 2x2 numeric Jacobian of the first row.
    let y0 = Tensor::constant(1, 1, y.data()[..1].to_vec());
    let z0 = z.data()[..2].to_vec();
    let h = 1e-6;
    let mut jac = [0.0f64; 4];
    for j in 0..2 {
        let mut lo = z0.clone();
        let mut hi = z0.clone();
        lo[j] -= h;
        hi[j] += h;
        let (xl, _) = flow.forward(&Tensor::constant(1, 2, lo), &y0)?;
        let (xh, _) = flow.forward(&Tensor::constant(1, 2, hi), &y0)?;
        for i in 0..2 {
            jac[2 * i + j] = (xh.data()[i] - xl.data()[i]) / (2.0 * h);
        }
    }
    let det = jac[0] * jac[3] - jac[1] * jac[2];
    let logdet_err = (logdet.data()[0] - det.abs().ln()).abs();
    check("flow log-determinant", logdet_err, 1e-5)?;

    // Conjugate 1D posterior: N(0,1) prior, identity operator, sigma_y 1,
    // y 2 gives N(1, 1/2) exactly.
    let post = conjugate_posterior(&[0.0], &[1.0], &ForwardOperator::identity(1), 1.0, &[2.0])?;
    let conj_err = (post.mean[0] - 1.0).abs().max((post.cov[0] - 0.5).abs());
    check("conjugate posterior", conj_err, 1e-12)?;

    // PSNR arithmetic: mse 0.01 at peak 1 is exactly 20 dB.
    let x = Tensor::constant(1, 4, vec![0.1; 4]);
    let reference = Tensor::constant(1, 4, vec![0.0; 4]);
    let psnr_err = (psnr(&x, &reference, 1.0)? - 20.0).abs();
    check("psnr arithmetic", psnr_err, 1e-12)?;

    // Probability-flow likelihood of a centered Gaussian against its density.
    let teacher = AnalyticCovGaussianScore::new(vec![0.0], vec![1.44])?;
    let x0 = Tensor::constant(1, 1, vec![0.5]);
    let got = pf_ode_loglik(&teacher, &sched, &x0, 1e-8)?;
    check("probability-flow log-likelihood", (got - -1.188065645554183).abs(), 1e-3)?;

    println!("all {passed} oracle checks passed");
    Ok(())
}
