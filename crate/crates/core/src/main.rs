use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use layervid::compositor::render_frame_full;
use layervid::metrics::{evaluate_frames, MetricReport};
use layervid::motion::{consistency_residuals, sample_grid, stability_warning, ConsistencyResiduals, IntegratorConfig};
use layervid::networks::{estimate_lipschitz, FrameNetConfig, VelocityNetConfig};
use layervid::trainer::{load_model, normalize_clip, save_model, RegimeOverrides, TrainConfig, Trainer};
use layervid::video_io::{
    format_pattern, generate_scene, load_sequence, write_gray, write_png, write_sequence, SceneKind, SyntheticScene,
    DEFAULT_PATTERN, MANIFEST_NAME,
};
use layervid::Error;

/// Layered neural video representation: fit a clip, then render it at any time.
#[derive(Parser, Debug)]
#[command(name = "layervid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene with training frames, held-out midpoints and masks.
    Synth(SynthArgs),
    /// Fit a layered model to a frame sequence.
    Train(TrainArgs),
    /// Render frames at new timestamps from a trained model.
    Interpolate(InterpolateArgs),
    /// Score predicted frames against ground truth.
    Eval(EvalArgs),
    /// Check forward/backward consistency of a model's motion fields.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Scene name: linear_square, two_movers or camouflage.
    #[arg(long)]
    scene: String,
    /// Number of training frames.
    #[arg(long, default_value_t = 9)]
    frames: usize,
    /// Frame size as WIDTHxHEIGHT.
    #[arg(long, default_value = "64x64")]
    size: String,
    /// Texture seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Frame manifest to fit.
    #[arg(long)]
    frames: PathBuf,
    /// Checkpoint path, rewritten after every epoch.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines log path [default: <out>.log.jsonl]
    #[arg(long)]
    log: Option<PathBuf>,
    /// Number of video layers.
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Passes over every (pixel, frame) pair.
    #[arg(long, default_value_t = 400)]
    epochs: u64,
    /// Pixels per optimizer step.
    #[arg(long, default_value_t = 4096)]
    batch: usize,
    /// SoftMin blending sharpness.
    #[arg(long, default_value_t = 5.0)]
    gamma: f64,
    /// Seed for initialization and sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Euler step [default: 0.02, or 0.2 for two frames]
    #[arg(long)]
    dt: Option<f64>,
    /// Velocity regularization weight [default: 0.01, or 10 for two frames]
    #[arg(long)]
    lambda_v: Option<f64>,
    /// Inertia weight [default: 0.01, or 10 for two frames]
    #[arg(long)]
    lambda_i: Option<f64>,
    /// Laplacian share of the velocity regularizer [default: 0, or 0.5 for two frames]
    #[arg(long)]
    alpha: Option<f64>,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Hidden width of the frame network.
    #[arg(long, default_value_t = 128)]
    frame_width: usize,
    /// Shared sinusoidal layers of the frame network.
    #[arg(long, default_value_t = 3)]
    trunk_layers: usize,
    /// Per-layer sinusoidal layers of the frame network.
    #[arg(long, default_value_t = 2)]
    head_layers: usize,
    /// First-layer frequency of the frame network.
    #[arg(long, default_value_t = 30.0)]
    omega0: f64,
    /// Hidden width of each velocity network.
    #[arg(long, default_value_t = 64)]
    velocity_width: usize,
    /// Hidden layers of each velocity network.
    #[arg(long, default_value_t = 4)]
    velocity_layers: usize,
    /// Log every N optimizer steps.
    #[arg(long, default_value_t = 1)]
    log_every: u64,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("when").required(true).args(["times", "factor"]))]
struct InterpolateArgs {
    /// Trained checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated timestamps in the clip's original units.
    #[arg(long)]
    times: Option<String>,
    /// Insert K-1 evenly spaced frames between each pair of input frames.
    #[arg(long)]
    factor: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write each layer's weighted colour and visibility map.
    #[arg(long, default_value_t = false)]
    layer_views: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predicted frames: a manifest, or a directory holding manifest.json.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth manifest.
    #[arg(long)]
    gt: PathBuf,
    /// Where to write the JSON report.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Trained checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Also report residuals at dt/2.
    #[arg(long, default_value_t = false)]
    dt_sweep: bool,
    /// Where to write the JSON report.
    #[arg(long)]
    report: PathBuf,
}

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_VERIFY: u8 = 3;

/// A failed command and the exit code it maps to.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
    Verify(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(msg.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Interpolate(a) => interpolate(a),
        Command::Eval(a) => eval(a),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {}", m);
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(Failure::Verify(m)) => {
            eprintln!("verification failed: {}", m);
            ExitCode::from(EXIT_VERIFY)
        }
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || usage(format!("--size must look like 64x64, got `{}`", s));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let (w, h) = (w.trim().parse::<usize>().map_err(|_| bad())?, h.trim().parse::<usize>().map_err(|_| bad())?);
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

fn synth(a: SynthArgs) -> CmdResult {
    let kind: SceneKind = a.scene.parse().map_err(usage)?;
    let size = parse_size(&a.size)?;
    if a.frames < 2 {
        return Err(usage(format!("--frames must be at least 2, got {}", a.frames)));
    }
    let scene = SyntheticScene::new(kind, size, a.seed);
    let generated = generate_scene(&scene, a.frames, size).map_err(usage)?;
    let (train, held) = generated.write(&a.out).context("writing scene")?;
    println!("training manifest: {}", train.display());
    println!("held-out manifest: {}", held.display());
    Ok(())
}

fn train(a: TrainArgs) -> CmdResult {
    let (frames, times) = load_sequence(&a.frames).context("loading frames")?;
    let clip = normalize_clip(frames, &times).map_err(usage)?;
    let mut config = TrainConfig::for_frames(clip.num_frames()).with_overrides(RegimeOverrides {
        dt: a.dt,
        lambda_v: a.lambda_v,
        lambda_i: a.lambda_i,
        alpha: a.alpha,
    });
    config.num_layers = a.layers;
    config.epochs = a.epochs;
    config.batch_size = a.batch;
    config.gamma = a.gamma;
    config.seed = a.seed;
    config.log_every = a.log_every;
    config.adam.lr = a.lr;
    config.frame = FrameNetConfig {
        width: a.frame_width,
        trunk_layers: a.trunk_layers,
        head_layers: a.head_layers,
        omega0: a.omega0,
        ..config.frame
    };
    config.velocity = VelocityNetConfig { width: a.velocity_width, hidden_layers: a.velocity_layers, ..config.velocity };
    config.validate().map_err(usage)?;

    let mut trainer = Trainer::new(&clip, config).context("building model")?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        p.into()
    });
    let file = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut log = BufWriter::new(file);
    let header = trainer.header();
    log::info!(
        "regime {:?}: dt {} lambda_v {} lambda_i {} alpha {}",
        header.regime,
        header.dt,
        header.lambda_v,
        header.lambda_i,
        header.alpha
    );
    writeln!(log, "{}", serde_json::to_string(&header).context("encoding log header")?).context("writing log")?;
    // An initial checkpoint means a divergence in the first epoch still
    // leaves something to inspect.
    save_model(&a.out, &trainer.checkpoint()).context("saving checkpoint")?;

    while trainer.epoch < trainer.config.epochs {
        let mut sink = |r: &layervid::trainer::LogRecord| -> layervid::Result<()> {
            let line = serde_json::to_string(r)?;
            writeln!(log, "{}", line).map_err(|e| Error::io(&log_path, e))
        };
        match trainer.run_epoch(&clip, &mut sink) {
            Ok(loss) => log::info!("epoch {}/{} loss {:.6}", trainer.epoch, trainer.config.epochs, loss),
            Err(e @ Error::Diverged { .. }) => {
                log.flush().ok();
                return Err(Failure::Runtime(anyhow::Error::new(e).context(format!(
                    "training aborted; last good checkpoint kept at {}",
                    a.out.display()
                ))));
            }
            Err(e) => return Err(anyhow::Error::new(e).context("training").into()),
        }
        log.flush().context("writing log")?;
        save_model(&a.out, &trainer.checkpoint()).context("saving checkpoint")?;
    }
    println!("model: {}", a.out.display());
    println!("log: {}", log_path.display());
    Ok(())
}

fn parse_times(s: &str) -> Result<Vec<f64>, Failure> {
    let mut times = s
        .split(',')
        .map(|p| {
            let p = p.trim();
            p.parse::<f64>().ok().filter(|t| t.is_finite()).ok_or_else(|| usage(format!("`{}` is not a timestamp", p)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    times.sort_by(f64::total_cmp);
    times.dedup();
    Ok(times)
}

/// `k − 1` evenly spaced times strictly inside each consecutive pair.
fn factor_times(frame_times: &[f64], k: usize) -> Vec<f64> {
    frame_times
        .windows(2)
        .flat_map(|w| (1..k).map(move |j| w[0] + (w[1] - w[0]) * j as f64 / k as f64))
        .collect()
}

fn interpolate(a: InterpolateArgs) -> CmdResult {
    let model = load_model(&a.model).context("loading model")?.model;
    let meta = &model.meta;
    let times = match (&a.times, a.factor) {
        (Some(s), _) => parse_times(s)?,
        (None, Some(k)) if k >= 2 => factor_times(&meta.frame_times, k),
        (None, Some(k)) => return Err(usage(format!("--factor must be at least 2, got {}", k))),
        (None, None) => unreachable!("clap requires one of --times or --factor"),
    };
    if let Some(t) = times.iter().find(|&&t| !meta.contains_time(t)) {
        return Err(usage(format!(
            "time {} lies outside the clip's span [{}, {}]",
            t, meta.time_min, meta.time_max
        )));
    }
    let grid = meta.grid();
    let mut frames = Vec::with_capacity(times.len());
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (i, &t) in times.iter().enumerate() {
        let tn = meta.normalize_time(t).clamp(-1.0, 1.0);
        let r = render_frame_full(&model, tn, &grid).context("rendering")?;
        if a.layer_views {
            for (l, (view, vis)) in r.layer_views.iter().zip(&r.visibility).enumerate() {
                let name = format_pattern(&format!("layer{}_%05d.png", l), i).context("naming output")?;
                write_png(a.out.join(name), view)?;
                let name = format_pattern(&format!("visibility{}_%05d.png", l), i).context("naming output")?;
                write_gray(a.out.join(name), grid.width, grid.height, vis)?;
            }
        }
        frames.push(r.image);
    }
    let manifest = write_sequence(&frames, &times, &a.out, DEFAULT_PATTERN).context("writing frames")?;
    println!("{} frames, manifest: {}", frames.len(), manifest.display());
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let pred_path = if a.pred.is_dir() { a.pred.join(MANIFEST_NAME) } else { a.pred.clone() };
    let (gt, gt_times) = load_sequence(&a.gt).map_err(usage)?;
    let (pred, pred_times) = load_sequence(&pred_path).map_err(usage)?;
    if pred.len() != gt.len() {
        return Err(usage(format!("{} predicted frames but {} ground-truth frames", pred.len(), gt.len())));
    }
    if pred[0].width != gt[0].width || pred[0].height != gt[0].height {
        return Err(usage(format!(
            "predicted frames are {}x{}, ground truth is {}x{}",
            pred[0].width, pred[0].height, gt[0].width, gt[0].height
        )));
    }
    for (i, (p, g)) in pred_times.iter().zip(&gt_times).enumerate() {
        if (p - g).abs() > 1e-9 * g.abs().max(1.0) {
            return Err(usage(format!("frame {}: predicted time {} does not match ground-truth time {}", i, p, g)));
        }
    }
    let report =
        evaluate_frames(&pred, &gt, &gt_times, &pred_path.display().to_string(), &a.gt.display().to_string())
            .map_err(usage)?;
    report.write(&a.report).context("writing report")?;
    print_table(&report);
    Ok(())
}

fn fmt_psnr(p: Option<f64>) -> String {
    p.map_or_else(|| "inf".to_string(), |v| format!("{:.3}", v))
}

fn print_table(r: &MetricReport) {
    println!("{:>12} {:>10} {:>10} {:>8}", "time", "AIE", "PSNR", "SSIM");
    for f in &r.per_frame {
        println!("{:>12} {:>10.4} {:>10} {:>8.4}", f.time, f.aie, fmt_psnr(f.psnr), f.ssim);
    }
    let a = &r.aggregate;
    println!("{:>12} {:>10.4} {:>10} {:>8.4}", "mean", a.aie, fmt_psnr(a.psnr), a.ssim);
}

const VERIFY_GRID: usize = 16;
const VERIFY_TIMES: (f64, f64, f64) = (-1.0, 0.0, 1.0);
const BACKWARD_TOLERANCE: f64 = 1e-2;
const LIPSCHITZ_SAMPLES: usize = 256;

#[derive(Serialize)]
struct LayerVerification {
    layer: usize,
    residuals: ConsistencyResiduals,
    lipschitz: f64,
    dt_times_lipschitz: f64,
    warning: Option<String>,
    /// Residuals at dt/2, with `--dt-sweep`.
    half_step: Option<ConsistencyResiduals>,
}

#[derive(Serialize)]
struct VerifyReport {
    model: String,
    dt: f64,
    grid: usize,
    times: [f64; 3],
    backward_tolerance: f64,
    layers: Vec<LayerVerification>,
    max_forward: f64,
    max_backward: f64,
    passed: bool,
}

fn verify(a: VerifyArgs) -> CmdResult {
    let model = load_model(&a.model).context("loading model")?.model;
    let samples = sample_grid(VERIFY_GRID);
    let (t0, t1, t2) = VERIFY_TIMES;
    let dt = model.integrator.dt;
    let half = IntegratorConfig::new(dt / 2.0).context("half step")?;
    let mut layers = Vec::new();
    for (l, net) in model.velocity_nets.iter().enumerate() {
        let residuals = consistency_residuals(net, &model.params, &samples, t0, t1, t2, &model.integrator)
            .with_context(|| format!("layer {}", l))?;
        let lipschitz = estimate_lipschitz(net, &model.params, LIPSCHITZ_SAMPLES)?;
        let warning = stability_warning(dt, lipschitz);
        if let Some(w) = &warning {
            log::warn!("layer {}: {}", l, w);
        }
        let half_step = if a.dt_sweep {
            Some(consistency_residuals(net, &model.params, &samples, t0, t1, t2, &half).with_context(|| format!("layer {}", l))?)
        } else {
            None
        };
        layers.push(LayerVerification { layer: l, residuals, lipschitz, dt_times_lipschitz: dt * lipschitz, warning, half_step });
    }
    let max_forward = layers.iter().map(|l| l.residuals.forward).fold(0.0, f64::max);
    let max_backward = layers.iter().map(|l| l.residuals.backward).fold(0.0, f64::max);
    let report = VerifyReport {
        model: a.model.display().to_string(),
        dt,
        grid: VERIFY_GRID,
        times: [t0, t1, t2],
        backward_tolerance: BACKWARD_TOLERANCE,
        passed: max_backward <= BACKWARD_TOLERANCE,
        layers,
        max_forward,
        max_backward,
    };
    write_json(&a.report, &report)?;
    println!("{:>5} {:>12} {:>12} {:>10} {:>8}", "layer", "forward", "backward", "L", "dt*L");
    for l in &report.layers {
        println!(
            "{:>5} {:>12.3e} {:>12.3e} {:>10.4} {:>8.4}",
            l.layer, l.residuals.forward, l.residuals.backward, l.lipschitz, l.dt_times_lipschitz
        );
        if let Some(h) = &l.half_step {
            println!("{:>5} {:>12.3e} {:>12.3e}   (dt/2)", "", h.forward, h.backward);
        }
    }
    if !report.passed {
        return Err(Failure::Verify(format!(
            "backward residual {:.3e} exceeds {:.0e}",
            report.max_backward, BACKWARD_TOLERANCE
        )));
    }
    println!("ok: backward residual {:.3e} <= {:.0e}", report.max_backward, BACKWARD_TOLERANCE);
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let text = serde_json::to_string_pretty(value).context("encoding report")? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
