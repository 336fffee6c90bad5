//! `softarm`: collect datasets, train the angle network, run closed-loop
//! experiments and inspect artifacts.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 IO or file
//! format error, 4 non-finite training loss, 5 closed-loop divergence.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use softarm::config::RunConfig;
use softarm::dataset::{self, Dataset};
use softarm::net::{self, EpochStats, Network, NetworkSpec, TrainingSet};
use softarm::pipeline::{self, CameraEstimator, CollectionPlan, FeedbackSource, RunLog, RunSummary};
use softarm::Error;

#[derive(Parser)]
#[command(name = "softarm", version, about = "Vision-based proprioception and control of a simulated soft arm")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record a labelled camera dataset along a grid of setpoints.
    Collect(CollectArgs),
    /// Train the angle network on a dataset.
    Train(TrainArgs),
    /// Report model accuracy on a labelled dataset.
    Evaluate(EvaluateArgs),
    /// Run a closed-loop experiment.
    Run(RunArgs),
    /// Run a scenario on ground truth and export the plant state log.
    Simulate(SimulateArgs),
    /// Print model or dataset header information.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration file; built-in defaults if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CollectArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Session length; picks the largest square grid that fits.
    #[arg(long, conflicts_with = "grid")]
    minutes: Option<f64>,
    /// Grid size as ROWSxCOLS.
    #[arg(long)]
    grid: Option<String>,
    /// Hold time per setpoint, s.
    #[arg(long)]
    dwell: Option<f64>,
    /// Use the validation plan (offset grid, own seed).
    #[arg(long)]
    validation: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    /// Held-out set; without it the training set is split by `train.fraction`.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Per-epoch loss CSV; defaults to the model path with a `.loss.csv` suffix.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Feedback {
    Truth,
    Cnn,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    Steps,
    Sine,
}

impl Scenario {
    fn name(self) -> &'static str {
        match self {
            Scenario::Steps => "steps",
            Scenario::Sine => "sine",
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum)]
    feedback: Feedback,
    #[arg(long, value_enum)]
    scenario: Scenario,
    /// Output directory for `log.csv` and `summary.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_enum, default_value = "steps")]
    scenario: Scenario,
    /// CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct InspectArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Degenerate(_) => 2,
        Error::Io(_) | Error::Format { .. } | Error::Dimension { .. } | Error::EmptyDataset => 3,
        Error::NonFiniteLoss { .. } => 4,
        Error::Divergence { .. } => 5,
    }
}

fn load_config(arg: &ConfigArg) -> softarm::Result<RunConfig> {
    match &arg.config {
        Some(p) => RunConfig::load(p),
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply_env()?;
            Ok(cfg)
        }
    }
}

fn parse_grid(s: &str) -> softarm::Result<(usize, usize)> {
    let bad = || Error::Config(format!("bad grid spec {s:?}, expected ROWSxCOLS such as 7x7"));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let rows: usize = r.trim().parse().map_err(|_| bad())?;
    let cols: usize = c.trim().parse().map_err(|_| bad())?;
    if rows == 0 || cols == 0 {
        return Err(bad());
    }
    Ok((rows, cols))
}

fn create_parent(path: &Path) -> softarm::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn collect(args: CollectArgs) -> softarm::Result<()> {
    let cfg = load_config(&args.config)?;
    let mut plan: CollectionPlan = if args.validation {
        cfg.validation.clone()
    } else {
        cfg.collect.clone()
    };
    if let Some(d) = args.dwell {
        plan.dwell = d;
    }
    if let Some(g) = &args.grid {
        (plan.rows, plan.cols) = parse_grid(g)?;
    }
    if let Some(m) = args.minutes {
        if !(m > 0.0) || !(plan.dwell > 0.0) {
            return Err(Error::Config(format!("--minutes must be positive, got {m}")));
        }
        let side = ((m * 60.0 / plan.dwell).sqrt().round() as usize).max(1);
        plan.rows = side;
        plan.cols = side;
    }
    plan.validate()?;
    let name = if args.validation { "val.sasd" } else { "train.sasd" };
    let out = args.out.unwrap_or_else(|| cfg.out_dir.join(name));
    create_parent(&out)?;
    let n = pipeline::record(&out, &plan, &cfg.sim())?;
    println!(
        "samples={n} duration_s={} grid={}x{} path={}",
        plan.duration(),
        plan.rows,
        plan.cols,
        out.display()
    );
    Ok(())
}

fn loss_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,train_loss_deg2,val_loss_deg2\n");
    for e in history {
        let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{}", e.epoch, e.train_loss, val);
    }
    s
}

fn train(args: TrainArgs) -> softarm::Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    cfg.train.validate()?;
    let data = Dataset::load(&args.data)?;
    let held_out = args.val.as_ref().map(Dataset::load).transpose()?;
    let (train_set, val_set): (Box<dyn TrainingSet + '_>, Option<Box<dyn TrainingSet + '_>>) =
        match (&held_out, cfg.train_fraction < 1.0) {
            (Some(v), _) => (Box::new(data.all()), Some(Box::new(v.all()))),
            (None, true) => {
                let (t, v) = dataset::split(&data, cfg.train_fraction, cfg.train.shuffle_seed)?;
                (Box::new(t), Some(Box::new(v)))
            }
            (None, false) => (Box::new(data.all()), None),
        };
    let mut net = Network::new(NetworkSpec::default(), cfg.init_seed())?;
    let report = net::train(&mut net, train_set.as_ref(), val_set.as_deref(), &cfg.train, |s| {
        let val = s.val_loss.map_or(String::from("-"), |v| format!("{:.4}", v.sqrt()));
        eprintln!("epoch {:>3}  train_rmse {:.4}  val_rmse {val}", s.epoch, s.train_loss.sqrt());
    })?;
    let out = args.out.unwrap_or_else(|| cfg.out_dir.join("model.sann"));
    create_parent(&out)?;
    net::save(&net, &out)?;
    let csv = args
        .loss_csv
        .unwrap_or_else(|| out.with_extension("loss.csv"));
    create_parent(&csv)?;
    std::fs::write(&csv, loss_csv(&report.history))?;
    let rmse = match &val_set {
        Some(v) => pipeline::evaluate(&net, v.as_ref())?.rmse,
        None => pipeline::evaluate(&net, train_set.as_ref())?.rmse,
    };
    println!(
        "rmse_alpha_deg={:.4} rmse_beta_deg={:.4} rmse_combined_deg={:.4} on={} model={} loss_csv={}",
        rmse.alpha,
        rmse.beta,
        rmse.combined,
        if val_set.is_some() { "validation" } else { "train" },
        out.display(),
        csv.display()
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> softarm::Result<()> {
    let net = net::load(&args.model)?;
    let data = Dataset::load(&args.data)?;
    let ev = pipeline::evaluate(&net, &data)?;
    println!(
        "samples={} rmse_alpha_deg={:.4} rmse_beta_deg={:.4} rmse_combined_deg={:.4}",
        data.len(),
        ev.rmse.alpha,
        ev.rmse.beta,
        ev.rmse.combined
    );
    println!("residual histogram (deg, both axes):");
    for (i, n) in ev.histogram.iter().enumerate() {
        let lo = ev.hist_min + i as f64 * ev.hist_bin;
        println!("  [{lo:>5.1}, {:>5.1})  {n}", lo + ev.hist_bin);
    }
    Ok(())
}

fn run_scenario(
    cfg: &RunConfig,
    scenario: Scenario,
    source: FeedbackSource,
    model: Option<&Network>,
) -> softarm::Result<(RunLog, String)> {
    let sim = cfg.sim();
    let mut estimator = model.map(|n| CameraEstimator::new(n, sim.plant, sim.cameras, sim.noise));
    let est = estimator.as_mut().map(|e| e as &mut dyn pipeline::AngleEstimator);
    let mut table = String::new();
    let log = match scenario {
        Scenario::Sine => {
            let s = &cfg.sine;
            let r = pipeline::run_sine_tracking(s.amplitude, s.period, s.duration, source, est, &sim)?;
            let _ = writeln!(table, "          alpha     beta  combined");
            let _ = writeln!(
                table,
                "predict {:>7.4}  {:>7.4}  {:>7.4}",
                r.prediction.alpha, r.prediction.beta, r.prediction.combined
            );
            let _ = writeln!(
                table,
                "track   {:>7.4}  {:>7.4}  {:>7.4}",
                r.tracking.alpha, r.tracking.beta, r.tracking.combined
            );
            r.log
        }
        Scenario::Steps => {
            let r = pipeline::run_steps_ramps(source, est, &sim)?;
            let _ = writeln!(table, "          alpha     beta  combined");
            for (i, p) in r.repetitions.iter().enumerate() {
                let _ = writeln!(table, "rep {}   {:>7.4}  {:>7.4}  {:>7.4}", i + 1, p.alpha, p.beta, p.combined);
            }
            let _ = writeln!(
                table,
                "track   {:>7.4}  {:>7.4}  {:>7.4}",
                r.tracking.alpha, r.tracking.beta, r.tracking.combined
            );
            let _ = writeln!(table, "repetition deviation {:.4} deg", r.repetition_deviation);
            r.log
        }
    };
    Ok((log, table))
}

fn run(args: RunArgs) -> softarm::Result<()> {
    let cfg = load_config(&args.config)?;
    let source = match args.feedback {
        Feedback::Truth => FeedbackSource::GroundTruth,
        Feedback::Cnn => FeedbackSource::Cnn,
    };
    let model = match (&args.model, source) {
        (Some(p), _) => Some(net::load(p)?),
        (None, FeedbackSource::Cnn) => {
            return Err(Error::Config("--feedback cnn requires --model".into()));
        }
        (None, FeedbackSource::GroundTruth) => None,
    };
    let feedback_name = match source {
        FeedbackSource::GroundTruth => "truth",
        FeedbackSource::Cnn => "cnn",
    };
    let out = args
        .out
        .unwrap_or_else(|| cfg.out_dir.join(format!("run-{}-{feedback_name}", args.scenario.name())));
    let (log, table) = run_scenario(&cfg, args.scenario, source, model.as_ref())?;
    std::fs::create_dir_all(&out)?;
    dataset::export_csv(&log.rows, out.join("log.csv"))?;
    let summary = RunSummary::from_log(&log);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(out.join("summary.json"), format!("{json}\n"))?;
    print!("{table}");
    println!("{json}");
    Ok(())
}

fn simulate(args: SimulateArgs) -> softarm::Result<()> {
    let cfg = load_config(&args.config)?;
    let (log, _) = run_scenario(&cfg, args.scenario, FeedbackSource::GroundTruth, None)?;
    create_parent(&args.out)?;
    dataset::export_csv(&log.rows, &args.out)?;
    println!("rows={} ticks={} path={}", log.rows.len(), log.ticks.physics, args.out.display());
    Ok(())
}

fn inspect(args: InspectArgs) -> softarm::Result<()> {
    if let Some(p) = args.model {
        let net = net::load(&p)?;
        println!("{} parameters", net.param_count());
        for (shape, n) in net.layers().iter().zip(net.layer_param_counts()) {
            println!("  {shape:?}  params={n}");
        }
        let maps: Vec<String> = net
            .spec()
            .feature_maps()
            .iter()
            .map(|(c, h, w)| format!("{c}x{h}x{w}"))
            .collect();
        println!("feature maps {}", maps.join(", "));
    }
    if let Some(p) = args.data {
        let data = Dataset::load(&p)?;
        let h = &data.header;
        println!("samples={}", h.count);
        println!("shape={}x{}x{}", h.channels, h.height, h.width);
        println!("seed={}", h.seed);
        println!("metadata={}", h.metadata);
        if !data.is_empty() {
            println!(
                "time_span_s={}..{}",
                data.timestamp(0),
                data.timestamp(data.len() - 1)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Collect(a) => collect(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Run(a) => run(a),
        Command::Simulate(a) => simulate(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
