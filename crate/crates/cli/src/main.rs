mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use prunecam::calib::HeadKind;
use prunecam::run::{self, RunConfig};
use prunecam::Error;

/// Train, prune, explain, ROAD-score and calibrate a residual CNN on
/// bowel-cleansing images (or their synthetic stand-in).
#[derive(Parser, Debug)]
#[command(name = "prunecam", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides PRUNECAM_OUT and the config).
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides PRUNECAM_SEED and the config).
    #[arg(short, long, global = true)]
    seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic training and external sets.
    SynthData,
    /// Stratified k-fold training (pruning step 0).
    Train,
    /// Iterative L1 channel pruning with fine-tuning.
    Prune {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Attribution maps for a per-class image sample.
    Explain(ExplainArgs),
    /// ROAD scores for the stored attribution maps.
    RoadEval(RoadArgs),
    /// Fit and evaluate a temperature head on the external set.
    Calibrate(CalibArgs),
    /// Table and chart files from the stage outputs.
    Report,
    /// Every stage in order.
    Run,
    /// Print the default configuration as TOML.
    DefaultConfig,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    /// Comma-separated CAM methods.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    per_class: Option<usize>,
    /// Hook unit such as `layer4.1`.
    #[arg(long)]
    target: Option<String>,
    /// Comma-separated pruning steps.
    #[arg(long, value_delimiter = ',')]
    steps: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
struct RoadArgs {
    /// Comma-separated removal percentages.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    steps: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
struct CalibArgs {
    /// global, hnlts or mlp.
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    val_frac: Option<f64>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    step: Option<usize>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg: RunConfig = config::load(cli.config.as_deref())?;
    config::apply_overrides(&mut cfg, cli.seed, cli.out)?;
    let written = match cli.command {
        Command::DefaultConfig => {
            print!("{}", config::render_default()?);
            return Ok(());
        }
        Command::SynthData => run::synth_data(&cfg)?,
        Command::Train => run::train(&cfg)?,
        Command::Prune { steps, fraction } => {
            set(&mut cfg.prune.num_steps, steps);
            set(&mut cfg.prune.fraction, fraction);
            run::prune(&cfg)?
        }
        Command::Explain(a) => {
            set(&mut cfg.road.methods, a.methods);
            set(&mut cfg.road.per_class, a.per_class);
            set(&mut cfg.road.steps, a.steps);
            if a.target.is_some() {
                cfg.road.target = a.target;
            }
            run::explain(&cfg)?
        }
        Command::RoadEval(a) => {
            set(&mut cfg.road.thresholds, a.thresholds);
            set(&mut cfg.road.sigma, a.sigma);
            set(&mut cfg.road.methods, a.methods);
            set(&mut cfg.road.per_class, a.per_class);
            set(&mut cfg.road.steps, a.steps);
            run::road_eval(&cfg)?
        }
        Command::Calibrate(a) => {
            if let Some(h) = a.head {
                cfg.calibration.head = HeadKind::parse(&h)?;
            }
            set(&mut cfg.calibration.hidden, a.hidden);
            set(&mut cfg.calibration.val_frac, a.val_frac);
            set(&mut cfg.calibration.repeats, a.repeats);
            set(&mut cfg.calibration.step, a.step);
            run::calibrate(&cfg)?
        }
        Command::Report => run::report(&cfg)?,
        Command::Run => run::run_all(&cfg)?,
    };
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}

/// 1 config, 2 missing upstream artifact, 3 numerical failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::MissingArtifact(_)) => 2,
        Some(Error::NonFinite { .. } | Error::Divergence { .. } | Error::NoConvergence { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
