use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sortblock::cli::{
    cmd_analyze, cmd_compare, cmd_compare_seeds, cmd_fit, cmd_run, cmd_sweep, ExperimentConfig,
    Overrides, RunMode, SweepAxis, L1_CURVE_FILE,
};
use sortblock::engine::{PredictMode, RatioMode};
use sortblock::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sortblock",
    version,
    about = "Block-caching experiments on a toy diffusion transformer"
)]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Flags {
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    blocks: Option<usize>,
    #[arg(long, global = true)]
    refresh_interval: Option<usize>,
    #[arg(long, global = true)]
    rho: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    window_high: Option<usize>,
    #[arg(long, global = true)]
    window_low: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated seeds for paired comparisons and sweeps.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    mode: Option<ModeArg>,
    #[arg(long, global = true)]
    predict: Option<PredictArg>,
    #[arg(long, global = true)]
    ratio: Option<RatioArg>,
    #[arg(long, global = true)]
    heavy_trace: bool,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Sortblock,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictArg {
    Linear,
    Copy,
}

#[derive(Clone, Copy, ValueEnum)]
enum RatioArg {
    Fixed,
    Adaptive,
}

#[derive(Subcommand)]
enum Command {
    /// Baseline run with per-step and per-block difference profiles.
    Analyze,
    /// Fit the timestep-dependent recompute ratio to an L1 curve.
    Fit {
        #[arg(long, default_value = L1_CURVE_FILE)]
        curve: PathBuf,
        #[arg(long, default_value_t = 5)]
        degree: usize,
    },
    /// Sample once and write the latent, trace and summary.
    Run,
    /// Compare two latent blobs, or baseline against sortblock over the seeds.
    Compare {
        candidate: Option<PathBuf>,
        reference: Option<PathBuf>,
    },
    /// Ablate one engine parameter.
    Sweep {
        /// k, beta or window.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; windows are early, late, innerNN or HIGH:LOW.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            steps: self.steps,
            blocks: self.blocks,
            refresh_interval: self.refresh_interval,
            rho: self.rho,
            beta: self.beta,
            window_high: self.window_high,
            window_low: self.window_low,
            seed: self.seed,
            mode: self.mode.map(|m| match m {
                ModeArg::Baseline => RunMode::Baseline,
                ModeArg::Sortblock => RunMode::Sortblock,
            }),
            predict: self.predict.map(|p| match p {
                PredictArg::Linear => PredictMode::Linear,
                PredictArg::Copy => PredictMode::Copy,
            }),
            ratio: self.ratio.map(|r| match r {
                RatioArg::Fixed => RatioMode::Fixed,
                RatioArg::Adaptive => RatioMode::Adaptive,
            }),
            heavy_trace: self.heavy_trace,
            out_dir: self.out_dir.clone(),
        }
    }
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&cli.flags.overrides());
    if let Some(seeds) = &cli.flags.seeds {
        cfg.seeds = seeds.clone();
    }
    cfg.validate()?;
    match cli.command {
        Command::Analyze => cmd_analyze(&cfg, out).map(drop),
        Command::Fit { curve, degree } => {
            let beta = cfg.sortblock.beta;
            cmd_fit(&cfg, &cfg.path(curve), degree, beta, out).map(drop)
        }
        Command::Run => cmd_run(&cfg, out).map(drop),
        Command::Compare {
            candidate: Some(a),
            reference: Some(b),
        } => cmd_compare(&cfg, &cfg.path(a), &cfg.path(b), out).map(drop),
        Command::Compare {
            candidate: None,
            reference: None,
        } => cmd_compare_seeds(&cfg, out).map(drop),
        Command::Compare { .. } => Err(Error::Config(
            "compare takes either two latent files or none".into(),
        )),
        Command::Sweep { axis, values } => {
            cmd_sweep(&cfg, SweepAxis::parse(&axis)?, &values, out).map(drop)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let stdout = io::stdout();
    match execute(cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
