use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

mod commands;
mod config;

use commands::{Failure, Role};
use config::RunConfig;

/// Streaming 4D reconstruction toolkit: synthetic data, teacher and student
/// training, cached streaming inference, latency benchmarks and evaluation.
#[derive(Parser, Debug)]
#[command(name = "stream4d", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Failure> {
        RunConfig::load(self.config.as_deref(), &self.overrides).map_err(Failure::Invalid)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the default configuration as TOML.
    Config,
    /// Render random synthetic sequences into a dataset directory.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; defaults to `paths.dataset`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the global-attention teacher or the causal student.
    #[command(group(ArgGroup::new("role").required(true)))]
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Train the global-attention teacher from scratch.
        #[arg(long, group = "role")]
        teacher: bool,
        /// Train the causal student, starting from the teacher's weights.
        #[arg(long, group = "role")]
        student: bool,
        /// Supervise the student with the frozen teacher's predictions.
        #[arg(long, conflicts_with = "teacher")]
        distill: bool,
        /// Run directory; defaults to `<paths.runs>/<role>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run cached streaming inference one frame at a time.
    Stream {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A sequence file or a dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Directory for the prediction containers.
        #[arg(long)]
        out: PathBuf,
        /// Also write one PLY point cloud per frame.
        #[arg(long)]
        emit_ply: bool,
        /// CSV of per-frame latencies.
        #[arg(long)]
        timings_csv: Option<PathBuf>,
    },
    /// Compare last-frame latency of streaming and full reprocessing.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sequence lengths to time.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 10, 20, 30, 40])]
        frames: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV output; the table is always printed.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        /// Prediction file or directory written by `stream`.
        #[arg(long)]
        predictions: PathBuf,
        /// Matching ground-truth file or directory.
        #[arg(long)]
        data: PathBuf,
        /// CSV report, one row per sequence plus a `mean` row.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Config => commands::print_config(),
        Command::Gen { config, out, count, seed } => {
            let cfg = config.load()?;
            let out = out.unwrap_or_else(|| cfg.paths.dataset.clone());
            commands::gen(&cfg, &out, count, seed)
        }
        Command::Train {
            config,
            teacher,
            distill,
            out,
            ..
        } => {
            let cfg = config.load()?;
            let role = if teacher { Role::Teacher } else { Role::Student { distill } };
            commands::train(cfg, role, out)
        }
        Command::Stream {
            checkpoint,
            data,
            out,
            emit_ply,
            timings_csv,
        } => commands::stream(&checkpoint, &data, &out, emit_ply, timings_csv.as_deref()),
        Command::Bench {
            checkpoint,
            frames,
            reps,
            seed,
            out,
        } => commands::bench(&checkpoint, &frames, reps, seed, out.as_deref()),
        Command::Eval { predictions, data, out } => commands::eval(&predictions, &data, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
