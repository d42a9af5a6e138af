use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod bench;
mod commands;

/// Exit statuses shared by every subcommand.
pub mod exit {
    pub const USER: u8 = 2;
    pub const CHECKPOINT: u8 = 3;
    pub const NUMERIC: u8 = 4;
}

/// A failed command: what to print and which status to exit with.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn user(message: impl Into<String>) -> Self {
        Self {
            code: exit::USER,
            message: message.into(),
        }
    }
}

impl From<pama::Error> for Failure {
    fn from(e: pama::Error) -> Self {
        use pama::Error::*;
        let code = match &e {
            Incompatible(_) | Integrity(_) => exit::CHECKPOINT,
            NonFinite { .. } | Degenerate(_) | Contract(_) | Tensor(_) => exit::NUMERIC,
            Config(_) | Dimension { .. } | Shape(_) | EmptyCorpus(_) | Image { .. } | Io(_) => exit::USER,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

#[derive(Parser, Debug)]
#[command(name = "pama", version, about = "Progressive attentional manifold alignment style transfer")]
struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Stylize a content image (or a directory of them) with a style image.
    Stylize {
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output file, or output directory when --content is a directory.
        #[arg(long)]
        out: PathBuf,
        /// Also write every stage's decoded output next to --out.
        #[arg(long)]
        stages: bool,
        /// Replace the learned interpolation weights with a constant.
        #[arg(long, hide = true)]
        force_w: Option<f64>,
    },
    /// Write decoded rearranged style features and weight heatmaps per stage.
    Inspect {
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the encode, align and decode path on random inputs.
    Benchmark {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "256,512")]
        resolutions: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        /// CSV report path.
        #[arg(long, default_value = "benchmark.csv")]
        out: PathBuf,
    },
    /// Train from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run gradient checks, oracle comparisons and invariants.
    Verify {
        /// Instances per gradient check.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// JSON report path.
        #[arg(long, default_value = "verify.json")]
        report: PathBuf,
    },
    /// Write a procedural image corpus.
    Synth {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Kind {
    Content,
    Style,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let seed = cli.seed;
    let result = match cli.command {
        Command::Stylize {
            content,
            style,
            checkpoint,
            out,
            stages,
            force_w,
        } => commands::stylize(&content, &style, &checkpoint, &out, stages, force_w),
        Command::Inspect {
            content,
            style,
            checkpoint,
            out,
        } => commands::inspect(&content, &style, &checkpoint, &out),
        Command::Benchmark {
            checkpoint,
            resolutions,
            trials,
            warmup,
            out,
        } => bench::run(&checkpoint, &resolutions, trials, warmup, &out, seed.unwrap_or(0)),
        Command::Train { config, resume } => commands::train(&config, resume.as_deref(), seed),
        Command::Verify { instances, report } => commands::verify(instances, seed.unwrap_or(0), &report),
        Command::Synth { kind, count, out } => {
            let kind = match kind {
                Kind::Content => pama::synth::SynthKind::Content,
                Kind::Style => pama::synth::SynthKind::Style,
            };
            commands::synth(kind, count, &out, seed.unwrap_or(0))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
