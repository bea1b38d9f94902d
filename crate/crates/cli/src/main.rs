mod commands;
mod config;
mod error;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "videosaur", version, about = "Train and evaluate slot-based video models on synthetic sprites")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// JSON training config; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set loss.temperature=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes config, log and checkpoint under --out.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
        /// Stop after this step instead of total_steps.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Evaluate a checkpoint on held-out generated videos; JSON on stdout.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Slot count used for grouping (defaults to the training value).
        #[arg(long)]
        slots: Option<usize>,
        #[arg(long, default_value_t = 100)]
        videos: u64,
        #[arg(long, default_value_t = commands::EVAL_SEED)]
        seed: u64,
        /// Override data keys of the checkpoint config, e.g. `--set data.num_sprites=2`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Build transition targets from a feature file.
    Targets {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Time shift between compared frames.
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Softmax temperature.
        #[arg(long, default_value_t = 0.075)]
        tau: f64,
        /// Stats sidecar path (defaults to --out with a .json extension).
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Time decoders across slot counts; JSON on stdout.
    Bench {
        #[arg(long, default_value = "mixer")]
        decoder: String,
        #[arg(long, value_delimiter = ',', default_value = "4,32")]
        slots: Vec<usize>,
        #[arg(long, default_value_t = 30)]
        reps: usize,
        #[arg(long, default_value_t = 64)]
        patches: usize,
        #[arg(long, default_value_t = 32)]
        slot_dim: usize,
        #[arg(long, default_value_t = 16)]
        features: usize,
        #[arg(long, default_value_t = 128)]
        hidden: usize,
    },
    /// Write mask overlays of generated videos as PPM/PGM images.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        videos: u64,
        #[arg(long, default_value_t = commands::EVAL_SEED)]
        seed: u64,
        #[arg(long)]
        slots: Option<usize>,
        /// Pixel upscaling factor.
        #[arg(long, default_value_t = 4)]
        scale: usize,
    },
    /// Export generated videos as feature and mask files.
    Export {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        videos: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the resolved training config.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            out,
            resume,
            until,
        } => commands::train(&config, &out, resume, until),
        Command::Eval {
            checkpoint,
            slots,
            videos,
            seed,
            sets,
        } => commands::eval(&checkpoint, slots, videos, seed, &sets),
        Command::Targets {
            features,
            out,
            k,
            tau,
            stats,
        } => commands::targets(&features, &out, k, tau, stats.as_deref()),
        Command::Bench {
            decoder,
            slots,
            reps,
            patches,
            slot_dim,
            features,
            hidden,
        } => commands::bench(&commands::BenchArgs {
            decoder,
            slots,
            reps,
            patches,
            slot_dim,
            features,
            hidden,
        }),
        Command::Render {
            checkpoint,
            out,
            videos,
            seed,
            slots,
            scale,
        } => render::render(&checkpoint, &out, videos, seed, slots, scale),
        Command::Export {
            config,
            out,
            videos,
            seed,
        } => commands::export(&config, &out, videos, seed),
        Command::Config { config } => commands::print_config(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
