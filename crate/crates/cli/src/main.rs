//! `duet`: train, run and evaluate the dual music/dance generators.
//!
//! Exit codes:
//!
//! | code | meaning                                        |
//! |------|------------------------------------------------|
//! | 0    | success                                        |
//! | 1    | internal error                                 |
//! | 2    | bad command line (usage)                       |
//! | 3    | invalid input: file format, manifest, config   |
//! | 4    | numeric failure (non-finite loss, GW underflow)|
//! | 5    | I/O error                                      |
//!
//! On failure stderr receives one JSON line `{"error": code, "message": ..}`.
//! Stdout carries only the command's JSON payload.

mod commands;
mod errors;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use duet_core::Direction;

/// Environment variable naming the default data directory. It should hold a
/// `manifest.json`.
pub const DATA_DIR_ENV: &str = "DUET_DATA_DIR";

#[derive(Parser, Debug)]
#[command(name = "duet", version, about = "Dual music-to-dance and dance-to-music generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train both generators; writes checkpoints, a CSV log and an eval report.
    Train(TrainArgs),
    /// Generate a sequence from a checkpoint.
    Generate(GenerateArgs),
    /// Score generated sequences, or a checkpoint on a test split.
    Eval(EvalArgs),
    /// Entropic Gromov-Wasserstein between two embedding matrices.
    Gw(GwArgs),
    /// Note histogram (SVG) and per-frame notes (CSV) for music files.
    Plot(PlotArgs),
    /// Write a synthetic paired dataset with a manifest.
    Synth(SynthArgs),
    /// Print the fully resolved configuration with provenance.
    Config(ConfigArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// JSON file overriding preset values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Disable the GW loss.
    #[arg(long)]
    pub no_gw: bool,
    /// Disable the cycle-consistency loss.
    #[arg(long)]
    pub no_cycle: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset manifest; defaults to `$DUET_DATA_DIR/manifest.json`, then to
    /// synthetic data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Override any dotted key, e.g. `--set train.batch_size=8`. The value
    /// is parsed as JSON, falling back to a string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Music `.mdseq` for music-to-dance, dance `.mdseq` for dance-to-music.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub direction: Direction,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output `.mdseq` path.
    #[arg(long)]
    pub out: PathBuf,
    /// Generation window in frames; defaults to the training crop length.
    #[arg(long)]
    pub chunk: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Evaluate this checkpoint on the test split of `--data`.
    #[arg(long, conflicts_with_all = ["dance", "music"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Generated dance files. The first is scored against the truth; all of
    /// them together give the diversity.
    #[arg(long, requires_all = ["dance_truth", "music_truth"])]
    pub dance: Vec<PathBuf>,
    #[arg(long)]
    pub dance_truth: Option<PathBuf>,
    /// Generated music file.
    #[arg(long, requires = "music_truth")]
    pub music: Option<PathBuf>,
    /// Ground-truth music; its beat channel is used for beat alignment.
    #[arg(long)]
    pub music_truth: Option<PathBuf>,
    /// Key of both pieces, e.g. "A minor".
    #[arg(long)]
    pub key: Option<String>,
    #[arg(long, default_value = "sequence")]
    pub genre: String,
    /// Also write the per-sequence CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GwArgs {
    /// `m×d` embeddings as `.mdseq` (matrix) or JSON array of rows.
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long)]
    pub y: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 30)]
    pub sinkhorn_iters: usize,
    #[arg(long, default_value_t = 20)]
    pub projection_iters: usize,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Music file to plot.
    #[arg(long)]
    pub music: PathBuf,
    /// Optional second piece drawn alongside.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub key: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 24)]
    pub train: usize,
    #[arg(long, default_value_t = 6)]
    pub test: usize,
    #[arg(long, default_value_t = 96)]
    pub frames: usize,
    #[arg(long, default_value_t = 0.9)]
    pub alignment: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).target(env_logger::Target::Stderr).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gw(a) => commands::gw(&a),
        Command::Plot(a) => commands::plot(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Config(a) => commands::show_config(&a),
    };
    match result {
        Ok(payload) => {
            println!("{}", serde_json::to_string_pretty(&payload).expect("payload serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (exit, code) = errors::classify(&e);
            eprintln!("{}", serde_json::json!({"error": code, "message": format!("{e:#}")}));
            ExitCode::from(exit)
        }
    }
}
