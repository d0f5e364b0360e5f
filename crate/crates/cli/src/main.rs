//! `memvoice` command-line driver.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "memvoice", version, about = "Speaker-memory adaptation experiments on a synthetic corpus")]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for corpus generation, training seeds and pairing.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus and the training-speaker memory.
    GenData(GenDataArgs),
    /// Train one variant over every configured seed and keep the best.
    Train(TrainArgs),
    /// Layer sweep: baseline plus every (layer, variant) cell.
    Sweep(SweepArgs),
    /// Speaker-change evaluation of a memory and a fixed-embedding checkpoint.
    Spkchange(SpkchangeArgs),
    /// Finite-difference check of the full adapted model.
    Gradcheck(GradcheckArgs),
    /// Convert a metrics file between CSV and JSONL.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Corpus directory; the memory file is written inside it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing corpus directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// none, memory, external-speaker or external-utterance.
    #[arg(long)]
    variant: Option<String>,
    /// Checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Comma-separated insertion layers; every layer of the encoder by default.
    #[arg(long)]
    layers: Option<String>,
    /// Comma-separated adapted variants.
    #[arg(long, default_value = "memory,external-speaker")]
    variants: String,
    /// Metrics directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SpkchangeArgs {
    /// Two checkpoint files: one memory model and one fixed-embedding model.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    checkpoints: Vec<PathBuf>,
    /// Pair every utterance with itself instead of with another speaker.
    #[arg(long)]
    control: bool,
    /// Metrics directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// cosine, scaled-dot or both.
    #[arg(long, default_value = "both")]
    similarity: String,
    #[arg(long, hide = true)]
    flip_sign: Option<String>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Metrics file (.csv or .jsonl).
    #[arg(long)]
    input: PathBuf,
    /// Output file; format follows its extension.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = commands::Context::load(cli.config.as_deref(), cli.seed).and_then(|ctx| match cli.command {
        Command::GenData(a) => commands::gen_data(&ctx, a.out, a.force),
        Command::Train(a) => commands::train(&ctx, a.variant.as_deref(), a.out),
        Command::Sweep(a) => commands::sweep(&ctx, a.layers.as_deref(), &a.variants, a.out),
        Command::Spkchange(a) => commands::spkchange(&ctx, &a.checkpoints, a.control, a.out),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, &a.similarity, a.flip_sign),
        Command::Export(a) => commands::export(&a.input, &a.out),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
