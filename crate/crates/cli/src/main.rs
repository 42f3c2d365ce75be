//! `convmorph` — grow convolutional networks without forgetting.
//!
//! The binary wraps the `convmorph` library behind six commands over a
//! two-file on-disk model format (JSON description + binary weights):
//!
//! * `init` — generate a seeded template model;
//! * `morph-split` — replace one convolution with an equivalent pair;
//! * `morph-promote` — double the input resolution, keeping every
//!   downstream layer's shapes and compute;
//! * `verify` — check that two models agree, by running them or by
//!   comparing their per-layer shape and MAC tables;
//! * `analyze` — per-layer cost and receptive-field report;
//! * `loss` — weighted cross-entropy and its gradient over a CSV batch.
//!
//! Reports go to standard output as JSON. Exit codes: `0` success (or a
//! passing check), `1` failure, `2` bad usage.

mod commands;
mod csvio;
mod model;

use std::io::Write;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "convmorph")]
#[command(version)]
#[command(about = "Function-preserving rewrites for convolutional networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded template model
    Init(commands::InitArgs),
    /// Split one convolution into an equivalent conv-BN-PReLU-conv chain
    MorphSplit(commands::SplitArgs),
    /// Double the input resolution, preserving downstream shapes and MACs
    MorphPromote(commands::PromoteArgs),
    /// Check that two models agree (run them, or compare structure tables)
    Verify(commands::VerifyArgs),
    /// Report per-layer MACs, activation sizes and receptive fields
    Analyze(commands::AnalyzeArgs),
    /// Evaluate weighted cross-entropy and its gradient on a CSV batch
    Loss(commands::LossArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Init(args) => commands::run_init(args),
        Command::MorphSplit(args) => commands::run_split(args),
        Command::MorphPromote(args) => commands::run_promote(args),
        Command::Verify(args) => commands::run_verify(args),
        Command::Analyze(args) => commands::run_analyze(args),
        Command::Loss(args) => commands::run_loss(args),
    };
    let code = match result {
        Ok(code) => code,
        Err(err) => {
            // Best effort: a closed stderr must not turn into a panic.
            let _ = writeln!(std::io::stderr(), "error: {err}");
            1
        }
    };
    std::process::exit(code);
}
