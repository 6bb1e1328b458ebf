mod bench;
mod config;
mod decompose;
mod eval;
mod gen_data;
mod policy;
mod train;

use clap::{Parser, Subcommand};

/// Diffusion policy training, evaluation and stage-scheduled inference on a
/// toy push task.
#[derive(Debug, Parser)]
#[command(name = "diffpolicy", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Record scripted expert demonstrations.
    GenData(gen_data::GenDataArgs),
    /// Train a denoiser on demonstrations, uniformly or with the adaptive loss network.
    Train(train::TrainArgs),
    /// Roll out a trained policy under a fixed or stage-scheduled budget.
    Eval(eval::EvalArgs),
    /// Ask a vision-language model for task stages and per-stage budgets.
    Decompose(decompose::DecomposeArgs),
    /// Compare DDPM and DDIM with and without stage scheduling.
    Bench(bench::BenchArgs),
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData(a) => gen_data::run(&a),
        Command::Train(a) => train::run(&a),
        Command::Eval(a) => eval::run(&a),
        Command::Decompose(a) => decompose::run(&a),
        Command::Bench(a) => bench::run(&a),
    }
}
