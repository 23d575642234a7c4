//! `fidelity-lab`: data generation, training, evaluation and analysis pipelines.

mod analyze;
mod error;
mod eval;
mod gen_data;
mod manifest;
mod train;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "fidelity-lab",
    version,
    about = "Memory-token compressors and reconstruction-fidelity diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the fact world, corpora, QA sets and scripted oracle checkpoints.
    GenData(gen_data::GenDataArgs),
    /// Train a compressor/decoder pair at one compression rate.
    Train(train::TrainArgs),
    #[command(subcommand)]
    Eval(eval::EvalCommand),
    #[command(subcommand)]
    Analyze(analyze::AnalyzeCommand),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                error::ExitCode::Config as i32
            } else {
                0
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(c) => eval::run(c),
        Command::Analyze(c) => analyze::run(c),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        if let Some(step) = e.failing_step {
            eprintln!("failed at step {step}");
        }
        std::process::exit(e.code as i32);
    }
}
