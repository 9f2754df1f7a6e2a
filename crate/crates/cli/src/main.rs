//! `ordgraph`: train, evaluate and inspect ordinal social recommenders.

mod config;
mod error;
mod eval;
mod run;
mod synth;
mod train;
mod tree;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::{CliError, Kind};

#[derive(Parser)]
#[command(name = "ordgraph", version, about = "Ordinal social recommendation with gamma belief networks")]
struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "ORDGRAPH_WORKERS")]
    workers: Option<usize>,
    /// Suppress progress messages on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write a run directory.
    Train(train::TrainArgs),
    /// Score held-out ratings with HR@N and NDCG@N.
    Eval(eval::EvalArgs),
    /// Write the top-N unseen items for a list of users.
    Recommend(eval::RecommendArgs),
    /// Export the community hierarchy as JSON and Graphviz DOT.
    ExportTree(tree::TreeArgs),
    /// Simulate a dataset with known parameters.
    Synth(synth::SynthArgs),
}

/// Sizes the global worker pool; results do not depend on the count.
pub fn setup_threads(workers: Option<usize>) -> Result<(), CliError> {
    let n = workers.unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::new(Kind::Runtime, e.into()))
}

/// The error chain joined by `: `, skipping causes already quoted by the
/// message above them.
fn message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        // the config file may name a worker count, so train sizes its own pool
        Command::Train(a) => train::run(a, cli.workers, cli.quiet),
        other => setup_threads(cli.workers).and_then(|()| match other {
            Command::Eval(a) => eval::run_eval(a),
            Command::Recommend(a) => eval::run_recommend(a),
            Command::ExportTree(a) => tree::run(a),
            Command::Synth(a) => synth::run(a),
            Command::Train(_) => unreachable!(),
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", message(&e.error));
            ExitCode::from(e.kind.code())
        }
    }
}
