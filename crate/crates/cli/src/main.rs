//! Command-line runner tying the library together: dataset generation,
//! two-stage training, evaluation (including stain-shift ladders and
//! source-only transfer), hyperparameter ablations, and comparison reports.
//!
//! Every command records a manifest in its output directory, all randomness
//! flows from explicit seeds, and reruns refuse to clobber existing output
//! unless forced. `PIXELCAM_LOG={error,warn,info,debug}` controls logging.

mod ablate;
mod evaluate;
mod generate;
mod manifest;
mod report;
mod train;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "pixelcam", version, about = "Weakly supervised localization benchmark runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic histology-like dataset with pixel ground truth.
    Generate(generate::Args),
    /// Train the image-classification baseline or the two-head model.
    Train(train::Args),
    /// Score a checkpoint on a dataset, optionally under stain shifts or on
    /// a second domain.
    Evaluate(evaluate::Args),
    /// Sweep one hyperparameter axis end to end and tabulate the results.
    Ablate(ablate::Args),
    /// Compare finished evaluations, with paired significance tests.
    Report(report::Args),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PIXELCAM_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => generate::run(args),
        Command::Train(args) => train::run(args),
        Command::Evaluate(args) => evaluate::run(args),
        Command::Ablate(args) => ablate::run(args),
        Command::Report(args) => report::run(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
