use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uap_sentinel::{run, Command, Options};

/// Targeted UAP generation and LO-GLRT detection at desk scale.
#[derive(Parser)]
#[command(name = "uap-sentinel", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the train/calib/test synthetic datasets.
    Synth(Common),
    /// Train the MLP classifier on the train split.
    TrainClassifier(Common),
    /// Learn the targeted perturbation bank.
    GenUaps(Common),
    /// MLE pretraining and BCE fine-tuning of the LO-GLRT detector.
    TrainDetector(Common),
    /// Set the Neyman-Pearson threshold on the calib split.
    Calibrate(Common),
    /// Fit the PCA baseline and its linear detector.
    TrainBaseline(Common),
    /// Sweep ε on the test split and write the reports.
    Eval(Common),
    /// Run every stage in order.
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Top-level seed, overriding `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Exit with code 5 when the attack misses its goal.
    #[arg(long)]
    strict: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, common) = match cli.command {
        Cmd::Synth(c) => (Command::Synth, c),
        Cmd::TrainClassifier(c) => (Command::TrainClassifier, c),
        Cmd::GenUaps(c) => (Command::GenUaps, c),
        Cmd::TrainDetector(c) => (Command::TrainDetector, c),
        Cmd::Calibrate(c) => (Command::Calibrate, c),
        Cmd::TrainBaseline(c) => (Command::TrainBaseline, c),
        Cmd::Eval(c) => (Command::Eval, c),
        Cmd::Pipeline(c) => (Command::Pipeline, c),
    };
    let opts = Options {
        config: common.config,
        out: common.out,
        seed: common.seed,
        strict: common.strict,
    };
    match run(cmd, &opts, &mut std::io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("uap-sentinel: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
