//! `rtatl`: training, evaluation, figures and synthetic data.

mod eval;
mod run;
mod synth;
mod train;
mod viz;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::run::CliError;

#[derive(Parser, Debug)]
#[command(name = "rtatl", version, about = "Relation-aware facial action unit recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a labeled manifest, optionally with an unlabeled stream.
    Train(train::TrainArgs),
    /// Per-AU and average F1 of a checkpoint.
    Eval(eval::EvalArgs),
    /// Ground-truth and predicted flow as grayscale I_x / I_y panels.
    VizFlow(viz::FlowArgs),
    /// Masked, original and recovered faces.
    VizInpaint(viz::InpaintArgs),
    /// Cosine similarity heatmap of the AU indicators.
    VizRelations(viz::RelationArgs),
    /// Writes a procedurally generated dataset with manifests.
    Synth(synth::SynthArgs),
}

/// Model source shared by the figure commands.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Trained checkpoint. Without it a freshly initialized model is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Config file or preset name (bp4d, disfa, synthetic), used without a checkpoint.
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let args: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::Train(a) => train::run(a, &args),
        Command::Eval(a) => eval::run(a, &args),
        Command::VizFlow(a) => viz::flow(a, &args),
        Command::VizInpaint(a) => viz::inpaint(a, &args),
        Command::VizRelations(a) => viz::relations(a, &args),
        Command::Synth(a) => synth::run(a, &args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(1, CliError::exit_code);
            ExitCode::from(code)
        }
    }
}
