mod bench;
mod endpoint;
mod manifest;
mod stages;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "streampref", version, about = "Preference-summary data pipelines")]
pub struct Cli {
    /// Root seed; every stage derives its own stream from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads per stage.
    #[arg(long, global = true, default_value_t = default_jobs())]
    pub jobs: usize,

    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,

    #[command(subcommand)]
    pub command: Command,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(8)
}

impl Cli {
    /// Seed for one stage, or `None` when the flag was not given.
    pub fn stage_seed(&self, stage: &str) -> Option<u64> {
        self.seed.map(|s| streampref::seed::derive(s, &[stage]))
    }

    /// Seed for one stage, derived from the root seed (0 when unset).
    pub fn seed_for(&self, stage: &str) -> u64 {
        streampref::seed::derive(self.root_seed(), &[stage])
    }

    pub fn root_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build streaming SFT records with the generate/validate/merge pipeline.
    SynthesizeSft(stages::SynthArgs),
    /// Score, prune and pick two-step RL instances.
    Prune(stages::PruneArgs),
    /// Sample rollout trees and export a rewarded training batch.
    Rollout(stages::RolloutArgs),
    /// Evaluate the clipped surrogate loss of a batch under new logprobs.
    LossCheck(stages::LossArgs),
    /// Infer summaries chunk by chunk, resuming from saved state.
    StreamInfer(stages::StreamArgs),
    /// Build transfer benchmarks.
    #[command(subcommand)]
    BuildTransfer(bench::TransferCommand),
    /// Selection-style evaluation of summaries with a downstream judge.
    Evaluate(bench::EvalArgs),
    /// Generate a synthetic population with known latent preferences.
    SimlabGen(bench::SimlabArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp_millis()
        .init();
    let result = match &cli.command {
        Command::SynthesizeSft(a) => stages::synthesize(&cli, a),
        Command::Prune(a) => stages::prune(&cli, a),
        Command::Rollout(a) => stages::rollout(&cli, a),
        Command::LossCheck(a) => stages::loss_check(&cli, a),
        Command::StreamInfer(a) => stages::stream_infer(&cli, a),
        Command::BuildTransfer(c) => bench::build_transfer(&cli, c),
        Command::Evaluate(a) => bench::evaluate(&cli, a),
        Command::SimlabGen(a) => bench::simlab_gen(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
