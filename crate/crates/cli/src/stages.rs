use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Deserialize;

use streampref::curriculum::{self, PruneConfig, PruneTable, RlInstance, ScoreRow};
use streampref::data::{read_jsonl, write_jsonl, UserHistory};
use streampref::modelio::Role;
use streampref::rlengine::{self, Crediting, RewardConfig, RlConfig, TrainingRecord};
use streampref::streamer::{self, StreamState};
use streampref::synthpipe::{self, SynthClients, SynthConfig, TractRow};

use crate::manifest::Recorder;
use crate::{endpoint, Cli};

pub fn read_histories(path: &Path, rec: &mut Recorder) -> Result<Vec<UserHistory>> {
    rec.input(path)?;
    Ok(read_jsonl(path)?)
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub histories: PathBuf,
    /// Tractability sidecar: {user_id, index, s_tract | strong_p}.
    #[arg(long)]
    pub scores: PathBuf,
    /// TOML synthesis config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub generator: String,
    #[arg(long)]
    pub judge: String,
    /// Defaults to the generator endpoint.
    #[arg(long)]
    pub merger: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub segments: Option<usize>,
    #[arg(long)]
    pub max_targets: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synthesize(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let mut rec = Recorder::start("synthesize-sft", cli.root_seed());
    let mut cfg = match &a.config {
        Some(p) => {
            rec.input(p)?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SynthConfig::from_toml_str(&text)?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = cli.stage_seed("synthesize-sft") {
        cfg.seed = s;
    }
    if let Some(v) = a.tau {
        cfg.tau_tract = v;
    }
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.segments {
        cfg.num_segments = v;
        cfg.boundaries = None;
    }
    if let Some(v) = a.max_targets {
        cfg.max_targets = v;
    }
    cfg.validate()?;
    rec.config("synth", &cfg)?;

    let histories = read_histories(&a.histories, &mut rec)?;
    rec.input(&a.scores)?;
    let scores: Vec<TractRow> = read_jsonl(&a.scores)?;
    let generator = endpoint::connect(&a.generator, Role::Generator, &mut rec)?;
    let merger = match &a.merger {
        Some(m) => endpoint::connect(m, Role::Merger, &mut rec)?,
        None => generator.clone(),
    };
    let clients = SynthClients {
        judge: endpoint::connect(&a.judge, Role::Judge, &mut rec)?,
        generator,
        merger,
    };
    let (records, stats) = synthpipe::run_synthesis(&clients, &histories, &scores, &cfg, cli.jobs)?;
    log::info!(
        "synthesized {} records; {} of {} users fully accepted; skips {:?}",
        stats.records,
        stats.users_fully_accepted,
        stats.users,
        stats.skips
    );
    rec.output(&a.out)?;
    write_jsonl(&a.out, &records)?;
    rec.finish(&a.out)?;
    println!("{}", serde_json::to_string(&stats)?);
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Amazon,
    Mind,
    Alignx,
    Identity,
}

impl Preset {
    fn config(self) -> PruneConfig {
        match self {
            Preset::Amazon => PruneConfig::amazon(),
            Preset::Mind => PruneConfig::mind(),
            Preset::Alignx => PruneConfig::alignx(),
            Preset::Identity => PruneConfig::identity(),
        }
    }
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    /// Score sidecar: {user_id, index, strong_p, weak_p}.
    #[arg(long)]
    pub scores: PathBuf,
    /// Histories the scored indices refer to; their dataset tags select the
    /// prune row.
    #[arg(long)]
    pub histories: PathBuf,
    /// TOML table of per-dataset rows; defaults to the reference rows.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Row for datasets missing from the table.
    #[arg(long, value_enum)]
    pub default_row: Option<Preset>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tract_low: Option<f64>,
    #[arg(long)]
    pub tract_high: Option<f64>,
    /// Floor applied to probabilities before taking logs.
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn prune(cli: &Cli, a: &PruneArgs) -> Result<()> {
    let mut rec = Recorder::start("prune", cli.root_seed());
    let mut table = match &a.config {
        Some(p) => {
            rec.input(p)?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            PruneTable::from_toml_str(&text)?
        }
        None => PruneTable::reference(),
    };
    if let Some(preset) = a.default_row {
        table.default = Some(preset.config());
    }
    // per-value flags override every row
    let rows = table.datasets.values_mut().chain(table.default.as_mut());
    for row in rows {
        if let Some(v) = a.alpha {
            row.alpha = v;
        }
        if let Some(v) = a.tract_low {
            row.tract_low = v;
        }
        if let Some(v) = a.tract_high {
            row.tract_high = v;
        }
        row.validate()?;
    }
    rec.config("prune", &table)?;
    rec.config("eps", &a.eps)?;
    rec.input(&a.scores)?;
    let rows: Vec<ScoreRow> = read_jsonl(&a.scores)?;
    let histories = read_histories(&a.histories, &mut rec)?;
    let instances = curriculum::build_instances(&rows, &histories, &table, a.eps)?;
    log::info!("{} RL instances from {} users", instances.len(), histories.len());
    rec.output(&a.out)?;
    write_jsonl(&a.out, &instances)?;
    rec.finish(&a.out)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CreditArg {
    Selected,
    All,
}

#[derive(Args, Debug)]
pub struct RolloutArgs {
    #[arg(long)]
    pub instances: PathBuf,
    #[arg(long)]
    pub histories: PathBuf,
    #[arg(long)]
    pub policy: String,
    #[arg(long)]
    pub judge: String,
    /// Group size per sampling level.
    #[arg(short = 'G', long = "group-size")]
    pub group_size: usize,
    /// Discount on the future-utility term.
    #[arg(long)]
    pub gamma: f64,
    #[arg(long, value_enum, default_value = "selected")]
    pub crediting: CreditArg,
    #[arg(long, default_value_t = rlengine::DEFAULT_EPS_STD)]
    pub eps_std: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn rollout(cli: &Cli, a: &RolloutArgs) -> Result<()> {
    let mut rec = Recorder::start("rollout", cli.root_seed());
    if a.group_size == 0 {
        bail!("group size must be positive");
    }
    if !(0.0..=1.0).contains(&a.gamma) {
        bail!("gamma {} outside [0, 1]", a.gamma);
    }
    let cfg = RlConfig {
        group_size: a.group_size,
        reward: RewardConfig {
            gamma: a.gamma,
            crediting: match a.crediting {
                CreditArg::Selected => Crediting::SelectedOnly,
                CreditArg::All => Crediting::AllInitial,
            },
            eps_std: a.eps_std,
        },
        seed: cli.seed_for("rollout"),
    };
    rec.config("rl", &cfg)?;
    rec.input(&a.instances)?;
    let instances: Vec<RlInstance> = read_jsonl(&a.instances)?;
    let histories = read_histories(&a.histories, &mut rec)?;
    let policy = endpoint::connect(&a.policy, Role::Policy, &mut rec)?;
    let judge = endpoint::connect(&a.judge, Role::Judge, &mut rec)?;
    let (records, stats) = rlengine::run_rl_batch(&policy, &judge, &instances, &histories, &cfg, cli.jobs)?;
    rec.output(&a.out)?;
    write_jsonl(&a.out, &records)?;
    rec.finish(&a.out)?;
    println!("{}", serde_json::to_string(&stats)?);
    Ok(())
}

#[derive(Args, Debug)]
pub struct LossArgs {
    #[arg(long)]
    pub batch: PathBuf,
    /// JSONL, one line per batch record: an array of token logprobs or an
    /// object with a `logprobs` array.
    #[arg(long)]
    pub new_logprobs: PathBuf,
    /// Clip range; `inf` disables clipping.
    #[arg(long, default_value_t = rlengine::DEFAULT_CLIP_EPS)]
    pub eps: f64,
    /// Report file; defaults to `<batch>.loss.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LogprobLine {
    Bare(Vec<f64>),
    Wrapped { logprobs: Vec<f64> },
}

pub fn loss_check(cli: &Cli, a: &LossArgs) -> Result<()> {
    let mut rec = Recorder::start("loss-check", cli.root_seed());
    if a.eps.is_nan() || a.eps < 0.0 {
        bail!("clip eps must be non-negative");
    }
    rec.config("eps", &a.eps.to_string())?;
    rec.input(&a.batch)?;
    rec.input(&a.new_logprobs)?;
    let records: Vec<TrainingRecord> = read_jsonl(&a.batch)?;
    let new: Vec<Vec<f64>> = read_jsonl::<LogprobLine>(&a.new_logprobs)?
        .into_iter()
        .map(|l| match l {
            LogprobLine::Bare(v) | LogprobLine::Wrapped { logprobs: v } => v,
        })
        .collect();
    let loss = rlengine::surrogate_loss(&records, &new, a.eps)?;
    let out = a.out.clone().unwrap_or_else(|| sibling(&a.batch, ".loss.json"));
    let report = serde_json::json!({
        "records": records.len(),
        "clip_eps": a.eps.to_string(),
        "loss": loss,
    });
    rec.output(&out)?;
    fs::write(&out, serde_json::to_vec_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
    rec.finish(&out)?;
    println!("{loss}");
    Ok(())
}

/// `dir/name` + `suffix`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

#[derive(Args, Debug)]
pub struct StreamArgs {
    #[arg(long)]
    pub histories: PathBuf,
    /// Near-equal chunks per history; 1 is full-history inference.
    #[arg(long)]
    pub chunks: usize,
    #[arg(long)]
    pub generator: String,
    /// Holds `states.jsonl`; existing states are resumed.
    #[arg(long)]
    pub state_dir: PathBuf,
    #[arg(long, default_value = "None")]
    pub empty_marker: String,
}

pub fn stream_infer(cli: &Cli, a: &StreamArgs) -> Result<()> {
    let mut rec = Recorder::start("stream-infer", cli.root_seed());
    if a.chunks == 0 {
        bail!("--chunks must be positive");
    }
    rec.config("chunks", &a.chunks)?;
    rec.config("empty_marker", &a.empty_marker)?;
    let histories = read_histories(&a.histories, &mut rec)?;
    let state_file = a.state_dir.join(streamer::STATE_FILE);
    rec.input(&state_file)?;
    let saved = streamer::load_states(&a.state_dir)?;
    let generator = endpoint::connect(&a.generator, Role::Generator, &mut rec)?;
    let results = streamer::stream_all(&generator, &histories, &saved, a.chunks, &a.empty_marker, cli.jobs);

    let mut by_user: HashMap<String, StreamState> = saved.into_iter().map(|s| (s.user_id.clone(), s)).collect();
    let mut order: Vec<String> = histories.iter().map(|h| h.user_id.clone()).collect();
    let mut failures = 0;
    for (h, r) in histories.iter().zip(results) {
        match r {
            Ok(state) => {
                by_user.insert(h.user_id.clone(), state);
            }
            Err(e) => {
                failures += 1;
                log::warn!("user {}: {e}", h.user_id);
            }
        }
    }
    // states for users absent from this history file are kept as they were
    let mut rest: Vec<String> = by_user.keys().filter(|u| !order.contains(u)).cloned().collect();
    rest.sort();
    order.extend(rest);
    let states: Vec<StreamState> = order.iter().filter_map(|u| by_user.remove(u)).collect();
    streamer::save_states(&a.state_dir, &states)?;
    rec.output_in_place(&state_file);
    rec.finish(&state_file)?;
    log::info!("{} states written, {failures} users failed", states.len());
    if failures > 0 {
        bail!("{failures} of {} users failed; rerun to resume", histories.len());
    }
    Ok(())
}
