use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Subcommand};
use serde::Serialize;
use serde_json::Value;

use streampref::data::{read_jsonl, strip_negatives, write_jsonl, UserHistory};
use streampref::evalharness::{self, EvalConfig, EvalInstance, EvalReport, ReplyRecord};
use streampref::modelio::Role;
use streampref::simlab::{self, PopulationConfig};
use streampref::transferbench::{self, NoiseConfig, Provenance, TransferInstance};

use crate::manifest::Recorder;
use crate::stages::{read_histories, sibling};
use crate::{endpoint, Cli};

#[derive(Subcommand, Debug)]
pub enum TransferCommand {
    /// Match users across two corpora and swap their held-out targets.
    CrossDomain(CrossArgs),
    /// Inject a random donor's interactions into each history.
    MultiInterest(MultiArgs),
    /// Drop every rejected item from the histories.
    PositiveOnly(PositiveArgs),
}

#[derive(Args, Debug)]
pub struct CrossArgs {
    #[arg(long)]
    pub histories_a: PathBuf,
    #[arg(long)]
    pub histories_b: PathBuf,
    #[arg(long)]
    pub embedder: String,
    #[arg(long, default_value_t = 1000)]
    pub top_k: usize,
    /// Transfer instance file.
    #[arg(long)]
    pub out: PathBuf,
    /// Both corpora with their targets held out, for summary inference.
    #[arg(long)]
    pub out_histories: PathBuf,
}

#[derive(Args, Debug)]
pub struct MultiArgs {
    #[arg(long)]
    pub histories: PathBuf,
    /// Share of the fused history taken from the donor, in [0, 1).
    #[arg(long)]
    pub intensity: f64,
    /// Fused histories; provenance goes to `<out>.provenance.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    /// Hold out each user's last interaction before fusing and write it here.
    #[arg(long)]
    pub out_instances: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PositiveArgs {
    #[arg(long)]
    pub histories: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Hold out each user's last interaction (with its rejected item) first.
    #[arg(long)]
    pub out_instances: Option<PathBuf>,
}

pub fn build_transfer(cli: &Cli, cmd: &TransferCommand) -> Result<()> {
    match cmd {
        TransferCommand::CrossDomain(a) => cross_domain(cli, a),
        TransferCommand::MultiInterest(a) => multi_interest(cli, a),
        TransferCommand::PositiveOnly(a) => positive_only(cli, a),
    }
}

#[derive(Serialize)]
struct PairReport {
    pairs: Vec<transferbench::UserPair>,
    repeated_users: Vec<String>,
    skipped_pairs: usize,
}

fn cross_domain(cli: &Cli, a: &CrossArgs) -> Result<()> {
    let mut rec = Recorder::start("build-transfer cross-domain", cli.root_seed());
    rec.config("top_k", &a.top_k)?;
    let hist_a = read_histories(&a.histories_a, &mut rec)?;
    let hist_b = read_histories(&a.histories_b, &mut rec)?;
    let embedder = endpoint::connect(&a.embedder, Role::Embedder, &mut rec)?;
    let (kept_a, targets_a) = transferbench::hold_out_last(&hist_a);
    let (kept_b, targets_b) = transferbench::hold_out_last(&hist_b);
    // users are matched on what the summarizer will see
    let matched = transferbench::match_users(&embedder, &kept_a, &kept_b, a.top_k, cli.jobs)?;
    if !matched.repeated_users.is_empty() {
        log::warn!("{} users appear in more than one pair", matched.repeated_users.len());
    }
    let swapped = transferbench::swap_targets(&matched.pairs, &targets_a, &targets_b);
    log::info!(
        "{} pairs, {} instances, {} pairs skipped",
        matched.pairs.len(),
        swapped.instances.len(),
        swapped.skipped_pairs
    );
    let pairs_path = sibling(&a.out, ".pairs.json");
    for p in [&a.out, &a.out_histories, &pairs_path] {
        rec.output(p)?;
    }
    write_jsonl(&a.out, &swapped.instances)?;
    let combined: Vec<UserHistory> = kept_a.into_iter().chain(kept_b).collect();
    write_jsonl(&a.out_histories, &combined)?;
    let report = PairReport {
        pairs: matched.pairs,
        repeated_users: matched.repeated_users,
        skipped_pairs: swapped.skipped_pairs,
    };
    write_json(&pairs_path, &report)?;
    rec.finish(&a.out)?;
    Ok(())
}

/// Holds out the last interaction when `out_instances` is set.
fn maybe_hold_out(
    histories: Vec<UserHistory>,
    out_instances: Option<&Path>,
    rec: &mut Recorder,
) -> Result<Vec<UserHistory>> {
    let Some(path) = out_instances else {
        return Ok(histories);
    };
    let (kept, targets) = transferbench::hold_out_last(&histories);
    let instances = evalharness::instances_from_targets(&targets);
    rec.output(path)?;
    write_jsonl(path, &instances)?;
    Ok(kept)
}

#[derive(Serialize)]
struct ProvenanceRow<'a> {
    user_id: &'a str,
    provenance: &'a [Provenance],
}

fn multi_interest(cli: &Cli, a: &MultiArgs) -> Result<()> {
    let mut rec = Recorder::start("build-transfer multi-interest", cli.root_seed());
    let cfg = NoiseConfig {
        intensity: a.intensity,
        seed: cli.seed_for("multi-interest"),
    };
    cfg.validate()?;
    rec.config("noise", &cfg)?;
    let histories = read_histories(&a.histories, &mut rec)?;
    let histories = maybe_hold_out(histories, a.out_instances.as_deref(), &mut rec)?;
    let fused = transferbench::build_multi_interest(&histories, &cfg)?;
    let prov_path = sibling(&a.out, ".provenance.jsonl");
    rec.output(&a.out)?;
    rec.output(&prov_path)?;
    let out: Vec<&UserHistory> = fused.iter().map(|f| &f.history).collect();
    write_jsonl(&a.out, &out)?;
    let prov: Vec<ProvenanceRow> = fused
        .iter()
        .map(|f| ProvenanceRow {
            user_id: &f.history.user_id,
            provenance: &f.provenance,
        })
        .collect();
    write_jsonl(&prov_path, &prov)?;
    rec.finish(&a.out)?;
    Ok(())
}

fn positive_only(cli: &Cli, a: &PositiveArgs) -> Result<()> {
    let mut rec = Recorder::start("build-transfer positive-only", cli.root_seed());
    let histories = read_histories(&a.histories, &mut rec)?;
    let histories = maybe_hold_out(histories, a.out_instances.as_deref(), &mut rec)?;
    let stripped: Vec<UserHistory> = histories.iter().map(strip_negatives).collect();
    rec.output(&a.out)?;
    write_jsonl(&a.out, &stripped)?;
    rec.finish(&a.out)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// JSONL rows with `user_id` and `summary`: a string, a summary object
    /// with `text`, or null. Stream state files qualify.
    #[arg(long)]
    pub summaries: PathBuf,
    /// Evaluation or transfer instances, JSONL.
    #[arg(long)]
    pub instances: PathBuf,
    #[arg(long, required_unless_present = "replies")]
    pub downstream: Option<String>,
    /// Re-score stored replies instead of querying a backend.
    #[arg(long, conflicts_with = "downstream")]
    pub replies: Option<PathBuf>,
    /// Report JSON; raw replies go to `<out>.replies.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "eval")]
    pub dataset_tag: String,
    /// Always show the true choice first.
    #[arg(long)]
    pub fixed_positions: bool,
    /// Accept only the bare selection JSON.
    #[arg(long)]
    pub strict: bool,
}

fn load_summaries(path: &Path) -> Result<HashMap<String, String>> {
    let rows: Vec<Value> = read_jsonl(path)?;
    let mut out = HashMap::new();
    for (i, row) in rows.iter().enumerate() {
        let user = row
            .get("user_id")
            .and_then(Value::as_str)
            .ok_or_else(|| anyhow!("{} line {}: missing user_id", path.display(), i + 1))?;
        let text = match row.get("summary") {
            Some(Value::String(s)) => Some(s.as_str()),
            Some(Value::Object(o)) => o.get("text").and_then(Value::as_str),
            Some(Value::Null) | None => None,
            Some(_) => bail!("{} line {}: summary must be a string or object", path.display(), i + 1),
        };
        if let Some(t) = text {
            out.insert(user.to_string(), t.to_string());
        }
    }
    Ok(out)
}

fn load_instances(path: &Path) -> Result<Vec<EvalInstance>> {
    let rows: Vec<Value> = read_jsonl(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        let ctx = || format!("{} line {}", path.display(), i + 1);
        if row.get("history_ref").is_some() {
            let t: TransferInstance = serde_json::from_value(row).with_context(ctx)?;
            out.extend(evalharness::instances_from_transfer(&[t]));
        } else {
            out.push(serde_json::from_value(row).with_context(ctx)?);
        }
    }
    Ok(out)
}

pub fn evaluate(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let mut rec = Recorder::start("evaluate", cli.root_seed());
    let cfg = EvalConfig {
        dataset_tag: a.dataset_tag.clone(),
        seed: cli.seed_for("evaluate"),
        randomize_positions: !a.fixed_positions,
        strict: a.strict,
    };
    rec.config("eval", &cfg)?;
    rec.input(&a.summaries)?;
    rec.input(&a.instances)?;
    let instances = load_instances(&a.instances)?;
    let replies_path = sibling(&a.out, ".replies.jsonl");
    let report: EvalReport = match (&a.replies, &a.downstream) {
        (Some(stored), _) => {
            rec.input(stored)?;
            let replies: Vec<ReplyRecord> = read_jsonl(stored)?;
            evalharness::rescore(&cfg.dataset_tag, &instances, &replies, cfg.strict)?
        }
        (None, Some(target)) => {
            let summaries = load_summaries(&a.summaries)?;
            let downstream = endpoint::connect(target, Role::Judge, &mut rec)?;
            let run = evalharness::evaluate_selection(&downstream, &summaries, &instances, &cfg, cli.jobs)?;
            rec.output(&replies_path)?;
            write_jsonl(&replies_path, &run.replies)?;
            run.report
        }
        (None, None) => unreachable!("clap requires one of --downstream and --replies"),
    };
    rec.output(&a.out)?;
    write_json(&a.out, &report)?;
    rec.finish(&a.out)?;
    print!("{}", evalharness::format_table(&[(&a.dataset_tag, &report)]));
    Ok(())
}

#[derive(Args, Debug)]
pub struct SimlabArgs {
    /// Receives histories, truth, scores, heldout and instances JSONL files.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub users: usize,
    #[arg(long, default_value_t = simlab::DEFAULT_DIM)]
    pub dim: usize,
    #[arg(long, default_value_t = 24)]
    pub history_len: usize,
    #[arg(long, default_value_t = simlab::DEFAULT_MARGIN)]
    pub margin: f64,
    #[arg(long, default_value = "simlab")]
    pub dataset_tag: String,
    #[arg(long, default_value = "sim")]
    pub id_prefix: String,
}

pub fn simlab_gen(cli: &Cli, a: &SimlabArgs) -> Result<()> {
    let mut rec = Recorder::start("simlab-gen", cli.root_seed());
    let cfg = PopulationConfig {
        seed: cli.seed_for("simlab-gen"),
        n_users: a.users,
        dim: a.dim,
        history_len: a.history_len,
        pair_margin: a.margin,
        dataset_tag: a.dataset_tag.clone(),
        id_prefix: a.id_prefix.clone(),
    };
    rec.config("population", &cfg)?;
    let pop = simlab::gen_population(&cfg)?;
    let scores = simlab::simulate_scores(&pop, cli.seed_for("simlab-scores"));
    let (heldout, targets) = transferbench::hold_out_last(&pop.histories);
    let instances = evalharness::instances_from_targets(&targets);

    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let path = |name: &str| a.out_dir.join(name);
    let histories_path = path("histories.jsonl");
    let files = [
        histories_path.clone(),
        path("truth.jsonl"),
        path("scores.jsonl"),
        path("heldout.jsonl"),
        path("instances.jsonl"),
    ];
    for f in &files {
        rec.output(f)?;
    }
    write_jsonl(&files[0], &pop.histories)?;
    write_jsonl(&files[1], &pop.truth)?;
    write_jsonl(&files[2], &scores)?;
    write_jsonl(&files[3], &heldout)?;
    write_jsonl(&files[4], &instances)?;
    rec.finish(&histories_path)?;
    log::info!("{} users, {} score rows", pop.histories.len(), scores.len());
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
