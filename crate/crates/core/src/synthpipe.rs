//! Generate / validate / merge synthesis of SFT preference summaries.
//!
//! Per user segment: pick tractable target interactions, generate one
//! target-anchored candidate summary per target (targets shown unlabeled),
//! keep the candidates a judge can use to recover the user's actual choice,
//! merge the survivors, and accept the merged summary only if it predicts
//! at least a `λ` fraction of the targets. Segments are chained so later
//! records are incremental updates of the previous accepted summary.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{even_boundaries, segment, HistorySegment, InteractionTriple, PreferenceSummary, UserHistory};
use crate::error::{Error, Result};
use crate::modelio::templates;
use crate::modelio::Client;
use crate::{par, seed};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub tau_tract: f64,
    pub max_targets: usize,
    /// Users whose tractable subset has at most this many triples are skipped.
    pub min_subset: usize,
    /// Minimum consistent candidates after preference-level filtering.
    pub min_kept: usize,
    pub lambda: f64,
    pub min_per_segment: usize,
    pub num_segments: usize,
    /// Explicit positional boundaries; overrides `num_segments`.
    pub boundaries: Option<Vec<usize>>,
    pub seed: u64,
    pub empty_marker: String,
    pub debias: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            tau_tract: 0.9,
            max_targets: 5,
            min_subset: 3,
            min_kept: 3,
            lambda: 0.8,
            min_per_segment: 3,
            num_segments: 3,
            boundaries: None,
            seed: 0,
            empty_marker: "None".into(),
            debias: true,
        }
    }
}

impl SynthConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SynthConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("synthesis config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_targets == 0 || self.min_kept == 0 || self.num_segments == 0 {
            return Err(Error::config("max_targets, min_kept and num_segments must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda) || !(0.0..=1.0).contains(&self.tau_tract) {
            return Err(Error::config("lambda and tau_tract must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum SkipReason {
    SegmentTooShort { segment: usize, len: usize },
    TooFewTractable { size: usize },
    AllCandidatesFailed,
    TooFewConsistent { kept: usize },
    MergeFailed,
    BelowLambda { accuracy: f64 },
}

impl SkipReason {
    pub fn label(&self) -> &'static str {
        match self {
            SkipReason::SegmentTooShort { .. } => "segment_too_short",
            SkipReason::TooFewTractable { .. } => "too_few_tractable",
            SkipReason::AllCandidatesFailed => "all_candidates_failed",
            SkipReason::TooFewConsistent { .. } => "too_few_consistent",
            SkipReason::MergeFailed => "merge_failed",
            SkipReason::BelowLambda { .. } => "below_lambda",
        }
    }
}

/// Stage outcome: a user-skip is an expected result, not a failure.
#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("user skipped: {0:?}")]
    Skip(SkipReason),
    #[error(transparent)]
    Fatal(#[from] Error),
}

pub type SynthResult<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSet {
    pub segment: HistorySegment,
    pub targets: Vec<InteractionTriple>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileCandidate {
    pub target_index: u64,
    pub reasoning: Option<String>,
    pub summary: String,
    pub validated: bool,
}

/// One accepted SFT example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub user_id: String,
    pub segment: HistorySegment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_id: Option<String>,
    pub summary_id: String,
    pub reasoning: String,
    pub summary: String,
    pub accuracy: f64,
}

/// Tractability sidecar row; accepts `strong_p` rows from the pruning sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TractRow {
    pub user_id: String,
    pub index: u64,
    #[serde(alias = "strong_p")]
    pub s_tract: f64,
}

/// Samples up to `max_targets` targets uniformly without replacement from the
/// triples with `S_tract ≥ τ`. Skips the user when that subset has at most
/// `min_subset` members.
pub fn select_targets(
    history: &UserHistory,
    seg: HistorySegment,
    scores: &HashMap<u64, f64>,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> SynthResult<TargetSet> {
    let mut tractable = Vec::new();
    for t in history.slice(seg)? {
        let s = scores.get(&t.index).ok_or_else(|| {
            Error::contract(format!(
                "user {}: no tractability score for index {}",
                history.user_id, t.index
            ))
        })?;
        if *s >= cfg.tau_tract {
            tractable.push(t);
        }
    }
    if tractable.len() <= cfg.min_subset {
        return Err(SynthError::Skip(SkipReason::TooFewTractable {
            size: tractable.len(),
        }));
    }
    let n = cfg.max_targets.min(tractable.len());
    let mut picked: Vec<usize> = sample(rng, tractable.len(), n).into_vec();
    picked.sort_unstable();
    Ok(TargetSet {
        segment: seg,
        targets: picked.into_iter().map(|i| tractable[i].clone()).collect(),
    })
}

/// Renders the target-aware generation prompt. Targets are held out of the
/// history block and shown only as context plus two unlabeled candidates in
/// a seeded order.
pub fn render_target_prompt(
    client: &Client,
    history: &UserHistory,
    targets: &TargetSet,
    target: &InteractionTriple,
    prior: Option<&PreferenceSummary>,
    cfg: &SynthConfig,
) -> Result<String> {
    let held_out: HashSet<u64> = targets.targets.iter().map(|t| t.index).collect();
    let visible = history
        .slice(targets.segment)?
        .iter()
        .filter(|t| !held_out.contains(&t.index));
    let history_text = templates::render_triples(visible);
    let past = prior.map_or(cfg.empty_marker.as_str(), |p| p.text.as_str());
    let other = target.rejected.as_deref().unwrap_or(templates::NO_CONTEXT);
    let chosen_first = seed::derive(cfg.seed, &["order", &history.user_id, &target.index.to_string()]) & 1 == 0;
    let (first, second) = if chosen_first {
        (target.chosen.as_str(), other)
    } else {
        (other, target.chosen.as_str())
    };
    Ok(client.render_fitted(&history_text, |h| {
        templates::target_generation(past, h, target.context.as_deref(), first, second)
    }))
}

/// One candidate per target. Failed generations are dropped; the user is
/// skipped when none survive.
pub fn generate_candidates(
    generator: &Client,
    history: &UserHistory,
    targets: &TargetSet,
    prior: Option<&PreferenceSummary>,
    cfg: &SynthConfig,
) -> SynthResult<Vec<ProfileCandidate>> {
    let mut out = Vec::with_capacity(targets.targets.len());
    for target in &targets.targets {
        let prompt = render_target_prompt(generator, history, targets, target, prior, cfg)?;
        match generator.generate(&prompt, 0) {
            Ok(g) => out.push(ProfileCandidate {
                target_index: target.index,
                reasoning: g.reasoning,
                summary: g.summary,
                validated: false,
            }),
            Err(e) => {
                generator.telemetry().incr("candidates_dropped");
                log::warn!("user {}: candidate for target {} dropped: {e}", history.user_id, target.index);
            }
        }
    }
    if out.is_empty() {
        return Err(SynthError::Skip(SkipReason::AllCandidatesFailed));
    }
    Ok(out)
}

/// Whether `summary` leads the judge to the user's actual choice. Without
/// debiasing the display order is seeded per target.
pub fn predicts_choice(
    judge: &Client,
    summary: &str,
    target: &InteractionTriple,
    debias: bool,
    order_seed: u64,
) -> Result<bool> {
    let rejected = target.rejected.as_deref().ok_or_else(|| {
        Error::contract(format!("target {} has no rejected item to judge against", target.index))
    })?;
    let chosen_first = debias || order_seed & 1 == 0;
    let (a, b) = if chosen_first {
        (target.chosen.as_str(), rejected)
    } else {
        (rejected, target.chosen.as_str())
    };
    let v = judge.judge_pair(summary, target.context.as_deref(), a, b, debias)?;
    let p_chosen = if chosen_first { v.prob_first } else { 1.0 - v.prob_first };
    Ok(p_chosen > 0.5)
}

fn judged(judge: &Client, summary: &str, target: &InteractionTriple, cfg: &SynthConfig, user: &str) -> bool {
    let order_seed = seed::derive(cfg.seed, &["judge-order", user, &target.index.to_string()]);
    match predicts_choice(judge, summary, target, cfg.debias, order_seed) {
        Ok(ok) => ok,
        Err(e) => {
            judge.telemetry().incr("judge_errors");
            log::warn!("user {user}: judge failed on target {}: {e}", target.index);
            false
        }
    }
}

/// Keeps exactly the candidates whose summary predicts their own target.
pub fn validate_candidates(
    judge: &Client,
    user_id: &str,
    candidates: Vec<ProfileCandidate>,
    targets: &TargetSet,
    cfg: &SynthConfig,
) -> SynthResult<Vec<ProfileCandidate>> {
    let by_index: HashMap<u64, &InteractionTriple> =
        targets.targets.iter().map(|t| (t.index, t)).collect();
    let mut kept = Vec::new();
    for mut c in candidates {
        let target = by_index.get(&c.target_index).ok_or_else(|| {
            Error::contract(format!("candidate for unknown target {}", c.target_index))
        })?;
        if judged(judge, &c.summary, target, cfg, user_id) {
            c.validated = true;
            kept.push(c);
        }
    }
    if kept.len() < cfg.min_kept {
        return Err(SynthError::Skip(SkipReason::TooFewConsistent { kept: kept.len() }));
    }
    Ok(kept)
}

/// Merges the consistent candidates (summaries and their reasonings) into a
/// single summary. Returns `(reasoning, summary)`.
pub fn merge_profiles(merger: &Client, kept: &[ProfileCandidate]) -> SynthResult<(Option<String>, String)> {
    if kept.is_empty() {
        return Err(Error::contract("merge needs at least one candidate").into());
    }
    let pairs: Vec<(Option<&str>, &str)> = kept
        .iter()
        .map(|c| (c.reasoning.as_deref(), c.summary.as_str()))
        .collect();
    let prompt = templates::merge(&pairs);
    match merger.generate(&prompt, 0) {
        Ok(g) => Ok((g.reasoning, g.summary)),
        Err(e) => {
            log::warn!("merge failed: {e}");
            Err(SynthError::Skip(SkipReason::MergeFailed))
        }
    }
}

/// Accepts iff `correct / n ≥ λ`.
pub fn accepts(correct: usize, n: usize, lambda: f64) -> bool {
    n > 0 && correct as f64 / n as f64 + 1e-12 >= lambda
}

/// Fraction of validation targets the merged summary predicts; skips the
/// user when it falls below `λ`. Judge errors count as incorrect.
pub fn user_level_filter(
    judge: &Client,
    user_id: &str,
    merged: &str,
    validation: &[InteractionTriple],
    cfg: &SynthConfig,
) -> SynthResult<f64> {
    if validation.is_empty() {
        return Err(Error::contract("user-level filter needs validation targets").into());
    }
    let correct = validation
        .iter()
        .filter(|t| judged(judge, merged, t, cfg, user_id))
        .count();
    let accuracy = correct as f64 / validation.len() as f64;
    if accepts(correct, validation.len(), cfg.lambda) {
        Ok(accuracy)
    } else {
        Err(SynthError::Skip(SkipReason::BelowLambda { accuracy }))
    }
}

/// The three endpoints the synthesizer talks to.
#[derive(Debug, Clone)]
pub struct SynthClients {
    pub generator: Client,
    pub judge: Client,
    pub merger: Client,
}

/// Runs all four stages on one segment.
pub fn synthesize_segment(
    clients: &SynthClients,
    history: &UserHistory,
    seg: HistorySegment,
    seg_no: usize,
    prior: Option<&PreferenceSummary>,
    scores: &HashMap<u64, f64>,
    cfg: &SynthConfig,
) -> SynthResult<(SynthRecord, PreferenceSummary)> {
    let mut rng = seed::rng(cfg.seed, &["synth", &history.user_id, &seg_no.to_string()]);
    let targets = select_targets(history, seg, scores, cfg, &mut rng)?;
    let candidates = generate_candidates(&clients.generator, history, &targets, prior, cfg)?;
    let kept = validate_candidates(&clients.judge, &history.user_id, candidates, &targets, cfg)?;
    let (reasoning, merged) = merge_profiles(&clients.merger, &kept)?;
    // validation targets are the full target set
    let accuracy = user_level_filter(&clients.judge, &history.user_id, &merged, &targets.targets, cfg)?;
    let token_count = clients.merger.counter().count(&merged);
    let summary = PreferenceSummary::new(merged.clone(), reasoning.clone(), prior, seg, token_count)?;
    let record = SynthRecord {
        user_id: history.user_id.clone(),
        segment: seg,
        prior_text: prior.map(|p| p.text.clone()),
        prior_id: prior.map(|p| p.id.clone()),
        summary_id: summary.id.clone(),
        reasoning: reasoning.unwrap_or_default(),
        summary: merged,
        accuracy,
    };
    Ok((record, summary))
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserSynthesis {
    pub records: Vec<SynthRecord>,
    /// Segment number and reason when the chain stopped early.
    pub skipped: Option<(usize, SkipReason)>,
}

pub fn segments_for(history: &UserHistory, cfg: &SynthConfig) -> Result<Vec<HistorySegment>> {
    let boundaries = match &cfg.boundaries {
        Some(b) => b.clone(),
        None => even_boundaries(history.len(), cfg.num_segments)?,
    };
    segment(history, &boundaries)
}

/// Streaming SFT data for one user: the first segment is summarized from
/// scratch, each later one updates the previous accepted summary. A skip
/// aborts the remaining segments.
pub fn build_streaming_sft(
    clients: &SynthClients,
    history: &UserHistory,
    scores: &HashMap<u64, f64>,
    cfg: &SynthConfig,
) -> Result<UserSynthesis> {
    let segments = match segments_for(history, cfg) {
        Ok(s) => s,
        Err(Error::Validation(msg)) => {
            log::info!("user {}: cannot segment ({msg})", history.user_id);
            return Ok(UserSynthesis {
                records: Vec::new(),
                skipped: Some((0, SkipReason::SegmentTooShort { segment: 0, len: history.len() })),
            });
        }
        Err(e) => return Err(e),
    };
    if let Some((i, s)) = segments.iter().enumerate().find(|(_, s)| s.len() < cfg.min_per_segment) {
        return Ok(UserSynthesis {
            records: Vec::new(),
            skipped: Some((i, SkipReason::SegmentTooShort { segment: i, len: s.len() })),
        });
    }
    let mut records = Vec::new();
    let mut prior: Option<PreferenceSummary> = None;
    for (i, seg) in segments.into_iter().enumerate() {
        match synthesize_segment(clients, history, seg, i, prior.as_ref(), scores, cfg) {
            Ok((record, summary)) => {
                records.push(record);
                prior = Some(summary);
            }
            Err(SynthError::Skip(reason)) => {
                clients.generator.telemetry().incr(reason.label());
                return Ok(UserSynthesis {
                    records,
                    skipped: Some((i, reason)),
                });
            }
            Err(SynthError::Fatal(e)) => return Err(e),
        }
    }
    Ok(UserSynthesis { records, skipped: None })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthStats {
    pub users: usize,
    pub records: usize,
    pub users_fully_accepted: usize,
    pub skips: BTreeMap<String, usize>,
}

/// Synthesizes every user concurrently; output order follows input order.
pub fn run_synthesis(
    clients: &SynthClients,
    histories: &[UserHistory],
    scores: &[TractRow],
    cfg: &SynthConfig,
    jobs: usize,
) -> Result<(Vec<SynthRecord>, SynthStats)> {
    cfg.validate()?;
    let mut by_user: HashMap<&str, HashMap<u64, f64>> = HashMap::new();
    for row in scores {
        by_user.entry(row.user_id.as_str()).or_default().insert(row.index, row.s_tract);
    }
    let empty = HashMap::new();
    let results = par::map(histories, jobs, |h| {
        build_streaming_sft(clients, h, by_user.get(h.user_id.as_str()).unwrap_or(&empty), cfg)
    });
    let mut stats = SynthStats {
        users: histories.len(),
        ..Default::default()
    };
    let mut records = Vec::new();
    for r in results {
        let user = r?;
        match &user.skipped {
            Some((_, reason)) => *stats.skips.entry(reason.label().to_string()).or_default() += 1,
            None => stats.users_fully_accepted += 1,
        }
        records.extend(user.records);
    }
    stats.records = records.len();
    Ok((records, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn history(n: usize) -> UserHistory {
        let triples = (0..n)
            .map(|i| InteractionTriple::new(i as u64, None, format!("p{i}"), Some(format!("n{i}"))).unwrap())
            .collect();
        UserHistory::new("u", "t", triples).unwrap()
    }

    fn scores(values: &[f64]) -> HashMap<u64, f64> {
        values.iter().enumerate().map(|(i, s)| (i as u64, *s)).collect()
    }

    #[test]
    fn five_of_seven_tractable() {
        let h = history(10);
        let sc = scores(&[0.95, 0.2, 0.9, 0.91, 0.5, 0.99, 1.0, 0.93, 0.1, 0.3]);
        let seg = HistorySegment::new(0, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = select_targets(&h, seg, &sc, &SynthConfig::default(), &mut rng).unwrap();
        assert_eq!(t.targets.len(), 5);
        let tractable = [0u64, 2, 3, 5, 6, 7];
        assert!(t.targets.iter().all(|x| tractable.contains(&x.index)));
        let idx: Vec<u64> = t.targets.iter().map(|x| x.index).collect();
        let mut sorted = idx.clone();
        sorted.dedup();
        assert_eq!(idx.len(), sorted.len());
    }

    #[test]
    fn threshold_is_inclusive_and_small_subsets_skip() {
        let h = history(6);
        let seg = HistorySegment::new(0, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sc = scores(&[0.9, 0.9, 0.9, 0.1, 0.1, 0.1]);
        let r = select_targets(&h, seg, &sc, &SynthConfig::default(), &mut rng);
        assert!(matches!(r, Err(SynthError::Skip(SkipReason::TooFewTractable { size: 3 }))));
        let sc = scores(&[0.9, 0.9, 0.9, 0.9, 0.1, 0.1]);
        let t = select_targets(&h, seg, &sc, &SynthConfig::default(), &mut rng).unwrap();
        assert_eq!(t.targets.len(), 4);
    }

    #[test]
    fn whole_segment_when_all_tractable() {
        let h = history(6);
        let seg = HistorySegment::new(0, 6).unwrap();
        let cfg = SynthConfig {
            max_targets: 10,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = select_targets(&h, seg, &scores(&[1.0; 6]), &cfg, &mut rng).unwrap();
        assert_eq!(t.targets, h.triples);
    }

    #[test]
    fn missing_score_is_fatal() {
        let h = history(6);
        let seg = HistorySegment::new(0, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = select_targets(&h, seg, &scores(&[1.0; 5]), &SynthConfig::default(), &mut rng);
        assert!(matches!(r, Err(SynthError::Fatal(_))));
    }

    #[test]
    fn lambda_bound_is_inclusive() {
        assert!(accepts(4, 5, 0.8));
        assert!(accepts(8, 10, 0.8));
        assert!(accepts(5, 5, 0.8));
        assert!(!accepts(3, 5, 0.8));
        assert!(!accepts(0, 0, 0.0));
    }

    #[test]
    fn tract_rows_accept_strong_p() {
        let r: TractRow = serde_json::from_str(r#"{"user_id":"u","index":3,"strong_p":0.7,"weak_p":0.2}"#).unwrap();
        assert_eq!(r.s_tract, 0.7);
        let r: TractRow = serde_json::from_str(r#"{"user_id":"u","index":3,"s_tract":0.9}"#).unwrap();
        assert_eq!(r.s_tract, 0.9);
    }
}
