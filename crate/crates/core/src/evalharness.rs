//! Pairwise preference-prediction evaluation.
//!
//! Each instance is judged once from a single sampled reply: the judge sees
//! the user's summary and the two items in a seeded random order and answers
//! `{"selection": "Item A"}` or `{"selection": "Item B"}`. Unparsable replies
//! and backend failures count as incorrect.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::UserHistory;
use crate::error::{Error, Result};
use crate::modelio::parse::parse_selection;
use crate::modelio::{templates, Choice, Client};
use crate::transferbench::{EvalTarget, TransferInstance};
use crate::{par, seed, streamer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    /// Whose summary is used.
    pub user_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    pub item_a: String,
    pub item_b: String,
    pub truth: Choice,
}

impl EvalInstance {
    pub fn validate(&self) -> Result<()> {
        if self.item_a.is_empty() || self.item_b.is_empty() || self.item_a == self.item_b {
            return Err(Error::validation(format!(
                "user {}: evaluation items must be distinct and non-empty",
                self.user_id
            )));
        }
        Ok(())
    }
}

/// Instances from held-out targets; targets without a rejected item are
/// dropped.
pub fn instances_from_targets(targets: &[EvalTarget]) -> Vec<EvalInstance> {
    targets
        .iter()
        .filter_map(|t| {
            Some(EvalInstance {
                user_id: t.user_id.clone(),
                context: t.target.context.clone(),
                item_a: t.target.chosen.clone(),
                item_b: t.target.rejected.clone()?,
                truth: Choice::A,
            })
        })
        .collect()
}

/// Instances from swapped transfer targets, judged with the summary of the
/// history owner.
pub fn instances_from_transfer(instances: &[TransferInstance]) -> Vec<EvalInstance> {
    instances
        .iter()
        .filter_map(|t| {
            Some(EvalInstance {
                user_id: t.history_ref.clone(),
                context: t.target.context.clone(),
                item_a: t.target.chosen.clone(),
                item_b: t.target.rejected.clone()?,
                truth: Choice::A,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub dataset_tag: String,
    pub seed: u64,
    pub randomize_positions: bool,
    pub strict: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dataset_tag: "eval".into(),
            seed: 0,
            randomize_positions: true,
            strict: false,
        }
    }
}

/// The raw outcome of judging one instance, enough to re-score it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplyRecord {
    pub user_id: String,
    /// True when `item_b` was shown in the first slot.
    pub swapped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_tag: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub parse_failures: usize,
    pub backend_failures: usize,
    /// Share of parsed replies selecting the first-shown item.
    pub first_position_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub report: EvalReport,
    pub replies: Vec<ReplyRecord>,
}

fn judge_one(
    downstream: &Client,
    summary: Option<&str>,
    inst: &EvalInstance,
    position: usize,
    cfg: &EvalConfig,
) -> ReplyRecord {
    let swapped = cfg.randomize_positions
        && seed::derive(cfg.seed, &["eval", &inst.user_id, &position.to_string()]) & 1 == 1;
    let mut record = ReplyRecord {
        user_id: inst.user_id.clone(),
        swapped,
        reply: None,
        error: None,
    };
    let Some(summary) = summary else {
        record.error = Some("no summary for user".into());
        return record;
    };
    let (first, second) = if swapped {
        (&inst.item_b, &inst.item_a)
    } else {
        (&inst.item_a, &inst.item_b)
    };
    let prompt = templates::judge(
        inst.context.as_deref().unwrap_or(templates::NO_CONTEXT),
        summary,
        first,
        second,
    );
    match downstream.complete(&prompt, 0, false) {
        Ok(c) => record.reply = Some(c.text),
        Err(e) => {
            log::warn!("evaluation of {} failed: {e}", inst.user_id);
            record.error = Some(e.to_string());
        }
    }
    record
}

/// Scores stored replies; `evaluate_selection` reports exactly this.
pub fn rescore(dataset_tag: &str, instances: &[EvalInstance], replies: &[ReplyRecord], strict: bool) -> Result<EvalReport> {
    if instances.len() != replies.len() {
        return Err(Error::contract(format!(
            "{} instances but {} replies",
            instances.len(),
            replies.len()
        )));
    }
    let mut correct = 0;
    let mut parse_failures = 0;
    let mut backend_failures = 0;
    let mut parsed = 0;
    let mut first = 0;
    for (inst, r) in instances.iter().zip(replies) {
        let Some(reply) = &r.reply else {
            backend_failures += 1;
            continue;
        };
        let Some(shown) = parse_selection(reply, strict) else {
            parse_failures += 1;
            continue;
        };
        parsed += 1;
        if shown == Choice::A {
            first += 1;
        }
        let picked = if r.swapped { shown.other() } else { shown };
        if picked == inst.truth {
            correct += 1;
        }
    }
    let n = instances.len();
    Ok(EvalReport {
        dataset_tag: dataset_tag.to_string(),
        n,
        correct,
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        parse_failures,
        backend_failures,
        first_position_rate: if parsed == 0 { 0.0 } else { first as f64 / parsed as f64 },
    })
}

/// Judges every instance once with the summary of its user.
pub fn evaluate_selection(
    downstream: &Client,
    summaries: &HashMap<String, String>,
    instances: &[EvalInstance],
    cfg: &EvalConfig,
    jobs: usize,
) -> Result<EvalRun> {
    if instances.is_empty() {
        return Err(Error::contract("no evaluation instances"));
    }
    for inst in instances {
        inst.validate()?;
    }
    let positions: Vec<usize> = (0..instances.len()).collect();
    let replies = par::map(&positions, jobs, |&i| {
        let inst = &instances[i];
        judge_one(downstream, summaries.get(&inst.user_id).map(String::as_str), inst, i, cfg)
    });
    let report = rescore(&cfg.dataset_tag, instances, &replies, cfg.strict)?;
    Ok(EvalRun { report, replies })
}

pub fn format_table(rows: &[(&str, &EvalReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<20} {:>6} {:>8} {:>9} {:>7} {:>7} {:>7}",
        "protocol", "n", "correct", "accuracy", "parse", "failed", "first"
    );
    for (label, r) in rows {
        let _ = writeln!(
            out,
            "{:<20} {:>6} {:>8} {:>9.4} {:>7} {:>7} {:>7.3}",
            label, r.n, r.correct, r.accuracy, r.parse_failures, r.backend_failures, r.first_position_rate
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolComparison {
    pub full: EvalReport,
    pub streaming: EvalReport,
    pub chunks: usize,
    /// Users whose summary could not be produced, per protocol.
    pub full_failures: usize,
    pub streaming_failures: usize,
}

/// Summarizes each user from the full history and by streaming over
/// `chunks` chunks, then evaluates both summary sets on the same instances.
#[allow(clippy::too_many_arguments)]
pub fn compare_protocols(
    generator: &Client,
    downstream: &Client,
    histories: &[UserHistory],
    instances: &[EvalInstance],
    chunks: usize,
    empty_marker: &str,
    cfg: &EvalConfig,
    jobs: usize,
) -> Result<ProtocolComparison> {
    let full = par::map(histories, jobs, |h| streamer::infer_full(generator, h, empty_marker));
    let streaming = par::map(histories, jobs, |h| streamer::infer_streaming(generator, h, chunks, empty_marker));
    let mut full_map = HashMap::new();
    let mut full_failures = 0;
    for (h, r) in histories.iter().zip(full) {
        match r {
            Ok(s) => {
                full_map.insert(h.user_id.clone(), s.text);
            }
            Err(e) => {
                full_failures += 1;
                log::warn!("full-history inference for {} failed: {e}", h.user_id);
            }
        }
    }
    let mut stream_map = HashMap::new();
    let mut streaming_failures = 0;
    for (h, r) in histories.iter().zip(streaming) {
        match r {
            Ok(state) => {
                if let Some(s) = state.current {
                    stream_map.insert(h.user_id.clone(), s.text);
                }
            }
            Err(e) => {
                streaming_failures += 1;
                log::warn!("streaming inference for {} failed: {e}", h.user_id);
            }
        }
    }
    let full = evaluate_selection(downstream, &full_map, instances, cfg, jobs)?.report;
    let streaming = evaluate_selection(downstream, &stream_map, instances, cfg, jobs)?.report;
    Ok(ProtocolComparison {
        full,
        streaming,
        chunks,
        full_failures,
        streaming_failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(truth: Choice) -> EvalInstance {
        EvalInstance {
            user_id: "u".into(),
            context: None,
            item_a: "x".into(),
            item_b: "y".into(),
            truth,
        }
    }

    fn reply(text: &str, swapped: bool) -> ReplyRecord {
        ReplyRecord {
            user_id: "u".into(),
            swapped,
            reply: Some(text.into()),
            error: None,
        }
    }

    #[test]
    fn scoring_maps_positions_back() {
        let instances = vec![inst(Choice::A), inst(Choice::A), inst(Choice::B), inst(Choice::A)];
        let replies = vec![
            reply(r#"{"selection": "Item A"}"#, false),
            reply(r#"{"selection": "Item B"}"#, true),
            reply("I pick B", false),
            ReplyRecord {
                user_id: "u".into(),
                swapped: false,
                reply: None,
                error: Some("down".into()),
            },
        ];
        let r = rescore("t", &instances, &replies, true).unwrap();
        assert_eq!(r.n, 4);
        assert_eq!(r.correct, 2);
        assert_eq!(r.parse_failures, 1);
        assert_eq!(r.backend_failures, 1);
        assert!((r.accuracy - 0.5).abs() < 1e-12);
        assert!((r.first_position_rate - 0.5).abs() < 1e-12);
    }

    #[test]
    fn table_has_a_row_per_report() {
        let r = rescore("t", &[inst(Choice::A)], &[reply(r#"{"selection": "Item A"}"#, false)], false).unwrap();
        let t = format_table(&[("full", &r), ("streaming", &r)]);
        assert_eq!(t.lines().count(), 3);
        assert!(t.contains("1.0000"));
    }
}
