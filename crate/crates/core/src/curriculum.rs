//! Curriculum data pruning: score every `(prefix, next interaction)`
//! instance by tractability and learning potential, keep a calibrated slice,
//! and turn each user's surviving points into one two-step RL instance.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{InteractionTriple, UserHistory};
use crate::error::{Error, Result};

/// Default floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-6;

/// One row of the strong/weak score sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub user_id: String,
    pub index: u64,
    pub strong_p: f64,
    pub weak_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub user_id: String,
    pub index: u64,
    pub s_tract: f64,
    pub s_learn: f64,
}

/// Returns `(s_tract, s_learn)` for a strong/weak probability pair.
pub fn score_sample(strong_p: f64, weak_p: f64) -> Result<(f64, f64)> {
    for (name, p) in [("strong", strong_p), ("weak", weak_p)] {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Domain(format!(
                "{name} probability {p} outside (0, 1]"
            )));
        }
    }
    Ok((strong_p, strong_p.ln() - weak_p.ln()))
}

pub fn floor_prob(p: f64, eps: f64) -> f64 {
    p.max(eps).min(1.0)
}

impl SampleScore {
    /// Scores a sidecar row, flooring both probabilities at `eps`.
    pub fn from_row(row: &ScoreRow, eps: f64) -> Result<Self> {
        let (s_tract, s_learn) = score_sample(floor_prob(row.strong_p, eps), floor_prob(row.weak_p, eps))?;
        Ok(Self {
            user_id: row.user_id.clone(),
            index: row.index,
            s_tract,
            s_learn,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailSide {
    /// Highest tractability.
    Easiest,
    /// Lowest tractability.
    Hardest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub alpha: f64,
    pub tract_low: f64,
    pub tract_high: f64,
    #[serde(default = "one")]
    pub tail_fraction: f64,
    #[serde(default = "hardest")]
    pub tail_side: TailSide,
}

fn one() -> f64 {
    1.0
}

fn hardest() -> TailSide {
    TailSide::Hardest
}

impl PruneConfig {
    pub fn identity() -> Self {
        Self {
            alpha: 1.0,
            tract_low: 0.0,
            tract_high: 1.0,
            tail_fraction: 1.0,
            tail_side: TailSide::Hardest,
        }
    }

    pub fn amazon() -> Self {
        Self {
            alpha: 0.4,
            tract_low: 0.50,
            tract_high: 0.90,
            tail_fraction: 1.0,
            tail_side: TailSide::Hardest,
        }
    }

    pub fn mind() -> Self {
        Self {
            alpha: 0.1,
            tract_low: 0.99,
            tract_high: 1.00,
            tail_fraction: 1.0,
            tail_side: TailSide::Easiest,
        }
    }

    pub fn alignx() -> Self {
        Self {
            alpha: 0.1,
            tract_low: 0.98,
            tract_high: 1.00,
            tail_fraction: 1.0,
            tail_side: TailSide::Easiest,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return Err(Error::config(format!(
                "tail_fraction {} outside (0, 1]",
                self.tail_fraction
            )));
        }
        if self.tract_low > self.tract_high {
            return Err(Error::config(format!(
                "tract_low {} exceeds tract_high {}",
                self.tract_low, self.tract_high
            )));
        }
        Ok(())
    }
}

/// Per-dataset prune configuration table, as read from TOML:
///
/// ```toml
/// [datasets.Amazon]
/// alpha = 0.4
/// tract_low = 0.5
/// tract_high = 0.9
/// ```
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PruneTable {
    #[serde(default)]
    pub default: Option<PruneConfig>,
    #[serde(default)]
    pub datasets: BTreeMap<String, PruneConfig>,
}

impl PruneTable {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: PruneTable =
            toml::from_str(text).map_err(|e| Error::config(format!("prune config: {e}")))?;
        for cfg in table.datasets.values().chain(table.default.as_ref()) {
            cfg.validate()?;
        }
        Ok(table)
    }

    /// The three dataset rows used for RL sampling.
    pub fn reference() -> Self {
        let datasets = [
            ("Amazon", PruneConfig::amazon()),
            ("MIND", PruneConfig::mind()),
            ("AlignX", PruneConfig::alignx()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            default: None,
            datasets,
        }
    }

    pub fn get(&self, dataset: &str) -> Option<&PruneConfig> {
        self.datasets.get(dataset).or(self.default.as_ref())
    }
}

/// `ceil(fraction · n)`, tolerant of representation error in `fraction`.
fn keep_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let k = (raw - 1e-9).ceil().max(0.0) as usize;
    k.min(n)
}

/// Total order used for every cut: primary key descending, ties broken by
/// `(user_id, index)` so results do not depend on input order.
fn by_key_desc(key: impl Fn(&SampleScore) -> f64) -> impl Fn(&SampleScore, &SampleScore) -> Ordering {
    move |a, b| {
        key(b)
            .total_cmp(&key(a))
            .then_with(|| a.user_id.cmp(&b.user_id))
            .then_with(|| a.index.cmp(&b.index))
    }
}

/// Three-step filter: top `⌈α·N⌉` by learning potential, then the closed
/// tractability interval, then `⌈c·M⌉` survivors from the chosen tail.
/// Output is sorted by `(user_id, index)`.
pub fn prune(scores: &[SampleScore], cfg: &PruneConfig) -> Result<Vec<SampleScore>> {
    cfg.validate()?;
    if scores.is_empty() {
        return Err(Error::contract("prune needs at least one score"));
    }
    let mut ranked: Vec<SampleScore> = scores.to_vec();
    ranked.sort_by(by_key_desc(|s| s.s_learn));
    ranked.truncate(keep_count(cfg.alpha, scores.len()));

    ranked.retain(|s| s.s_tract >= cfg.tract_low && s.s_tract <= cfg.tract_high);

    let keep = keep_count(cfg.tail_fraction, ranked.len());
    match cfg.tail_side {
        TailSide::Easiest => ranked.sort_by(by_key_desc(|s| s.s_tract)),
        TailSide::Hardest => ranked.sort_by(by_key_desc(|s| -s.s_tract)),
    }
    ranked.truncate(keep);

    if ranked.is_empty() {
        log::info!("prune: no samples survive (alpha {}, interval [{}, {}])", cfg.alpha, cfg.tract_low, cfg.tract_high);
    }
    ranked.sort_by(|a, b| a.user_id.cmp(&b.user_id).then(a.index.cmp(&b.index)));
    Ok(ranked)
}

/// A two-step RL training instance `(H[0,k1), h_k1, H[k1,k2), h_k2)`.
/// `k1` and `k2` are triple `index` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlInstance {
    pub user_id: String,
    pub k1: u64,
    pub k2: u64,
    pub target1: InteractionTriple,
    pub target2: InteractionTriple,
}

/// The two hardest (lowest `s_tract`) surviving points of one user, ordered
/// by history index. Ties in tractability go to the earlier index. Returns
/// `None` when fewer than two points survive.
pub fn pick_indices(user_points: &[SampleScore]) -> Option<(u64, u64)> {
    if user_points.len() < 2 {
        return None;
    }
    let mut pts: Vec<&SampleScore> = user_points.iter().collect();
    pts.sort_by(|a, b| a.s_tract.total_cmp(&b.s_tract).then(a.index.cmp(&b.index)));
    let (a, b) = (pts[0].index, pts[1].index);
    Some((a.min(b), a.max(b)))
}

/// Builds the RL instance for one user, resolving both targets in `history`.
pub fn pick_rl_instance(user_points: &[SampleScore], history: &UserHistory) -> Result<Option<RlInstance>> {
    let Some((k1, k2)) = pick_indices(user_points) else {
        return Ok(None);
    };
    let lookup = |k: u64| {
        history.find_index(k).cloned().ok_or_else(|| {
            Error::validation(format!(
                "user {}: scored index {k} not in history",
                history.user_id
            ))
        })
    };
    Ok(Some(RlInstance {
        user_id: history.user_id.clone(),
        k1,
        k2,
        target1: lookup(k1)?,
        target2: lookup(k2)?,
    }))
}

/// Prunes each dataset separately with its configured row and emits one RL
/// instance per user with at least two surviving points.
pub fn build_instances(
    rows: &[ScoreRow],
    histories: &[UserHistory],
    table: &PruneTable,
    eps: f64,
) -> Result<Vec<RlInstance>> {
    let by_user: BTreeMap<&str, &UserHistory> =
        histories.iter().map(|h| (h.user_id.as_str(), h)).collect();
    let mut per_dataset: BTreeMap<&str, Vec<SampleScore>> = BTreeMap::new();
    for row in rows {
        let Some(h) = by_user.get(row.user_id.as_str()) else {
            log::warn!("score row for unknown user {}", row.user_id);
            continue;
        };
        per_dataset
            .entry(h.dataset_tag.as_str())
            .or_default()
            .push(SampleScore::from_row(row, eps)?);
    }
    let mut out = Vec::new();
    for (dataset, scores) in per_dataset {
        let cfg = table
            .get(dataset)
            .ok_or_else(|| Error::config(format!("no prune config for dataset {dataset:?}")))?;
        let kept = prune(&scores, cfg)?;
        log::info!("prune {dataset}: {} of {} samples kept", kept.len(), scores.len());
        let mut by_user_points: BTreeMap<&str, Vec<SampleScore>> = BTreeMap::new();
        for s in &kept {
            by_user_points.entry(s.user_id.as_str()).or_default().push(s.clone());
        }
        for (user, points) in by_user_points {
            if let Some(instance) = pick_rl_instance(&points, by_user[user])? {
                out.push(instance);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(index: u64, s_tract: f64) -> SampleScore {
        SampleScore {
            user_id: "u".into(),
            index,
            s_tract,
            s_learn: 0.0,
        }
    }

    #[test]
    fn score_examples() {
        let (t, l) = score_sample(0.9, 0.45).unwrap();
        assert_eq!(t, 0.9);
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert_eq!(score_sample(0.3, 0.3).unwrap().1, 0.0);
        assert!(score_sample(0.2, 0.6).unwrap().1 < 0.0);
        assert!(score_sample(0.0, 0.5).is_err());
        assert!(score_sample(0.5, 0.0).is_err());
        assert!(score_sample(1.2, 0.5).is_err());
        let row = ScoreRow {
            user_id: "u".into(),
            index: 1,
            strong_p: 0.0,
            weak_p: 0.5,
        };
        let s = SampleScore::from_row(&row, PROB_FLOOR).unwrap();
        assert_eq!(s.s_tract, PROB_FLOOR);
        assert!(s.s_learn.is_finite());
    }

    #[test]
    fn hardest_two_ordered_by_index() {
        let pts = [pt(12, 0.6), pt(4, 0.7), pt(20, 0.9)];
        assert_eq!(pick_indices(&pts), Some((4, 12)));
        assert_eq!(pick_indices(&pts[..1]), None);
        assert_eq!(pick_indices(&[]), None);
    }

    #[test]
    fn tractability_ties_prefer_earlier_index() {
        let pts = [pt(9, 0.5), pt(3, 0.5), pt(7, 0.5), pt(1, 0.8)];
        assert_eq!(pick_indices(&pts), Some((3, 7)));
        let mut rev = pts;
        rev.reverse();
        assert_eq!(pick_indices(&rev), Some((3, 7)));
    }

    #[test]
    fn identity_config_keeps_everything() {
        let scores: Vec<_> = (0..50)
            .map(|i| SampleScore {
                user_id: format!("u{}", i % 7),
                index: i,
                s_tract: (i as f64 * 0.37) % 1.0,
                s_learn: (i as f64 * 1.3).sin(),
            })
            .collect();
        let mut expected = scores.clone();
        expected.sort_by(|a, b| a.user_id.cmp(&b.user_id).then(a.index.cmp(&b.index)));
        assert_eq!(prune(&scores, &PruneConfig::identity()).unwrap(), expected);
    }

    #[test]
    fn closed_interval_bounds() {
        let scores = vec![pt(0, 0.99), pt(1, 1.0), pt(2, 0.985)];
        let cfg = PruneConfig {
            alpha: 1.0,
            ..PruneConfig::mind()
        };
        let kept: Vec<u64> = prune(&scores, &cfg).unwrap().iter().map(|s| s.index).collect();
        assert_eq!(kept, vec![0, 1]);
    }

    #[test]
    fn config_validation() {
        assert!(PruneConfig { alpha: 0.0, ..PruneConfig::amazon() }.validate().is_err());
        assert!(PruneConfig { tract_low: 0.95, ..PruneConfig::amazon() }.validate().is_err());
        assert!(PruneConfig { tail_fraction: 1.5, ..PruneConfig::amazon() }.validate().is_err());
        let t = PruneTable::from_toml_str(
            "[datasets.Amazon]\nalpha = 0.4\ntract_low = 0.5\ntract_high = 0.9\n",
        )
        .unwrap();
        assert_eq!(t.get("Amazon"), Some(&PruneConfig::amazon()));
        assert!(t.get("MIND").is_none());
    }

    #[test]
    fn keep_count_rounding() {
        assert_eq!(keep_count(0.1, 10_000), 1000);
        assert_eq!(keep_count(0.4, 10_000), 4000);
        assert_eq!(keep_count(0.4, 3), 2);
        assert_eq!(keep_count(1.0, 0), 0);
    }
}
