//! Transfer-evaluation builders: cross-domain target swapping between
//! embedding-matched users, and multi-interest noise injection.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{InteractionTriple, UserHistory};
use crate::error::{Error, Result};
use crate::modelio::{templates, Client};
use crate::{par, seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserPair {
    pub user_a: String,
    pub user_b: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<UserPair>,
    /// Users appearing in more than one selected pair.
    pub repeated_users: Vec<String>,
}

/// Text used to embed a user: the interaction-history block of the
/// generation prompt.
pub fn history_text(history: &UserHistory) -> String {
    templates::render_triples(&history.triples)
}

pub fn embed_corpus(embedder: &Client, histories: &[UserHistory], jobs: usize) -> Result<Vec<Vec<f64>>> {
    par::map(histories, jobs, |h| embedder.embed(&history_text(h)))
        .into_iter()
        .collect()
}

/// All `A × B` pairs ranked by similarity (ties broken by user ids), top `k`.
pub fn rank_pairs(
    ids_a: &[&str],
    emb_a: &[Vec<f64>],
    ids_b: &[&str],
    emb_b: &[Vec<f64>],
    top_k: usize,
) -> Vec<UserPair> {
    let mut pairs = Vec::with_capacity(ids_a.len() * ids_b.len());
    for (ua, ea) in ids_a.iter().zip(emb_a) {
        for (ub, eb) in ids_b.iter().zip(emb_b) {
            pairs.push(UserPair {
                user_a: ua.to_string(),
                user_b: ub.to_string(),
                similarity: ea.iter().zip(eb).map(|(x, y)| x * y).sum(),
            });
        }
    }
    pairs.sort_by(|x, y| {
        y.similarity
            .total_cmp(&x.similarity)
            .then_with(|| x.user_a.cmp(&y.user_a))
            .then_with(|| x.user_b.cmp(&y.user_b))
    });
    pairs.truncate(top_k);
    pairs
}

pub fn match_users(
    embedder: &Client,
    histories_a: &[UserHistory],
    histories_b: &[UserHistory],
    top_k: usize,
    jobs: usize,
) -> Result<MatchResult> {
    if histories_a.is_empty() || histories_b.is_empty() {
        return Err(Error::contract("both corpora must be non-empty"));
    }
    if top_k == 0 {
        return Err(Error::contract("top_k must be positive"));
    }
    let emb_a = embed_corpus(embedder, histories_a, jobs)?;
    let emb_b = embed_corpus(embedder, histories_b, jobs)?;
    let ids_a: Vec<&str> = histories_a.iter().map(|h| h.user_id.as_str()).collect();
    let ids_b: Vec<&str> = histories_b.iter().map(|h| h.user_id.as_str()).collect();
    let pairs = rank_pairs(&ids_a, &emb_a, &ids_b, &emb_b, top_k);
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &pairs {
        *seen.entry(p.user_a.as_str()).or_default() += 1;
        *seen.entry(p.user_b.as_str()).or_default() += 1;
    }
    let repeated_users = seen
        .into_iter()
        .filter(|(_, n)| *n > 1)
        .map(|(u, _)| u.to_string())
        .collect();
    Ok(MatchResult { pairs, repeated_users })
}

/// A user's held-out evaluation target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTarget {
    pub user_id: String,
    pub target: InteractionTriple,
}

/// Holds out the last interaction of each history as its evaluation target.
/// Histories with a single interaction are returned unchanged with no target.
pub fn hold_out_last(histories: &[UserHistory]) -> (Vec<UserHistory>, Vec<EvalTarget>) {
    let mut kept = Vec::with_capacity(histories.len());
    let mut targets = Vec::new();
    for h in histories {
        if h.len() < 2 {
            kept.push(h.clone());
            continue;
        }
        let mut rest = h.clone();
        let last = rest.triples.pop().expect("len >= 2");
        targets.push(EvalTarget {
            user_id: h.user_id.clone(),
            target: last,
        });
        kept.push(rest);
    }
    (kept, targets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferInstance {
    /// User whose history is shown.
    pub history_ref: String,
    /// User whose target is evaluated.
    pub target_ref: String,
    pub origin: String,
    pub target: InteractionTriple,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SwapOutput {
    pub instances: Vec<TransferInstance>,
    pub skipped_pairs: usize,
}

/// Two instances per pair: A's history with B's target and vice versa.
/// Pairs where either side lacks a target are skipped.
pub fn swap_targets(pairs: &[UserPair], targets_a: &[EvalTarget], targets_b: &[EvalTarget]) -> SwapOutput {
    let ta: HashMap<&str, &InteractionTriple> = targets_a.iter().map(|t| (t.user_id.as_str(), &t.target)).collect();
    let tb: HashMap<&str, &InteractionTriple> = targets_b.iter().map(|t| (t.user_id.as_str(), &t.target)).collect();
    let mut out = SwapOutput::default();
    for p in pairs {
        let (Some(a), Some(b)) = (ta.get(p.user_a.as_str()), tb.get(p.user_b.as_str())) else {
            log::warn!("pair ({}, {}) skipped: missing evaluation target", p.user_a, p.user_b);
            out.skipped_pairs += 1;
            continue;
        };
        out.instances.push(TransferInstance {
            history_ref: p.user_a.clone(),
            target_ref: p.user_b.clone(),
            origin: "b_to_a".into(),
            target: (*b).clone(),
        });
        out.instances.push(TransferInstance {
            history_ref: p.user_b.clone(),
            target_ref: p.user_a.clone(),
            origin: "a_to_b".into(),
            target: (*a).clone(),
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub intensity: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.intensity) {
            return Err(Error::config(format!(
                "noise intensity {} must lie in [0, 1)",
                self.intensity
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Primary,
    Donor,
}

/// Where a fused triple came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: Source,
    pub user_id: String,
    pub original_index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedHistory {
    pub history: UserHistory,
    pub provenance: Vec<Provenance>,
}

/// Number of donor triples so that they make up `intensity` of the fused
/// history, rounded half-up.
pub fn noise_count(n: usize, intensity: f64) -> usize {
    if intensity <= 0.0 {
        return 0;
    }
    (intensity * n as f64 / (1.0 - intensity) + 0.5).floor() as usize
}

/// Inserts sampled donor triples at random positions, preserving the order of
/// both sources. Indices are reassigned `0..n+m`.
pub fn inject_secondary(primary: &UserHistory, donor: &UserHistory, cfg: &NoiseConfig) -> Result<FusedHistory> {
    cfg.validate()?;
    let n = primary.len();
    let mut m = noise_count(n, cfg.intensity);
    if m > 0 && donor.is_empty() {
        return Err(Error::contract("donor history is empty"));
    }
    if m > donor.len() {
        log::warn!(
            "user {}: donor {} has {} triples, {m} requested; using all",
            primary.user_id,
            donor.user_id,
            donor.len()
        );
        m = donor.len();
    }
    let mut rng = seed::rng(cfg.seed, &["inject", &primary.user_id, &donor.user_id]);
    let mut picked = sample(&mut rng, donor.len(), m).into_vec();
    picked.sort_unstable();
    let mut slots = vec![false; n + m];
    for s in sample(&mut rng, n + m, m) {
        slots[s] = true;
    }
    let mut primary_iter = primary.triples.iter();
    let mut donor_iter = picked.into_iter().map(|i| &donor.triples[i]);
    let mut triples = Vec::with_capacity(n + m);
    let mut provenance = Vec::with_capacity(n + m);
    for (pos, is_donor) in slots.into_iter().enumerate() {
        let (t, src, owner) = if is_donor {
            (donor_iter.next().expect("m donor slots"), Source::Donor, &donor.user_id)
        } else {
            (primary_iter.next().expect("n primary slots"), Source::Primary, &primary.user_id)
        };
        provenance.push(Provenance {
            source: src,
            user_id: owner.clone(),
            original_index: t.index,
        });
        triples.push(InteractionTriple {
            index: pos as u64,
            ..t.clone()
        });
    }
    Ok(FusedHistory {
        history: UserHistory::new(primary.user_id.clone(), primary.dataset_tag.clone(), triples)?,
        provenance,
    })
}

/// Drops injected triples and restores the original primary indices.
pub fn remove_injected(fused: &FusedHistory) -> Result<UserHistory> {
    if fused.provenance.len() != fused.history.len() {
        return Err(Error::validation("provenance does not cover the fused history"));
    }
    let triples = fused
        .history
        .triples
        .iter()
        .zip(&fused.provenance)
        .filter(|(_, p)| p.source == Source::Primary)
        .map(|(t, p)| InteractionTriple {
            index: p.original_index,
            ..t.clone()
        })
        .collect();
    UserHistory::new(fused.history.user_id.clone(), fused.history.dataset_tag.clone(), triples)
}

/// A uniformly random counterpart (never the user itself) for every user.
pub fn pair_donors(user_ids: &[&str], seed_value: u64) -> Result<Vec<usize>> {
    if user_ids.len() < 2 {
        return Err(Error::contract("donor pairing needs at least two users"));
    }
    Ok(user_ids
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let mut rng = seed::rng(seed_value, &["donor", u]);
            let j = rng.gen_range(0..user_ids.len() - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect())
}

/// Fuses every history with a random donor from the same corpus.
pub fn build_multi_interest(histories: &[UserHistory], cfg: &NoiseConfig) -> Result<Vec<FusedHistory>> {
    cfg.validate()?;
    let ids: Vec<&str> = histories.iter().map(|h| h.user_id.as_str()).collect();
    let donors = pair_donors(&ids, cfg.seed)?;
    histories
        .iter()
        .zip(donors)
        .map(|(h, d)| inject_secondary(h, &histories[d], cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(user: &str, n: usize) -> UserHistory {
        let triples = (0..n)
            .map(|i| InteractionTriple::new(10 * i as u64 + 1, None, format!("{user}-p{i}"), Some(format!("{user}-n{i}"))).unwrap())
            .collect();
        UserHistory::new(user, "t", triples).unwrap()
    }

    #[test]
    fn noise_count_half_up() {
        assert_eq!(noise_count(10, 0.0), 0);
        assert_eq!(noise_count(10, 0.5), 10);
        assert_eq!(noise_count(9, 0.2), 2); // 2.25
        assert_eq!(noise_count(10, 0.2), 3); // 2.5 rounds up
    }

    #[test]
    fn zero_intensity_is_identity() {
        let p = hist("a", 5);
        let f = inject_secondary(&p, &hist("b", 5), &NoiseConfig { intensity: 0.0, seed: 1 }).unwrap();
        assert_eq!(remove_injected(&f).unwrap(), p);
        assert_eq!(f.history.triples.len(), 5);
        assert!(f.history.triples.iter().zip(&p.triples).all(|(x, y)| x.chosen == y.chosen));
    }

    #[test]
    fn intensity_one_rejected() {
        let r = inject_secondary(&hist("a", 3), &hist("b", 3), &NoiseConfig { intensity: 1.0, seed: 1 });
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn swap_skips_missing_targets() {
        let pairs = vec![
            UserPair { user_a: "a1".into(), user_b: "b1".into(), similarity: 0.9 },
            UserPair { user_a: "a2".into(), user_b: "b1".into(), similarity: 0.5 },
        ];
        let t = |u: &str| EvalTarget { user_id: u.into(), target: InteractionTriple::new(0, None, u, None).unwrap() };
        let out = swap_targets(&pairs, &[t("a1")], &[t("b1")]);
        assert_eq!(out.instances.len(), 2);
        assert_eq!(out.skipped_pairs, 1);
        assert_eq!(out.instances[0].history_ref, "a1");
        assert_eq!(out.instances[0].target.chosen, "b1");
    }

    #[test]
    fn donors_never_self() {
        let ids = ["a", "b", "c", "d"];
        for s in 0..50 {
            let d = pair_donors(&ids, s).unwrap();
            assert!(d.iter().enumerate().all(|(i, j)| i != *j));
        }
    }
}
