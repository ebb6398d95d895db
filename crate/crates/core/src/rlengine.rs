//! Two-step hierarchical rollouts, cumulative rewards, group-normalized
//! advantages and the clipped surrogate loss.
//!
//! A tree holds `G` initial summaries of `H[0,k1)` and `G` updates of one
//! randomly selected initial summary over `H[k1,k2)`. Initial summaries are
//! rewarded on `h_k1`, updates on `h_k2`; the selected initial summary is
//! additionally credited with `γ` times the mean reward of its updates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::RlInstance;
use crate::data::{InteractionTriple, UserHistory};
use crate::error::{Error, Result};
use crate::modelio::{templates, Client, GenerationResult};
use crate::{par, seed};

pub const DEFAULT_CLIP_EPS: f64 = 0.2;
pub const DEFAULT_EPS_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt: String,
    pub result: GenerationResult,
    /// Per-token logprobs of `result.raw` under the sampling policy.
    pub old_logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTree {
    pub instance: RlInstance,
    pub initial: Vec<Rollout>,
    pub selected_index: usize,
    pub updated: Vec<Rollout>,
    pub group_size: usize,
}

impl RolloutTree {
    pub fn validate(&self) -> Result<()> {
        let g = self.group_size;
        if g == 0 || self.initial.len() != g || self.updated.len() != g || self.selected_index >= g {
            return Err(Error::contract(format!(
                "malformed rollout tree: G={g}, {} initial, {} updated, selected {}",
                self.initial.len(),
                self.updated.len(),
                self.selected_index
            )));
        }
        Ok(())
    }
}

fn sample_one(policy: &Client, past: &str, history_text: &str, sample: u64) -> Result<Rollout> {
    let prompt = policy.render_fitted(history_text, |h| templates::preference_generation(past, h));
    let result = policy.generate(&prompt, sample)?;
    let old_logprobs = match &result.token_logprobs {
        Some(lps) if !lps.is_empty() => lps.clone(),
        _ => policy.policy_logprobs(&prompt, &result.raw)?,
    };
    Ok(Rollout {
        prompt,
        result,
        old_logprobs,
    })
}

/// Samples the two-level tree for one instance. Sample nonces and the
/// selected parent are pure functions of `seed` and the instance.
pub fn rollout(
    policy: &Client,
    instance: &RlInstance,
    history: &UserHistory,
    group_size: usize,
    seed_value: u64,
    empty_marker: &str,
) -> Result<RolloutTree> {
    if group_size == 0 {
        return Err(Error::contract("group size must be at least 1"));
    }
    if instance.user_id != history.user_id {
        return Err(Error::contract(format!(
            "instance for {} paired with history of {}",
            instance.user_id, history.user_id
        )));
    }
    let (p1, p2) = match (history.find_index(instance.k1), history.find_index(instance.k2)) {
        (Some(_), Some(_)) if instance.k1 < instance.k2 => (
            history.position_of_index(instance.k1),
            history.position_of_index(instance.k2),
        ),
        _ => {
            return Err(Error::contract(format!(
                "instance indices ({}, {}) invalid for user {}",
                instance.k1, instance.k2, history.user_id
            )))
        }
    };
    let (k1, k2) = (instance.k1.to_string(), instance.k2.to_string());
    let labels = |stage: &str, i: usize| {
        seed::derive(seed_value, &[&history.user_id, &k1, &k2, stage, &i.to_string()])
    };
    let before = templates::render_triples(&history.triples[..p1]);
    let initial = (0..group_size)
        .map(|i| sample_one(policy, empty_marker, &before, labels("initial", i)))
        .collect::<Result<Vec<_>>>()?;
    let selected_index = if group_size == 1 {
        0
    } else {
        seed::rng(seed_value, &[&history.user_id, &k1, &k2, "select"]).gen_range(0..group_size)
    };
    let between = templates::render_triples(&history.triples[p1..p2]);
    let parent = initial[selected_index].result.summary.clone();
    let updated = (0..group_size)
        .map(|j| sample_one(policy, &parent, &between, labels("updated", j)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutTree {
        instance: instance.clone(),
        initial,
        selected_index,
        updated,
        group_size,
    })
}

/// Debiased judge probability of the target's chosen item.
pub fn immediate_reward(judge: &Client, summary: &str, target: &InteractionTriple) -> Result<f64> {
    let rejected = target.rejected.as_deref().ok_or_else(|| {
        Error::contract(format!(
            "reward target {} has no rejected item; RL instances must be paired",
            target.index
        ))
    })?;
    let v = judge.judge_pair(summary, target.context.as_deref(), &target.chosen, rejected, true)?;
    Ok(v.prob_first)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Immediates {
    pub initial: Vec<f64>,
    pub updated: Vec<f64>,
}

/// Initial summaries are scored on `h_k1`, updates on `h_k2`.
pub fn score_tree(judge: &Client, tree: &RolloutTree) -> Result<Immediates> {
    tree.validate()?;
    let score = |rs: &[Rollout], target: &InteractionTriple| {
        rs.iter()
            .map(|r| immediate_reward(judge, &r.result.summary, target))
            .collect::<Result<Vec<_>>>()
    };
    Ok(Immediates {
        initial: score(&tree.initial, &tree.instance.target1)?,
        updated: score(&tree.updated, &tree.instance.target2)?,
    })
}

/// Which initial summaries receive the future-utility term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Crediting {
    /// Only the parent of the updated set.
    #[default]
    SelectedOnly,
    /// Every initial summary (the term is then a per-group constant).
    AllInitial,
}

/// Cumulative rewards `(R_initial, R_updated)`; updates keep `R = r`.
pub fn cumulative_rewards(
    immediates: &Immediates,
    selected_index: usize,
    gamma: f64,
    crediting: Crediting,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = immediates.initial.len();
    if g == 0 || immediates.updated.len() != g || selected_index >= g {
        return Err(Error::contract("immediate rewards must cover all 2G summaries"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::contract(format!("gamma {gamma} outside [0, 1]")));
    }
    let future = gamma * immediates.updated.iter().sum::<f64>() / g as f64;
    let initial = immediates
        .initial
        .iter()
        .enumerate()
        .map(|(i, r)| match crediting {
            Crediting::SelectedOnly if i != selected_index => *r,
            _ => r + future,
        })
        .collect();
    Ok((initial, immediates.updated.clone()))
}

/// `(R − mean) / std` with population std; all zeros when `std < eps_std`.
pub fn advantages(group: &[f64], eps_std: f64) -> Vec<f64> {
    if group.is_empty() {
        return Vec::new();
    }
    let n = group.len() as f64;
    let mean = group.iter().sum::<f64>() / n;
    let var = group.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < eps_std {
        return vec![0.0; group.len()];
    }
    group.iter().map(|r| (r - mean) / std).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Initial,
    Updated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardedSummary {
    pub which: Stage,
    pub position: usize,
    pub immediate: f64,
    pub cumulative: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub gamma: f64,
    pub crediting: Crediting,
    pub eps_std: f64,
}

impl RewardConfig {
    pub fn new(gamma: f64) -> Self {
        Self {
            gamma,
            crediting: Crediting::SelectedOnly,
            eps_std: DEFAULT_EPS_STD,
        }
    }
}

/// Rewards for all `2G` summaries, initial set first. Each set is
/// normalized separately.
pub fn reward_tree(tree: &RolloutTree, immediates: &Immediates, cfg: &RewardConfig) -> Result<Vec<RewardedSummary>> {
    tree.validate()?;
    let (r_init, r_upd) = cumulative_rewards(immediates, tree.selected_index, cfg.gamma, cfg.crediting)?;
    let a_init = advantages(&r_init, cfg.eps_std);
    let a_upd = advantages(&r_upd, cfg.eps_std);
    let mut out = Vec::with_capacity(2 * tree.group_size);
    for (which, imm, cum, adv) in [
        (Stage::Initial, &immediates.initial, &r_init, &a_init),
        (Stage::Updated, &immediates.updated, &r_upd, &a_upd),
    ] {
        for i in 0..tree.group_size {
            out.push(RewardedSummary {
                which,
                position: i,
                immediate: imm[i],
                cumulative: cum[i],
                advantage: adv[i],
            });
        }
    }
    Ok(out)
}

/// One exported unit for an external trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub prompt: String,
    pub response: String,
    pub old_logprobs: Vec<f64>,
    pub advantage: f64,
    pub group_id: String,
}

pub fn group_id(instance: &RlInstance, which: Stage) -> String {
    let stage = match which {
        Stage::Initial => "initial",
        Stage::Updated => "updated",
    };
    format!("{}:{}:{}:{stage}", instance.user_id, instance.k1, instance.k2)
}

/// One record per summary, in tree order.
pub fn export_batch(trees: &[(RolloutTree, Vec<RewardedSummary>)]) -> Result<Vec<TrainingRecord>> {
    let mut out = Vec::new();
    for (tree, rewards) in trees {
        tree.validate()?;
        if rewards.len() != 2 * tree.group_size {
            return Err(Error::contract("rewards do not cover the tree"));
        }
        for r in rewards {
            let rollout = match r.which {
                Stage::Initial => &tree.initial[r.position],
                Stage::Updated => &tree.updated[r.position],
            };
            if rollout.old_logprobs.is_empty() {
                return Err(Error::contract("rollout has no response tokens"));
            }
            if !r.advantage.is_finite() {
                return Err(Error::contract("non-finite advantage"));
            }
            out.push(TrainingRecord {
                prompt: rollout.prompt.clone(),
                response: rollout.result.raw.clone(),
                old_logprobs: rollout.old_logprobs.clone(),
                advantage: r.advantage,
                group_id: group_id(&tree.instance, r.which),
            });
        }
    }
    Ok(out)
}

/// `−(1/N) Σ_P (1/L_P) Σ_t min(ρ_t A, clip(ρ_t, 1−ε, 1+ε) A)` over the `N`
/// records (`N = 2G` for one tree). `clip_eps = ∞` disables clipping.
pub fn surrogate_loss(records: &[TrainingRecord], new_logprobs: &[Vec<f64>], clip_eps: f64) -> Result<f64> {
    if records.len() != new_logprobs.len() {
        return Err(Error::contract(format!(
            "{} records but {} logprob sequences",
            records.len(),
            new_logprobs.len()
        )));
    }
    if records.is_empty() {
        return Err(Error::contract("loss over an empty batch"));
    }
    if clip_eps.is_nan() || clip_eps < 0.0 {
        return Err(Error::contract(format!("bad clip range {clip_eps}")));
    }
    let mut total = 0.0;
    for (rec, new) in records.iter().zip(new_logprobs) {
        if rec.old_logprobs.len() != new.len() || new.is_empty() {
            return Err(Error::contract(format!(
                "group {}: {} old vs {} new token logprobs",
                rec.group_id,
                rec.old_logprobs.len(),
                new.len()
            )));
        }
        let a = rec.advantage;
        let per_token: f64 = rec
            .old_logprobs
            .iter()
            .zip(new)
            .map(|(old, new)| {
                let rho = (new - old).exp();
                let clipped = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps);
                (rho * a).min(clipped * a)
            })
            .sum();
        total += per_token / new.len() as f64;
    }
    Ok(-total / records.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub trees: usize,
    pub aborted: usize,
    pub records: usize,
    pub mean_reward_initial: f64,
    pub mean_reward_updated: f64,
    pub mean_response_tokens: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub group_size: usize,
    pub reward: RewardConfig,
    pub seed: u64,
}

/// Rollout, scoring and export for many instances. A failing instance is
/// dropped with telemetry; the rest proceed.
pub fn run_rl_batch(
    policy: &Client,
    judge: &Client,
    instances: &[RlInstance],
    histories: &[UserHistory],
    cfg: &RlConfig,
    jobs: usize,
) -> Result<(Vec<TrainingRecord>, BatchStats)> {
    let by_user: std::collections::HashMap<&str, &UserHistory> =
        histories.iter().map(|h| (h.user_id.as_str(), h)).collect();
    let results = par::map(instances, jobs, |inst| -> Result<(RolloutTree, Vec<RewardedSummary>)> {
        let h = by_user
            .get(inst.user_id.as_str())
            .ok_or_else(|| Error::contract(format!("no history for user {}", inst.user_id)))?;
        let tree = rollout(policy, inst, h, cfg.group_size, cfg.seed, templates::NO_CONTEXT)?;
        let imm = score_tree(judge, &tree)?;
        let rewards = reward_tree(&tree, &imm, &cfg.reward)?;
        Ok((tree, rewards))
    });
    let mut trees = Vec::new();
    let mut stats = BatchStats::default();
    for (inst, r) in instances.iter().zip(results) {
        match r {
            Ok(t) => trees.push(t),
            Err(e @ Error::Contract(_)) => return Err(e),
            Err(e) => {
                stats.aborted += 1;
                policy.telemetry().incr("rollouts_aborted");
                log::warn!("rollout for {}:{}:{} aborted: {e}", inst.user_id, inst.k1, inst.k2);
            }
        }
    }
    let records = export_batch(&trees)?;
    stats.trees = trees.len();
    stats.records = records.len();
    let mean = |xs: Vec<f64>| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let rewards = trees.iter().flat_map(|(_, r)| r.iter());
    stats.mean_reward_initial = mean(rewards.clone().filter(|r| r.which == Stage::Initial).map(|r| r.immediate).collect());
    stats.mean_reward_updated = mean(rewards.filter(|r| r.which == Stage::Updated).map(|r| r.immediate).collect());
    stats.mean_response_tokens = mean(records.iter().map(|r| r.old_logprobs.len() as f64).collect());
    log::info!(
        "rl batch: {} trees, reward initial {:.4} updated {:.4}, response length {:.1}",
        stats.trees,
        stats.mean_reward_initial,
        stats.mean_reward_updated,
        stats.mean_response_tokens
    );
    Ok((records, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(old: Vec<f64>, advantage: f64) -> TrainingRecord {
        TrainingRecord {
            prompt: "p".into(),
            response: "r".into(),
            old_logprobs: old,
            advantage,
            group_id: "g".into(),
        }
    }

    #[test]
    fn hand_clip_cases() {
        let up = surrogate_loss(&[rec(vec![0.0], 1.0)], &[vec![2f64.ln()]], 0.2).unwrap();
        assert!((up + 1.2).abs() < 1e-12);
        let down = surrogate_loss(&[rec(vec![0.0], -1.0)], &[vec![0.5f64.ln()]], 0.2).unwrap();
        assert!((down - 0.8).abs() < 1e-12);
    }

    #[test]
    fn infinite_eps_is_unclipped() {
        let r = rec(vec![-1.0, -2.0], 0.7);
        let new = vec![-0.5, -2.5];
        let loss = surrogate_loss(&[r], std::slice::from_ref(&new), f64::INFINITY).unwrap();
        let expected = -0.7 * (0.5f64.exp() + (-0.5f64).exp()) / 2.0;
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_contract_error() {
        let r = surrogate_loss(&[rec(vec![0.0, 0.0], 1.0)], &[vec![0.0]], 0.2);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn cumulative_hand_example() {
        let imm = Immediates {
            initial: vec![0.6, 0.3],
            updated: vec![0.8, 0.4],
        };
        let (ri, ru) = cumulative_rewards(&imm, 0, 0.5, Crediting::SelectedOnly).unwrap();
        assert!((ri[0] - 0.9).abs() < 1e-12);
        assert_eq!(ri[1], 0.3);
        assert_eq!(ru, vec![0.8, 0.4]);
        let (ri, _) = cumulative_rewards(&imm, 0, 0.5, Crediting::AllInitial).unwrap();
        assert!((ri[1] - 0.6).abs() < 1e-12);
        let (ri, _) = cumulative_rewards(&imm, 1, 0.0, Crediting::SelectedOnly).unwrap();
        assert_eq!(ri, imm.initial);
    }

    #[test]
    fn advantage_cases() {
        assert_eq!(advantages(&[0.0, 1.0], DEFAULT_EPS_STD), vec![-1.0, 1.0]);
        assert_eq!(advantages(&[0.3; 4], DEFAULT_EPS_STD), vec![0.0; 4]);
        assert_eq!(advantages(&[0.7], DEFAULT_EPS_STD), vec![0.0]);
    }
}
