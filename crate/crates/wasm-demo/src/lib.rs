//! Browser bindings for the interactive demo page in `www/`.
//!
//! Every export returns a JSON string so the page needs no generated
//! TypeScript types.

use std::collections::HashSet;
use std::sync::Arc;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use streampref::curriculum::{self, PruneConfig, SampleScore, TailSide};
use streampref::modelio::{templates, Client, ModelEndpoint, Role};
use streampref::rlengine::{self, Crediting, Immediates, TrainingRecord};
use streampref::simlab::{self, GeneratorMode, GroundTruth, PopulationConfig, SimBackend};

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json(v: &impl Serialize) -> Result<String, JsValue> {
    serde_json::to_string(v).map_err(js_err)
}

fn parse_list(text: &str) -> Result<Vec<f64>, JsValue> {
    text.split([',', ' ', '\n'])
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>().map_err(|e| js_err(format!("{s:?}: {e}"))))
        .collect()
}

#[derive(Serialize)]
struct RewardView {
    initial: Vec<f64>,
    updated: Vec<f64>,
    initial_advantages: Vec<f64>,
    updated_advantages: Vec<f64>,
    /// `(ratio, per-token objective)` for a unit positive and negative advantage.
    clip_positive: Vec<(f64, f64)>,
    clip_negative: Vec<(f64, f64)>,
}

fn clip_curve(advantage: f64, eps: f64) -> Result<Vec<(f64, f64)>, JsValue> {
    let record = TrainingRecord {
        prompt: String::new(),
        response: String::new(),
        old_logprobs: vec![0.0],
        advantage,
        group_id: String::new(),
    };
    (1..=60)
        .map(|i| {
            let ratio = i as f64 * 0.05;
            let loss = rlengine::surrogate_loss(std::slice::from_ref(&record), &[vec![ratio.ln()]], eps).map_err(js_err)?;
            Ok((ratio, -loss))
        })
        .collect()
}

/// Cumulative rewards and advantages for one rollout tree, given the
/// immediate rewards of the initial and updated groups as comma-separated
/// lists, plus the clipped objective curve at `eps`.
#[wasm_bindgen]
pub fn explore_rewards(
    initial: &str,
    updated: &str,
    selected: usize,
    gamma: f64,
    credit_all: bool,
    eps: f64,
) -> Result<String, JsValue> {
    let imm = Immediates {
        initial: parse_list(initial)?,
        updated: parse_list(updated)?,
    };
    let crediting = if credit_all { Crediting::AllInitial } else { Crediting::SelectedOnly };
    let (r_init, r_upd) = rlengine::cumulative_rewards(&imm, selected, gamma, crediting).map_err(js_err)?;
    to_json(&RewardView {
        initial_advantages: rlengine::advantages(&r_init, rlengine::DEFAULT_EPS_STD),
        updated_advantages: rlengine::advantages(&r_upd, rlengine::DEFAULT_EPS_STD),
        initial: r_init,
        updated: r_upd,
        clip_positive: clip_curve(1.0, eps)?,
        clip_negative: clip_curve(-1.0, eps)?,
    })
}

#[derive(Serialize)]
struct PrunePoint {
    s_tract: f64,
    s_learn: f64,
    kept: bool,
}

#[derive(Serialize)]
struct PruneView {
    total: usize,
    kept: usize,
    instances: usize,
    points: Vec<PrunePoint>,
}

/// Scores a synthetic population and prunes it with the given row.
#[wasm_bindgen]
pub fn prune_preview(
    seed: u64,
    users: usize,
    alpha: f64,
    tract_low: f64,
    tract_high: f64,
    hardest: bool,
) -> Result<String, JsValue> {
    let pop = simlab::gen_population(&PopulationConfig {
        seed,
        n_users: users,
        ..Default::default()
    })
    .map_err(js_err)?;
    let scores: Vec<SampleScore> = simlab::simulate_scores(&pop, seed)
        .iter()
        .map(|r| SampleScore::from_row(r, 1e-6))
        .collect::<Result<_, _>>()
        .map_err(js_err)?;
    let cfg = PruneConfig {
        alpha,
        tract_low,
        tract_high,
        tail_fraction: 1.0,
        tail_side: if hardest { TailSide::Hardest } else { TailSide::Easiest },
    };
    let kept = curriculum::prune(&scores, &cfg).map_err(js_err)?;
    let keys: HashSet<(&str, u64)> = kept.iter().map(|s| (s.user_id.as_str(), s.index)).collect();
    let mut per_user: std::collections::HashMap<&str, usize> = Default::default();
    for s in &kept {
        *per_user.entry(s.user_id.as_str()).or_default() += 1;
    }
    to_json(&PruneView {
        total: scores.len(),
        kept: kept.len(),
        instances: per_user.values().filter(|n| **n >= 2).count(),
        points: scores
            .iter()
            .map(|s| PrunePoint {
                s_tract: s.s_tract,
                s_learn: s.s_learn,
                kept: keys.contains(&(s.user_id.as_str(), s.index)),
            })
            .collect(),
    })
}

#[derive(Serialize)]
struct SweepRow {
    quality: f64,
    mean_reward: f64,
    accuracy: f64,
}

/// Mean judged reward and held-out accuracy of scripted summaries as the
/// generator quality goes from 0 to 1.
#[wasm_bindgen]
pub fn quality_sweep(seed: u64, users: usize, kappa: f64, steps: usize) -> Result<String, JsValue> {
    let pop = simlab::gen_population(&PopulationConfig {
        seed,
        n_users: users,
        ..Default::default()
    })
    .map_err(js_err)?;
    let truth = Arc::new(GroundTruth::from_population(&pop));
    let client = |mode, role| {
        let backend = SimBackend::new(truth.clone(), mode, seed).with_kappa(kappa);
        Client::new(ModelEndpoint::new("mock:simlab", "sim", role), Arc::new(backend)).map_err(js_err)
    };
    let judge = client(GeneratorMode::Quality(1.0), Role::Judge)?;
    let steps = steps.max(2);
    let mut rows = Vec::with_capacity(steps);
    for k in 0..steps {
        let quality = k as f64 / (steps - 1) as f64;
        let gen = client(GeneratorMode::Quality(quality), Role::Generator)?;
        let (mut reward, mut correct) = (0.0, 0);
        for h in &pop.histories {
            let (past, target) = h.triples.split_at(h.len() - 1);
            let text = templates::render_triples(past);
            let (_, g) = gen.generate_summary(None, &text, "None", 0).map_err(js_err)?;
            let r = rlengine::immediate_reward(&judge, &g.summary, &target[0]).map_err(js_err)?;
            reward += r;
            correct += usize::from(r > 0.5);
        }
        let n = pop.histories.len().max(1) as f64;
        rows.push(SweepRow {
            quality,
            mean_reward: reward / n,
            accuracy: correct as f64 / n,
        });
    }
    to_json(&rows)
}
