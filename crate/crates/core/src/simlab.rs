//! Synthetic users and scripted backends with known ground truth.
//!
//! Each synthetic user has a unit latent preference vector; items are
//! feature vectors rendered as `item<f1,f2,...>`, and the user prefers `p`
//! over `n` whenever `latent·(p − n)` clears a margin. Scripted summaries
//! carry a machine-readable estimate `[est: ...]` of the latent so judges
//! and mergers can act on them, giving every reward and filter in the
//! pipeline a computable oracle.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curriculum::ScoreRow;
use crate::data::{read_jsonl, InteractionTriple, UserHistory};
use crate::error::{Error, Result};
use crate::modelio::mock::{hashed_embedding, selection_tokens, HashMock};
use crate::modelio::templates::{self, PromptKind};
use crate::modelio::{param, Backend, Completion, CompletionRequest, TokenCounter, WhitespaceTokens};
use crate::seed;

pub const DEFAULT_DIM: usize = 8;
pub const DEFAULT_KAPPA: f64 = 8.0;
pub const DEFAULT_MARGIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUser {
    pub user_id: String,
    pub latent: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticItem {
    pub features: Vec<f64>,
}

impl SyntheticItem {
    pub fn render(&self) -> String {
        format!("item<{}>", join_floats(&self.features))
    }

    pub fn parse(text: &str) -> Option<Self> {
        let inner = text.trim().strip_prefix("item<")?.strip_suffix('>')?;
        parse_floats(inner).map(|features| Self { features })
    }
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_floats(s: &str) -> Option<Vec<f64>> {
    let v: Option<Vec<f64>> = s.split(',').map(|x| x.trim().parse().ok()).collect();
    v.filter(|v| !v.is_empty())
}

/// Every `item<...>` occurrence in a piece of text.
pub fn items_in(text: &str) -> Vec<SyntheticItem> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(at) = rest.find("item<") {
        let tail = &rest[at..];
        match tail.find('>') {
            Some(end) => {
                if let Some(item) = SyntheticItem::parse(&tail[..=end]) {
                    out.push(item);
                }
                rest = &tail[end + 1..];
            }
            None => break,
        }
    }
    out
}

/// Renders an estimate vector in summary text.
pub fn render_estimate(est: &[f64]) -> String {
    format!("[est: {}]", join_floats(est))
}

/// The last `[est: ...]` vector in a text, if any.
pub fn parse_estimate(text: &str) -> Option<Vec<f64>> {
    let at = text.rfind("[est:")?;
    let tail = &text[at + "[est:".len()..];
    let end = tail.find(']')?;
    parse_floats(&tail[..end])
}

fn all_estimates(text: &str) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(at) = rest.find("[est:") {
        let tail = &rest[at + "[est:".len()..];
        let Some(end) = tail.find(']') else { break };
        if let Some(v) = parse_floats(&tail[..end]) {
            out.push(v);
        }
        rest = &tail[end..];
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = dot(&v, &v).sqrt();
    if !(norm.is_finite() && norm > 1e-12) {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

pub fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(u) = normalize(v) {
            return u;
        }
    }
}

/// `σ(kappa · estimate·(p − n))`: the scripted judge's probability that
/// `p` is preferred over `n`.
pub fn scripted_judge(estimate: &[f64], item_p: &[f64], item_n: &[f64], kappa: f64) -> Result<f64> {
    if estimate.len() != item_p.len() || item_p.len() != item_n.len() {
        return Err(Error::contract(format!(
            "dimension mismatch: estimate {}, items {} and {}",
            estimate.len(),
            item_p.len(),
            item_n.len()
        )));
    }
    let margin: f64 = estimate
        .iter()
        .zip(item_p.iter().zip(item_n))
        .map(|(e, (p, n))| e * (p - n))
        .sum();
    Ok(sigmoid(kappa * margin))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub seed: u64,
    pub n_users: usize,
    pub dim: usize,
    pub history_len: usize,
    pub pair_margin: f64,
    pub dataset_tag: String,
    /// Prefix for generated user ids, so corpora can be kept disjoint.
    pub id_prefix: String,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_users: 50,
            dim: DEFAULT_DIM,
            history_len: 24,
            pair_margin: DEFAULT_MARGIN,
            dataset_tag: "simlab".into(),
            id_prefix: "sim".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub user_id: String,
    pub latent: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Population {
    pub histories: Vec<UserHistory>,
    pub truth: Vec<GroundTruthRow>,
}

fn random_item(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    // three decimals keep the rendering short and exactly round-trippable
    (0..d)
        .map(|_| (rng.gen_range(-1000i32..=1000) as f64) / 1000.0)
        .collect()
}

/// Generates synthetic users whose every triple satisfies
/// `latent·(chosen − rejected) ≥ pair_margin`.
pub fn gen_population(cfg: &PopulationConfig) -> Result<Population> {
    if cfg.dim < 2 {
        return Err(Error::config("simlab dimension must be at least 2"));
    }
    if cfg.history_len < 4 {
        return Err(Error::config("simlab history_len must be at least 4"));
    }
    if !(cfg.pair_margin >= 0.0 && cfg.pair_margin < 1.0) {
        return Err(Error::config("pair_margin must lie in [0, 1)"));
    }
    let mut histories = Vec::with_capacity(cfg.n_users);
    let mut truth = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let user_id = format!("{}-{u:05}", cfg.id_prefix);
        let mut rng = seed::rng(cfg.seed, &["simlab", "user", &user_id]);
        let latent = random_unit(&mut rng, cfg.dim);
        let mut triples = Vec::with_capacity(cfg.history_len);
        for i in 0..cfg.history_len {
            let (p, n) = loop {
                let a = random_item(&mut rng, cfg.dim);
                let b = random_item(&mut rng, cfg.dim);
                let m = dot(&latent, &a) - dot(&latent, &b);
                if m >= cfg.pair_margin {
                    break (a, b);
                }
                if -m >= cfg.pair_margin {
                    break (b, a);
                }
            };
            let context = (i % 2 == 0).then(|| format!("Session {i}: which item fits?"));
            triples.push(InteractionTriple::new(
                i as u64,
                context,
                SyntheticItem { features: p }.render(),
                Some(SyntheticItem { features: n }.render()),
            )?);
        }
        histories.push(UserHistory::new(user_id.clone(), cfg.dataset_tag.clone(), triples)?);
        truth.push(GroundTruthRow { user_id, latent });
    }
    Ok(Population { histories, truth })
}

/// Synthetic strong/weak scorer: the strong model sees a noisy version of
/// the true margin, the weak one a heavily attenuated one.
pub fn simulate_scores(pop: &Population, seed_value: u64) -> Vec<ScoreRow> {
    let latents: HashMap<&str, &[f64]> =
        pop.truth.iter().map(|t| (t.user_id.as_str(), t.latent.as_slice())).collect();
    let mut rows = Vec::new();
    for h in &pop.histories {
        let Some(latent) = latents.get(h.user_id.as_str()) else { continue };
        let mut rng = seed::rng(seed_value, &["simlab", "scores", &h.user_id]);
        for t in &h.triples {
            let (Some(p), Some(n)) = (
                SyntheticItem::parse(&t.chosen),
                t.rejected.as_deref().and_then(SyntheticItem::parse),
            ) else {
                continue;
            };
            let margin = dot(latent, &p.features) - dot(latent, &n.features);
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            let strong = sigmoid(4.0 * (margin + 0.6 * e1));
            let weak = sigmoid(0.3 * margin + 0.5 * e2);
            rows.push(ScoreRow {
                user_id: h.user_id.clone(),
                index: t.index,
                strong_p: strong.max(1e-6),
                weak_p: weak.max(1e-6),
            });
        }
    }
    rows
}

/// Latents plus an index from rendered item to the user who owns it.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    pub latents: HashMap<String, Vec<f64>>,
    owners: HashMap<String, String>,
}

impl GroundTruth {
    pub fn new(truth: &[GroundTruthRow], histories: &[UserHistory]) -> Self {
        let latents = truth
            .iter()
            .map(|t| (t.user_id.clone(), t.latent.clone()))
            .collect();
        let mut owners = HashMap::new();
        for h in histories {
            for t in &h.triples {
                for item in std::iter::once(&t.chosen).chain(t.rejected.as_ref()) {
                    owners.insert(item.clone(), h.user_id.clone());
                }
            }
        }
        Self { latents, owners }
    }

    pub fn from_population(pop: &Population) -> Self {
        Self::new(&pop.truth, &pop.histories)
    }

    pub fn load(truth_path: impl AsRef<Path>, histories_path: impl AsRef<Path>) -> Result<Self> {
        let truth: Vec<GroundTruthRow> = read_jsonl(truth_path)?;
        let histories: Vec<UserHistory> = read_jsonl(histories_path)?;
        Ok(Self::new(&truth, &histories))
    }

    /// Majority owner of the items mentioned in `text`.
    pub fn owner_of(&self, text: &str) -> Option<&str> {
        let mut votes: HashMap<&str, usize> = HashMap::new();
        let mut rest = text;
        while let Some(at) = rest.find("item<") {
            let tail = &rest[at..];
            let Some(end) = tail.find('>') else { break };
            if let Some(owner) = self.owners.get(&tail[..=end]) {
                *votes.entry(owner.as_str()).or_default() += 1;
            }
            rest = &tail[end + 1..];
        }
        votes
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(a.0)))
            .map(|(owner, _)| owner)
    }

    pub fn latent_for(&self, text: &str) -> Option<&[f64]> {
        self.owner_of(text)
            .and_then(|u| self.latents.get(u))
            .map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GeneratorMode {
    /// Estimate `normalize(q·latent + (1 − q)·drift)`, where the drift is a
    /// random direction (pulled toward the prior estimate when one exists).
    Quality(f64),
    /// Planted-wrong summaries: the estimate is the negated latent.
    Adversarial,
}

/// Scripted generator, judge and merger over a simlab ground truth.
#[derive(Debug, Clone)]
pub struct SimBackend {
    pub truth: Arc<GroundTruth>,
    pub mode: GeneratorMode,
    pub kappa: f64,
    /// Added to the judge's logit for whichever item is listed first.
    pub position_bias: f64,
    pub seed: u64,
    pub dim: usize,
    scorer: HashMock,
}

impl SimBackend {
    pub fn new(truth: Arc<GroundTruth>, mode: GeneratorMode, seed: u64) -> Self {
        let dim = truth.latents.values().next().map_or(DEFAULT_DIM, Vec::len);
        Self {
            truth,
            mode,
            kappa: DEFAULT_KAPPA,
            position_bias: 0.0,
            seed,
            dim,
            scorer: HashMock::new(seed),
        }
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn with_position_bias(mut self, bias: f64) -> Self {
        self.position_bias = bias;
        self
    }

    /// `mock:simlab?truth=F&histories=F&quality=Q&adversarial=B&kappa=K&bias=X&seed=S`
    pub fn from_params(params: &[(String, String)]) -> Result<Self> {
        let truth_path: Option<String> = param(params, "truth")?;
        let histories_path: Option<String> = param(params, "histories")?;
        let truth = match (truth_path, histories_path) {
            (Some(t), Some(h)) => GroundTruth::load(t, h)?,
            (None, None) => GroundTruth::default(),
            _ => {
                return Err(Error::config(
                    "mock:simlab needs both truth= and histories= or neither",
                ))
            }
        };
        let quality: f64 = param(params, "quality")?.unwrap_or(1.0);
        if !(0.0..=1.0).contains(&quality) {
            return Err(Error::config("quality must lie in [0, 1]"));
        }
        let mode = if param(params, "adversarial")?.unwrap_or(false) {
            GeneratorMode::Adversarial
        } else {
            GeneratorMode::Quality(quality)
        };
        let seed = param(params, "seed")?.unwrap_or(0);
        let mut backend = Self::new(Arc::new(truth), mode, seed);
        if let Some(k) = param(params, "kappa")? {
            backend.kappa = k;
        }
        if let Some(b) = param(params, "bias")? {
            backend.position_bias = b;
        }
        if let Some(d) = param(params, "dim")? {
            backend.dim = d;
        }
        Ok(backend)
    }

    fn rng_for(&self, request: &CompletionRequest) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(request.prompt.as_bytes());
        h.update(request.sample.to_le_bytes());
        let digest: [u8; 32] = h.finalize().into();
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        seed::rng(self.seed, &["simlab", "backend", &hex])
    }

    fn judge(&self, prompt: &str) -> Completion {
        let persona = templates::section(prompt, "<Preference>", "</Preference>").unwrap_or("");
        let a = templates::section(prompt, "<Item A>", "</Item A>").and_then(SyntheticItem::parse);
        let b = templates::section(prompt, "<Item B>", "</Item B>").and_then(SyntheticItem::parse);
        let margin = match (parse_estimate(persona), a, b) {
            (Some(est), Some(a), Some(b))
                if est.len() == a.features.len() && a.features.len() == b.features.len() =>
            {
                dot(&est, &a.features) - dot(&est, &b.features)
            }
            _ => 0.0,
        };
        let z = self.kappa * margin + self.position_bias;
        let (text, tokens) = selection_tokens(-softplus(-z), -softplus(z));
        Completion {
            text,
            tokens: Some(tokens),
        }
    }

    fn estimate_for(&self, prompt: &str, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let history = match (
            prompt.find(templates::HISTORY_HEADER),
            prompt.rfind(templates::END_MARKER),
        ) {
            (Some(s), Some(e)) if s < e => &prompt[s..e],
            _ => prompt,
        };
        let latent = self.truth.latent_for(history);
        let dim = latent.map_or(self.dim, <[f64]>::len);
        let noise = random_unit(rng, dim);
        let prior = templates::section(
            prompt,
            templates::PAST_PREFERENCE_HEADER,
            templates::HISTORY_HEADER,
        )
        .and_then(parse_estimate)
        .filter(|p| p.len() == dim);
        let drift = match prior {
            Some(p) => normalize(p.iter().zip(&noise).map(|(a, b)| a + b).collect())
                .unwrap_or_else(|| noise.clone()),
            None => noise,
        };
        match (self.mode, latent) {
            (GeneratorMode::Adversarial, Some(l)) => l.iter().map(|x| -x).collect(),
            (GeneratorMode::Quality(q), Some(l)) if q >= 1.0 => l.to_vec(),
            (GeneratorMode::Quality(q), Some(l)) => normalize(
                l.iter()
                    .zip(&drift)
                    .map(|(a, b)| q * a + (1.0 - q) * b)
                    .collect(),
            )
            .unwrap_or(drift),
            (_, None) => drift,
        }
    }

    fn finish(&self, request: &CompletionRequest, text: String) -> Completion {
        let tokens = request.logprobs.then(|| {
            let scores = self
                .scorer
                .sequence_logprobs(&request.prompt, &text)
                .unwrap_or_default();
            WhitespaceTokens
                .split(&text)
                .into_iter()
                .zip(scores)
                .map(|(piece, lp)| crate::modelio::TokenInfo {
                    token: piece.to_string(),
                    logprob: lp,
                    top: Vec::new(),
                })
                .collect()
        });
        Completion { text, tokens }
    }
}

impl Backend for SimBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        let prompt = &request.prompt;
        match templates::classify(prompt) {
            PromptKind::Judge => Ok(self.judge(prompt)),
            PromptKind::Generation | PromptKind::TargetGeneration => {
                let mut rng = self.rng_for(request);
                let est = self.estimate_for(prompt, &mut rng);
                let seen = items_in(prompt).len() / 2;
                let text = format!(
                    "<think>\nWeighing {seen} interactions from the history.\n</think>\nPrefers items aligned with {}.",
                    render_estimate(&est)
                );
                Ok(self.finish(request, text))
            }
            PromptKind::Merge => {
                let ests = all_estimates(prompt);
                let Some(first) = ests.first() else {
                    return Err(Error::Generation("merge prompt carries no estimates".into()));
                };
                let mut sum = vec![0.0; first.len()];
                for e in ests.iter().filter(|e| e.len() == first.len()) {
                    sum.iter_mut().zip(e).for_each(|(s, x)| *s += x);
                }
                let merged = normalize(sum).unwrap_or_else(|| first.clone());
                let text = format!(
                    "<think>\nMerging {} candidate summaries.\n</think>\nPrefers items aligned with {}.",
                    ests.len(),
                    render_estimate(&merged)
                );
                Ok(self.finish(request, text))
            }
            PromptKind::Unknown => Ok(self.finish(request, "No preference information.".into())),
        }
    }

    fn sequence_logprobs(&self, prompt: &str, response: &str) -> Result<Vec<f64>> {
        self.scorer.sequence_logprobs(prompt, response)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        Ok(hashed_embedding(text, 64, self.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn item_rendering_round_trips() {
        let mut rng = seed::rng(3, &["t"]);
        for _ in 0..200 {
            let item = SyntheticItem {
                features: random_item(&mut rng, 8),
            };
            assert_eq!(SyntheticItem::parse(&item.render()), Some(item));
        }
        let est = vec![0.1 + 0.2, -1.0 / 3.0];
        assert_eq!(parse_estimate(&format!("x {} y", render_estimate(&est))), Some(est));
    }

    #[test]
    fn judge_symmetries() {
        let p = [1.0, 0.0];
        let n = [0.0, 1.0];
        assert_eq!(scripted_judge(&[1.0, 1.0], &p, &n, 8.0).unwrap(), 0.5);
        assert_eq!(scripted_judge(&[0.3, -0.9], &p, &n, 0.0).unwrap(), 0.5);
        assert!(scripted_judge(&[1.0], &p, &n, 8.0).is_err());
    }

    #[test]
    fn hand_sigmoid_at_margin() {
        // estimate = latent and latent·(p − n) = 0.5 exactly
        let latent = [1.0, 0.0];
        let p = [0.75, 0.2];
        let n = [0.25, 0.9];
        let prob = scripted_judge(&latent, &p, &n, 8.0).unwrap();
        assert!((prob - 1.0 / (1.0 + (-4.0f64).exp())).abs() < 1e-15);
        assert!((prob - 0.982).abs() < 1e-3);
    }

    #[test]
    fn population_invariants() {
        let cfg = PopulationConfig {
            seed: 11,
            n_users: 20,
            ..Default::default()
        };
        let pop = gen_population(&cfg).unwrap();
        for (h, t) in pop.histories.iter().zip(&pop.truth) {
            assert!((dot(&t.latent, &t.latent) - 1.0).abs() < 1e-12);
            for tr in &h.triples {
                let p = SyntheticItem::parse(&tr.chosen).unwrap();
                let n = SyntheticItem::parse(tr.rejected.as_deref().unwrap()).unwrap();
                let m = dot(&t.latent, &p.features) - dot(&t.latent, &n.features);
                assert!(m >= cfg.pair_margin);
                // the oracle choice is the argmax of latent·features
                assert!(dot(&t.latent, &p.features) > dot(&t.latent, &n.features));
            }
        }
        let again = gen_population(&cfg).unwrap();
        assert_eq!(pop.histories, again.histories);
        assert!(gen_population(&PopulationConfig { dim: 1, ..cfg.clone() }).is_err());
        assert!(gen_population(&PopulationConfig { history_len: 3, ..cfg }).is_err());
    }

    #[test]
    fn owner_lookup_uses_majority() {
        let pop = gen_population(&PopulationConfig {
            n_users: 3,
            ..Default::default()
        })
        .unwrap();
        let gt = GroundTruth::from_population(&pop);
        let h = &pop.histories[1];
        let mut text = templates::render_triples(&h.triples[..3]);
        text.push_str(&pop.histories[2].triples[0].chosen);
        assert_eq!(gt.owner_of(&text), Some(h.user_id.as_str()));
        assert_eq!(gt.owner_of("nothing here"), None);
    }
}
