//! Deterministic scripted backend keyed by a hash of (seed, request).
//!
//! Every output is a pure function of the seed and the request content, so
//! replays are byte-identical across processes and thread schedules.

use sha2::{Digest, Sha256};

use super::templates::{self, PromptKind};
use super::{param, Backend, Completion, CompletionRequest, TokenCounter, TokenInfo, WhitespaceTokens};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct HashMock {
    pub seed: u64,
    /// When set, every token is scored with this logprob.
    pub constant_logprob: Option<f64>,
    pub dim: usize,
    /// When false, completions come back without token logprobs.
    pub logprobs: bool,
}

impl Default for HashMock {
    fn default() -> Self {
        Self {
            seed: 0,
            constant_logprob: None,
            dim: 64,
            logprobs: true,
        }
    }
}

impl HashMock {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn from_params(params: &[(String, String)]) -> Result<Self> {
        let mut mock = Self::default();
        if let Some(seed) = param(params, "seed")? {
            mock.seed = seed;
        }
        mock.constant_logprob = param(params, "logprob")?;
        if let Some(dim) = param(params, "dim")? {
            mock.dim = dim;
        }
        if let Some(lp) = param(params, "logprobs")? {
            mock.logprobs = lp;
        }
        if mock.dim == 0 {
            return Err(Error::config("mock embedding dim must be positive"));
        }
        Ok(mock)
    }

    fn digest(&self, parts: &[&[u8]]) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p);
        }
        h.finalize().into()
    }

    /// Uniform value in (0, 1) from a digest.
    fn unit(&self, parts: &[&[u8]]) -> f64 {
        let d = self.digest(parts);
        let x = u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"));
        ((x >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    fn token_logprob(&self, context: &[u8], position: usize) -> f64 {
        match self.constant_logprob {
            Some(lp) => lp,
            None => {
                let u = self.unit(&[b"tok", context, &position.to_le_bytes()]);
                -0.01 - 2.99 * u
            }
        }
    }

    fn tokens_for(&self, text: &str, context: &[u8]) -> Vec<TokenInfo> {
        WhitespaceTokens
            .split(text)
            .into_iter()
            .enumerate()
            .map(|(i, piece)| TokenInfo {
                token: piece.to_string(),
                logprob: self.token_logprob(context, i),
                top: Vec::new(),
            })
            .collect()
    }
}

/// Selection reply tokenized so the label sits in its own token, with both
/// labels among the alternatives.
pub fn selection_tokens(lp_a: f64, lp_b: f64) -> (String, Vec<TokenInfo>) {
    let choose_a = lp_a >= lp_b;
    let label = if choose_a { " A" } else { " B" };
    let plain = |t: &str| TokenInfo {
        token: t.into(),
        logprob: 0.0,
        top: Vec::new(),
    };
    let tokens = vec![
        plain("{\""),
        plain("selection"),
        plain("\":"),
        plain(" \""),
        plain("Item"),
        TokenInfo {
            token: label.into(),
            logprob: if choose_a { lp_a } else { lp_b },
            top: vec![(" A".into(), lp_a), (" B".into(), lp_b)],
        },
        plain("\"}"),
    ];
    let text = tokens.iter().map(|t| t.token.as_str()).collect();
    (text, tokens)
}

/// Signed feature hashing of lowercase words into `dim` buckets.
pub fn hashed_embedding(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for word in text.split_whitespace() {
        let word = word.to_lowercase();
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(word.as_bytes());
        let d: [u8; 32] = h.finalize().into();
        let bucket = u64::from_le_bytes(d[..8].try_into().expect("32 bytes")) as usize % dim;
        let sign = if d[8] & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }
    if v.iter().all(|x| *x == 0.0) {
        v[0] = 1.0;
    }
    v
}

impl Backend for HashMock {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        let prompt = request.prompt.as_bytes();
        let sample = request.sample.to_le_bytes();
        if templates::classify(&request.prompt) == PromptKind::Judge {
            let u = self.unit(&[b"judge", prompt]).clamp(0.05, 0.95);
            let (text, tokens) = selection_tokens(u.ln(), (1.0 - u).ln());
            if !self.logprobs {
                // sampled replies follow the same underlying probability
                let draw = self.unit(&[b"draw", prompt, &sample]);
                let choice = if draw < u { "Item A" } else { "Item B" };
                return Ok(Completion {
                    text: format!("{{\"selection\": \"{choice}\"}}"),
                    tokens: None,
                });
            }
            return Ok(Completion {
                text,
                tokens: Some(tokens),
            });
        }
        let d = self.digest(&[b"gen", prompt, &sample]);
        let hex: String = d.iter().take(8).map(|b| format!("{b:02x}")).collect();
        let text = format!(
            "<think>\nReading the history; cue {}.\n</think>\nThe user prefers profile-{hex}.",
            &hex[..6]
        );
        let mut context = prompt.to_vec();
        context.extend_from_slice(&sample);
        let tokens = self.logprobs.then(|| self.tokens_for(&text, &context));
        Ok(Completion { text, tokens })
    }

    fn sequence_logprobs(&self, prompt: &str, response: &str) -> Result<Vec<f64>> {
        let n = WhitespaceTokens.count(response);
        let mut context = prompt.as_bytes().to_vec();
        context.extend_from_slice(response.as_bytes());
        Ok((0..n).map(|i| self.token_logprob(&context, i)).collect())
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        Ok(hashed_embedding(text, self.dim, self.seed))
    }
}
