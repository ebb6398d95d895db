//! Completion parsing: reasoning delimiters, judge selections and the
//! label-token probabilities at the judge's decision position.

use serde::{Deserialize, Serialize};

use super::TokenInfo;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
}

impl Choice {
    pub fn other(self) -> Choice {
        match self {
            Choice::A => Choice::B,
            Choice::B => Choice::A,
        }
    }

    fn from_char(c: char) -> Option<Choice> {
        match c {
            'A' => Some(Choice::A),
            'B' => Some(Choice::B),
            _ => None,
        }
    }
}

/// Splits a completion into `(reasoning, summary)`.
///
/// With both markers present the reasoning is the text between them and the
/// summary is everything outside them. A lone closing marker (some servers
/// strip the opening tag) is treated as ending the reasoning. Without markers
/// the completion is returned verbatim as the summary.
pub fn split_reasoning(completion: &str, open: &str, close: &str) -> (Option<String>, String) {
    if let Some(open_at) = completion.find(open) {
        let body = open_at + open.len();
        if let Some(close_rel) = completion[body..].find(close) {
            let reasoning = completion[body..body + close_rel].trim().to_string();
            let before = &completion[..open_at];
            let after = &completion[body + close_rel + close.len()..];
            let summary = format!("{}{}", before.trim(), after.trim())
                .trim()
                .to_string();
            return (Some(reasoning), summary);
        }
    } else if let Some(close_at) = completion.find(close) {
        let reasoning = completion[..close_at].trim().to_string();
        let summary = completion[close_at + close.len()..].trim().to_string();
        return (Some(reasoning), summary);
    }
    (None, completion.to_string())
}

/// Parses a `{"selection": "Item A"}` reply.
///
/// Surrounding whitespace and a Markdown code fence are always accepted. In
/// lenient mode the selection object may also be embedded in other text.
pub fn parse_selection(reply: &str, strict: bool) -> Option<Choice> {
    let body = strip_fence(reply.trim());
    if let Some(choice) = selection_from_json(body) {
        return Some(choice);
    }
    if strict {
        return None;
    }
    let start = body.find('{')?;
    let end = body.rfind('}')?;
    (end > start)
        .then(|| selection_from_json(&body[start..=end]))
        .flatten()
}

fn selection_from_json(text: &str) -> Option<Choice> {
    // parsed as a map so array-shaped replies are not accepted positionally
    let reply: serde_json::Map<String, serde_json::Value> = serde_json::from_str(text).ok()?;
    match reply.get("selection")?.as_str()?.trim() {
        "Item A" => Some(Choice::A),
        "Item B" => Some(Choice::B),
        _ => None,
    }
}

fn strip_fence(text: &str) -> &str {
    let Some(rest) = text.strip_prefix("```") else {
        return text;
    };
    let Some(inner) = rest.strip_suffix("```") else {
        return text;
    };
    // optional language tag on the opening fence line
    let inner = match inner.find('\n') {
        Some(nl) if inner[..nl].chars().all(|c| c.is_ascii_alphanumeric()) => &inner[nl + 1..],
        _ => inner,
    };
    inner.trim()
}

/// Log-probabilities of the `A` and `B` labels at the decision position,
/// i.e. the token carrying the letter after `"selection": "Item `.
///
/// A label missing from the returned top-k alternatives gets `-inf`.
pub fn label_logprobs(tokens: &[TokenInfo]) -> Option<(f64, f64)> {
    let full: String = tokens.iter().map(|t| t.token.as_str()).collect();
    let key = full.find("\"selection\"")?;
    let item = key + full[key..].find("Item")? + "Item".len();
    let label_pos = item + (full[item..].len() - full[item..].trim_start().len());
    Choice::from_char(full[label_pos..].chars().next()?)?;

    let mut start = 0;
    for t in tokens {
        let end = start + t.token.len();
        if label_pos < end {
            let offset = label_pos - start;
            let prefix = &t.token[..offset];
            let mut lp_a = f64::NEG_INFINITY;
            let mut lp_b = f64::NEG_INFINITY;
            let candidates = t
                .top
                .iter()
                .map(|(tok, lp)| (tok.as_str(), *lp))
                .chain(std::iter::once((t.token.as_str(), t.logprob)));
            for (alt, lp) in candidates {
                let Some(rest) = alt.strip_prefix(prefix) else {
                    continue;
                };
                match rest.chars().next().and_then(Choice::from_char) {
                    Some(Choice::A) => lp_a = lp_a.max(lp),
                    Some(Choice::B) => lp_b = lp_b.max(lp),
                    None => {}
                }
            }
            return Some((lp_a, lp_b));
        }
        start = end;
    }
    None
}

/// `exp(a) / (exp(a) + exp(b))`, evaluated without overflow.
pub fn prob_first(lp_a: f64, lp_b: f64) -> f64 {
    if lp_a == f64::NEG_INFINITY && lp_b == f64::NEG_INFINITY {
        return 0.5;
    }
    let m = lp_a.max(lp_b);
    let ea = (lp_a - m).exp();
    let eb = (lp_b - m).exp();
    ea / (ea + eb)
}
