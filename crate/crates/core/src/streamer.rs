//! Full-history and streaming preference inference.
//!
//! Streaming keeps a per-user [`StreamState`]: the current summary and the
//! history frontier it covers. Each update renders only the interactions past
//! the frontier, with the current summary in the past-preference slot.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{even_boundaries, read_jsonl, segment, write_jsonl, HistorySegment, PreferenceSummary, UserHistory};
use crate::error::{Error, Result};
use crate::modelio::{templates, Client};
use crate::par;

pub const STATE_FILE: &str = "states.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamState {
    pub user_id: String,
    #[serde(rename = "summary")]
    pub current: Option<PreferenceSummary>,
    #[serde(rename = "frontier")]
    pub consumed_until: usize,
    /// Ids of every summary produced for this user, oldest first; the last
    /// one is `current`.
    pub lineage: Vec<String>,
}

impl StreamState {
    pub fn empty(user_id: impl Into<String>) -> Self {
        Self {
            user_id: user_id.into(),
            current: None,
            consumed_until: 0,
            lineage: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let covered = self.current.as_ref().map_or(0, |s| s.covers.end);
        if covered != self.consumed_until {
            return Err(Error::validation(format!(
                "user {}: frontier {} but summary covers up to {covered}",
                self.user_id, self.consumed_until
            )));
        }
        if self.current.as_ref().map(|s| &s.id) != self.lineage.last() {
            return Err(Error::validation(format!(
                "user {}: lineage does not end at the current summary",
                self.user_id
            )));
        }
        Ok(())
    }
}

fn summarize(
    generator: &Client,
    prior: Option<&PreferenceSummary>,
    history: &UserHistory,
    seg: HistorySegment,
    empty_marker: &str,
) -> Result<PreferenceSummary> {
    let text = templates::render_triples(history.slice(seg)?);
    let (_, g) = generator.generate_summary(prior, &text, empty_marker, 0)?;
    PreferenceSummary::new(g.summary, g.reasoning, prior, seg, g.token_count)
}

/// One generation pass over the whole history.
pub fn infer_full(generator: &Client, history: &UserHistory, empty_marker: &str) -> Result<PreferenceSummary> {
    let seg = HistorySegment::new(0, history.len())?;
    summarize(generator, None, history, seg, empty_marker)
}

/// Advances `state` over `new_segment`, which must start at the frontier.
pub fn update(
    generator: &Client,
    state: &StreamState,
    history: &UserHistory,
    new_segment: HistorySegment,
    empty_marker: &str,
) -> Result<StreamState> {
    if state.user_id != history.user_id {
        return Err(Error::contract(format!(
            "state of {} applied to history of {}",
            state.user_id, history.user_id
        )));
    }
    if new_segment.start != state.consumed_until {
        return Err(Error::contract(format!(
            "segment [{}, {}) does not start at frontier {}",
            new_segment.start, new_segment.end, state.consumed_until
        )));
    }
    let next = summarize(generator, state.current.as_ref(), history, new_segment, empty_marker)?;
    let mut lineage = state.lineage.clone();
    lineage.push(next.id.clone());
    Ok(StreamState {
        user_id: state.user_id.clone(),
        consumed_until: new_segment.end,
        current: Some(next),
        lineage,
    })
}

/// Streams `segments` in order starting from `state`. On failure the error
/// carries the summaries produced so far.
pub fn stream_segments(
    generator: &Client,
    state: StreamState,
    history: &UserHistory,
    segments: &[HistorySegment],
    empty_marker: &str,
) -> Result<StreamState> {
    let mut state = state;
    let mut produced: Vec<PreferenceSummary> = Vec::new();
    for seg in segments {
        match update(generator, &state, history, *seg, empty_marker) {
            Ok(next) => {
                produced.extend(next.current.clone());
                state = next;
            }
            Err(e) => {
                return Err(Error::Inference {
                    partial: produced,
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(state)
}

/// Splits the history into `num_chunks` near-equal chunks and summarizes
/// them in sequence, each conditioned on the previous summary.
pub fn infer_streaming(
    generator: &Client,
    history: &UserHistory,
    num_chunks: usize,
    empty_marker: &str,
) -> Result<StreamState> {
    let boundaries = even_boundaries(history.len(), num_chunks)?;
    let segments = segment(history, &boundaries)?;
    stream_segments(generator, StreamState::empty(&history.user_id), history, &segments, empty_marker)
}

/// Continues a saved state over the rest of the history in `num_chunks`
/// chunks. A state already at the end is returned unchanged.
pub fn resume(
    generator: &Client,
    state: StreamState,
    history: &UserHistory,
    num_chunks: usize,
    empty_marker: &str,
) -> Result<StreamState> {
    state.validate()?;
    let start = state.consumed_until;
    if start > history.len() {
        return Err(Error::contract(format!(
            "user {}: frontier {start} beyond history length {}",
            history.user_id,
            history.len()
        )));
    }
    let remaining = history.len() - start;
    if remaining == 0 {
        return Ok(state);
    }
    let chunks = num_chunks.min(remaining);
    let segments = even_boundaries(remaining, chunks)?
        .into_iter()
        .scan(start, |prev, b| {
            let seg = HistorySegment::new(*prev, start + b);
            *prev = start + b;
            Some(seg)
        })
        .collect::<Result<Vec<_>>>()?;
    stream_segments(generator, state, history, &segments, empty_marker)
}

pub fn load_states(dir: impl AsRef<Path>) -> Result<Vec<StreamState>> {
    let path = dir.as_ref().join(STATE_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let states: Vec<StreamState> = read_jsonl(&path)?;
    for s in &states {
        s.validate()?;
    }
    Ok(states)
}

pub fn save_states(dir: impl AsRef<Path>, states: &[StreamState]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })?;
    write_jsonl(dir.join(STATE_FILE), states)
}

/// Streams every user concurrently, resuming from `saved` where present.
/// Per-user failures are returned in place.
pub fn stream_all(
    generator: &Client,
    histories: &[UserHistory],
    saved: &[StreamState],
    num_chunks: usize,
    empty_marker: &str,
    jobs: usize,
) -> Vec<Result<StreamState>> {
    let by_user: std::collections::HashMap<&str, &StreamState> =
        saved.iter().map(|s| (s.user_id.as_str(), s)).collect();
    par::map(histories, jobs, |h| {
        let state = by_user
            .get(h.user_id.as_str())
            .map(|s| (*s).clone())
            .unwrap_or_else(|| StreamState::empty(&h.user_id));
        resume(generator, state, h, num_chunks, empty_marker)
    })
}
