//! Domain data model shared by every pipeline stage: interaction triples,
//! user histories, half-open history segments and preference summaries.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::sha256_hex;

/// One preference event: under `context`, the user preferred `chosen` over
/// `rejected`. `rejected` is absent for positive-only feedback.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionTriple {
    pub index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    pub chosen: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<String>,
}

impl InteractionTriple {
    pub fn new(
        index: u64,
        context: Option<String>,
        chosen: impl Into<String>,
        rejected: Option<String>,
    ) -> Result<Self> {
        let triple = Self {
            index,
            // an empty context carries no information
            context: context.filter(|c| !c.is_empty()),
            chosen: chosen.into(),
            rejected,
        };
        triple.validate()?;
        Ok(triple)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chosen.is_empty() {
            return Err(Error::validation(format!(
                "triple {}: chosen item is empty",
                self.index
            )));
        }
        if self.rejected.as_deref() == Some(self.chosen.as_str()) {
            return Err(Error::validation(format!(
                "triple {}: rejected item equals chosen item",
                self.index
            )));
        }
        Ok(())
    }

    /// True when the triple carries a full preference pair.
    pub fn is_paired(&self) -> bool {
        self.rejected.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawHistory")]
pub struct UserHistory {
    pub user_id: String,
    pub dataset_tag: String,
    pub triples: Vec<InteractionTriple>,
}

#[derive(Deserialize)]
struct RawHistory {
    user_id: String,
    #[serde(default)]
    dataset_tag: String,
    triples: Vec<InteractionTriple>,
}

impl TryFrom<RawHistory> for UserHistory {
    type Error = Error;

    fn try_from(raw: RawHistory) -> Result<Self> {
        UserHistory::new(raw.user_id, raw.dataset_tag, raw.triples)
    }
}

impl UserHistory {
    pub fn new(
        user_id: impl Into<String>,
        dataset_tag: impl Into<String>,
        triples: Vec<InteractionTriple>,
    ) -> Result<Self> {
        let history = Self {
            user_id: user_id.into(),
            dataset_tag: dataset_tag.into(),
            triples,
        };
        history.validate()?;
        Ok(history)
    }

    pub fn validate(&self) -> Result<()> {
        if self.triples.is_empty() {
            return Err(Error::validation(format!(
                "history of user {} is empty",
                self.user_id
            )));
        }
        for triple in &self.triples {
            triple.validate()?;
        }
        if let Some(w) = self.triples.windows(2).find(|w| w[0].index >= w[1].index) {
            return Err(Error::validation(format!(
                "history of user {}: indices not strictly increasing ({} then {})",
                self.user_id, w[0].index, w[1].index
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Triples covered by a positional segment.
    pub fn slice(&self, segment: HistorySegment) -> Result<&[InteractionTriple]> {
        if segment.end > self.triples.len() {
            return Err(Error::contract(format!(
                "segment [{}, {}) exceeds history length {}",
                segment.start,
                segment.end,
                self.triples.len()
            )));
        }
        Ok(&self.triples[segment.start..segment.end])
    }

    /// Position of the first triple whose index is `>= index`.
    pub fn position_of_index(&self, index: u64) -> usize {
        self.triples.partition_point(|t| t.index < index)
    }

    pub fn find_index(&self, index: u64) -> Option<&InteractionTriple> {
        self.triples
            .binary_search_by_key(&index, |t| t.index)
            .ok()
            .map(|pos| &self.triples[pos])
    }

    /// Pairs of positions whose triples share an item. Informational only;
    /// histories with duplicates are still valid.
    pub fn lint_duplicates(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.triples.len() {
            for j in (i + 1)..self.triples.len() {
                let (a, b) = (&self.triples[i], &self.triples[j]);
                let items_a: HashSet<&str> =
                    std::iter::once(a.chosen.as_str()).chain(a.rejected.as_deref()).collect();
                let shared = std::iter::once(b.chosen.as_str())
                    .chain(b.rejected.as_deref())
                    .any(|item| items_a.contains(item));
                if shared {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Half-open positional range `[start, end)` over a history's triples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 2]", into = "[usize; 2]")]
pub struct HistorySegment {
    pub start: usize,
    pub end: usize,
}

impl HistorySegment {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(Error::validation(format!(
                "segment [{start}, {end}) is empty or inverted"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, position: usize) -> bool {
        (self.start..self.end).contains(&position)
    }
}

impl TryFrom<[usize; 2]> for HistorySegment {
    type Error = Error;

    fn try_from(v: [usize; 2]) -> Result<Self> {
        HistorySegment::new(v[0], v[1])
    }
}

impl From<HistorySegment> for [usize; 2] {
    fn from(s: HistorySegment) -> Self {
        [s.start, s.end]
    }
}

/// Splits a history into contiguous segments ending at each boundary.
pub fn segment(history: &UserHistory, boundaries: &[usize]) -> Result<Vec<HistorySegment>> {
    let Some(&last) = boundaries.last() else {
        return Err(Error::validation("no segment boundaries given"));
    };
    if last > history.len() {
        return Err(Error::validation(format!(
            "last boundary {last} exceeds history length {}",
            history.len()
        )));
    }
    let mut start = 0;
    let mut out = Vec::with_capacity(boundaries.len());
    for &end in boundaries {
        if end <= start {
            return Err(Error::validation(format!(
                "boundaries must be strictly increasing and positive, got {boundaries:?}"
            )));
        }
        out.push(HistorySegment { start, end });
        start = end;
    }
    Ok(out)
}

/// Boundaries for `chunks` contiguous near-equal chunks of `len` items.
/// The remainder goes into the last chunk.
pub fn even_boundaries(len: usize, chunks: usize) -> Result<Vec<usize>> {
    if chunks == 0 || chunks > len {
        return Err(Error::validation(format!(
            "cannot split {len} items into {chunks} chunks"
        )));
    }
    let size = len / chunks;
    Ok((1..chunks).map(|i| i * size).chain(std::iter::once(len)).collect())
}

/// Drops every rejected item, simulating implicit-feedback logs.
pub fn strip_negatives(history: &UserHistory) -> UserHistory {
    UserHistory {
        user_id: history.user_id.clone(),
        dataset_tag: history.dataset_tag.clone(),
        triples: history
            .triples
            .iter()
            .map(|t| InteractionTriple {
                rejected: None,
                ..t.clone()
            })
            .collect(),
    }
}

/// A textual preference summary with optional reasoning and lineage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSummary {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    pub covers: HistorySegment,
    pub token_count: usize,
}

impl PreferenceSummary {
    /// Builds a summary whose id is a content hash over its parent, coverage
    /// and text, so parent chains cannot form cycles.
    pub fn new(
        text: impl Into<String>,
        reasoning: Option<String>,
        parent: Option<&PreferenceSummary>,
        covers: HistorySegment,
        token_count: usize,
    ) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::validation("summary text is empty"));
        }
        if let Some(p) = parent {
            if covers.end < p.covers.end {
                return Err(Error::contract(format!(
                    "child summary ends at {} before its parent ({})",
                    covers.end, p.covers.end
                )));
            }
        }
        let parent_id = parent.map(|p| p.id.clone());
        let material = format!(
            "{}\u{1f}{}\u{1f}{}\u{1f}{}",
            parent_id.as_deref().unwrap_or(""),
            covers.start,
            covers.end,
            text
        );
        let id = sha256_hex(material.as_bytes())[..16].to_string();
        Ok(Self {
            id,
            text,
            reasoning,
            parent_id,
            covers,
            token_count,
        })
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let line = line.trim_start_matches('\u{feff}');
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(line).map_err(|source| Error::Json {
            context: format!("{}:{}", path.display(), lineno + 1),
            source,
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
        w.write_all(line.as_bytes()).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn history(n: usize) -> UserHistory {
        let triples = (0..n)
            .map(|i| {
                InteractionTriple::new(
                    i as u64 * 2,
                    (i % 3 == 0).then(|| format!("ctx {i}")),
                    format!("p{i}"),
                    (i % 4 != 1).then(|| format!("n{i}")),
                )
                .unwrap()
            })
            .collect();
        UserHistory::new("u", "toy", triples).unwrap()
    }

    #[test]
    fn three_period_segmentation() {
        let h = history(9);
        let segs = segment(&h, &[3, 6, 9]).unwrap();
        assert_eq!(
            segs,
            vec![
                HistorySegment::new(0, 3).unwrap(),
                HistorySegment::new(3, 6).unwrap(),
                HistorySegment::new(6, 9).unwrap()
            ]
        );
    }

    #[test]
    fn identity_partition() {
        let h = history(7);
        assert_eq!(segment(&h, &[7]).unwrap(), vec![HistorySegment::new(0, 7).unwrap()]);
    }

    #[test]
    fn rejects_bad_boundaries() {
        let h = history(9);
        assert!(segment(&h, &[3, 3, 9]).is_err());
        assert!(segment(&h, &[5, 2]).is_err());
        assert!(segment(&h, &[0, 4]).is_err());
        assert!(segment(&h, &[4, 10]).is_err());
        assert!(segment(&h, &[]).is_err());
    }

    #[test]
    fn even_boundaries_put_remainder_last() {
        assert_eq!(even_boundaries(9, 2).unwrap(), vec![4, 9]);
        assert_eq!(even_boundaries(10, 3).unwrap(), vec![3, 6, 10]);
        assert_eq!(even_boundaries(5, 1).unwrap(), vec![5]);
        assert!(even_boundaries(2, 3).is_err());
        assert!(even_boundaries(2, 0).is_err());
    }

    #[test]
    fn triple_invariants() {
        assert!(InteractionTriple::new(0, None, "", None).is_err());
        assert!(InteractionTriple::new(0, None, "x", Some("x".into())).is_err());
        let t = InteractionTriple::new(0, Some(String::new()), "x", None).unwrap();
        assert_eq!(t.context, None);
    }

    #[test]
    fn history_invariants() {
        let t0 = InteractionTriple::new(3, None, "a", None).unwrap();
        let t1 = InteractionTriple::new(3, None, "b", None).unwrap();
        assert!(UserHistory::new("u", "d", vec![t0.clone(), t1]).is_err());
        assert!(UserHistory::new("u", "d", vec![]).is_err());
        let bad = r#"{"user_id":"u","dataset_tag":"d","triples":[{"index":2,"chosen":"a"},{"index":1,"chosen":"b"}]}"#;
        assert!(serde_json::from_str::<UserHistory>(bad).is_err());
    }

    #[test]
    fn jsonl_schema() {
        let line = r#"{"user_id":"u1","dataset_tag":"MIND","triples":[{"index":0,"chosen":"a","rejected":"b"},{"index":4,"context":"q","chosen":"c"}]}"#;
        let h: UserHistory = serde_json::from_str(line).unwrap();
        assert_eq!(h.triples[1].context.as_deref(), Some("q"));
        assert_eq!(serde_json::to_string(&h).unwrap(), line);
    }

    #[test]
    fn strip_negatives_examples() {
        let h = history(8);
        let s = strip_negatives(&h);
        assert!(s.triples.iter().all(|t| t.rejected.is_none()));
        assert_eq!(s.len(), h.len());
        for (a, b) in h.triples.iter().zip(&s.triples) {
            assert_eq!((a.index, &a.context, &a.chosen), (b.index, &b.context, &b.chosen));
        }
        let again = strip_negatives(&s);
        assert_eq!(
            serde_json::to_string(&again).unwrap(),
            serde_json::to_string(&s).unwrap()
        );
    }

    #[test]
    fn duplicate_lint() {
        let triples = vec![
            InteractionTriple::new(0, None, "a", Some("b".into())).unwrap(),
            InteractionTriple::new(1, None, "c", Some("d".into())).unwrap(),
            InteractionTriple::new(2, None, "b", None).unwrap(),
        ];
        let h = UserHistory::new("u", "d", triples).unwrap();
        assert_eq!(h.lint_duplicates(), vec![(0, 2)]);
    }

    #[test]
    fn summary_ids_follow_lineage() {
        let s1 = PreferenceSummary::new("likes x", None, None, HistorySegment::new(0, 3).unwrap(), 2).unwrap();
        let s2 = PreferenceSummary::new("likes x", None, Some(&s1), HistorySegment::new(3, 6).unwrap(), 2).unwrap();
        assert_ne!(s1.id, s2.id);
        assert_eq!(s2.parent_id.as_deref(), Some(s1.id.as_str()));
        assert!(PreferenceSummary::new("y", None, Some(&s2), HistorySegment::new(0, 2).unwrap(), 1).is_err());
        assert!(PreferenceSummary::new("  ", None, None, HistorySegment::new(0, 2).unwrap(), 1).is_err());
    }

    fn arb_history() -> impl Strategy<Value = UserHistory> {
        let triple = (
            proptest::option::of("[a-z ]{0,6}"),
            "[a-zA-Z0-9 é]{1,8}",
            proptest::option::of("[a-zA-Z0-9]{1,8}"),
            1u64..5,
        );
        proptest::collection::vec(triple, 1..20).prop_map(|raw| {
            let mut index = 0;
            let triples = raw
                .into_iter()
                .map(|(c, p, n, step)| {
                    index += step;
                    let n = n.filter(|n| *n != p);
                    InteractionTriple::new(index, c, p, n).unwrap()
                })
                .collect();
            UserHistory::new("user", "tag", triples).unwrap()
        })
    }

    proptest! {
        #[test]
        fn serialization_round_trip(h in arb_history()) {
            let line = serde_json::to_string(&h).unwrap();
            let back: UserHistory = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(back, h);
        }

        #[test]
        fn strip_negatives_preserves_chosen_multiset(h in arb_history()) {
            let s = strip_negatives(&h);
            let mut before: Vec<_> = h.triples.iter().map(|t| t.chosen.clone()).collect();
            let mut after: Vec<_> = s.triples.iter().map(|t| t.chosen.clone()).collect();
            before.sort();
            after.sort();
            prop_assert_eq!(before, after);
            prop_assert_eq!(strip_negatives(&s), s);
        }
    }
}
