//! Prompt templates. The preference-generation and judge templates are
//! reproduced verbatim; the target-aware and merge prompts extend them.

use crate::data::InteractionTriple;

pub const GENERATION_INSTRUCTION: &str = "Analyze the past preference summary and the following user interaction history to summarize the comprehensive user preferences in concise language. If past preferences are provided, adjust the preferences by combining past preferences with those reflected in current behavior, removing conflicting parts, and integrating new insights. If no past preferences are provided, derive the final preferences solely from user behavior. The user's history will be provided as a sequence of triples, where each triple is (QUERY, CHOSEN ITEM BY THE USER, REJECTED ITEM BY THE USER).";

pub const PAST_PREFERENCE_HEADER: &str = "=====Past Preference Summary=====";
pub const HISTORY_HEADER: &str = "=====Interaction History=====";
pub const END_MARKER: &str = "=====END=====";
pub const TARGET_HEADER: &str = "=====Target Interaction=====";

pub const GENERATION_CLOSING: &str =
    "Now, given the above user's past preference summary and the interaction history, summarize the user preferences.";

pub const TARGET_CLOSING: &str = "Now, given the above user's past preference summary and the interaction history, summarize the user preferences, focusing on the preferences that explain which candidate the user would choose in the target interaction. The user's actual choice is not revealed.";

pub const JUDGE_INSTRUCTION: &str = "Determine which response the user prefers based on the user's preferences. Please output your selection below in a json format by filling in the placeholders in []: {\"selection\": \"[Item A / Item B]\"}";

pub const JUDGE_CLOSING: &str =
    "Now, ONLY output your selection without any other text outside of this specified structure.";

pub const MERGE_INSTRUCTION: &str = "The following candidate preference summaries were each derived from the same user's interaction history, together with the reasoning behind each one. Merge them into a single, comprehensive summary of the user's preferences. Synthesize a non-redundant and holistic view: keep every distinct preference, combine overlapping ones, and drop repetition.";

pub const MERGE_CLOSING: &str =
    "Now, reason about the candidates above and output the merged preference summary.";

/// Placeholder used in the context slot when a triple has no context.
pub const NO_CONTEXT: &str = "None";

/// Renders triples as the history block: one `(QUERY, CHOSEN, REJECTED)`
/// tuple per line, numbered from 1.
pub fn render_triples<'a>(triples: impl IntoIterator<Item = &'a InteractionTriple>) -> String {
    triples
        .into_iter()
        .enumerate()
        .map(|(i, t)| render_triple(i + 1, t))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_triple(number: usize, t: &InteractionTriple) -> String {
    format!(
        "Triple {number}: ({}, {}, {})",
        t.context.as_deref().unwrap_or(NO_CONTEXT),
        t.chosen,
        t.rejected.as_deref().unwrap_or(NO_CONTEXT)
    )
}

pub fn preference_generation(past: &str, history: &str) -> String {
    format!(
        "{GENERATION_INSTRUCTION}\n\n{PAST_PREFERENCE_HEADER}\n{past}\n\n{HISTORY_HEADER}\n{history}\n\n{END_MARKER}\n\n{GENERATION_CLOSING}"
    )
}

/// Target-aware generation: the history block is followed by one unlabeled
/// target showing only its context and the two candidates.
pub fn target_generation(
    past: &str,
    history: &str,
    context: Option<&str>,
    first: &str,
    second: &str,
) -> String {
    format!(
        "{GENERATION_INSTRUCTION}\n\n{PAST_PREFERENCE_HEADER}\n{past}\n\n{HISTORY_HEADER}\n{history}\n\n{TARGET_HEADER}\nQuery: {}\nCandidate 1: {first}\nCandidate 2: {second}\n\n{END_MARKER}\n\n{TARGET_CLOSING}",
        context.unwrap_or(NO_CONTEXT)
    )
}

pub fn judge(prompt: &str, persona: &str, item_a: &str, item_b: &str) -> String {
    format!(
        "{JUDGE_INSTRUCTION}\n\n<Prompt>\n{prompt}\n</Prompt>\n\n<Preference>\n{persona}\n</Preference>\n\n<Item A>\n{item_a}\n</Item A>\n\n<Item B>\n{item_b}\n</Item B>\n\n{JUDGE_CLOSING}"
    )
}

/// Merge prompt over `(reasoning, summary)` candidates.
pub fn merge(candidates: &[(Option<&str>, &str)]) -> String {
    let mut out = String::from(MERGE_INSTRUCTION);
    for (i, (reasoning, summary)) in candidates.iter().enumerate() {
        out.push_str(&format!(
            "\n\n=====Candidate {}=====\nReasoning: {}\nSummary: {}",
            i + 1,
            reasoning.unwrap_or(NO_CONTEXT),
            summary
        ));
    }
    out.push_str(&format!("\n\n{END_MARKER}\n\n{MERGE_CLOSING}"));
    out
}

/// Which template a rendered prompt came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Generation,
    TargetGeneration,
    Judge,
    Merge,
    Unknown,
}

pub fn classify(prompt: &str) -> PromptKind {
    if prompt.starts_with(JUDGE_INSTRUCTION) {
        PromptKind::Judge
    } else if prompt.starts_with(MERGE_INSTRUCTION) {
        PromptKind::Merge
    } else if prompt.starts_with(GENERATION_INSTRUCTION) {
        if prompt.contains(TARGET_HEADER) {
            PromptKind::TargetGeneration
        } else {
            PromptKind::Generation
        }
    } else {
        PromptKind::Unknown
    }
}

/// Text between `open` and `close` markers, searching from the first `open`.
pub fn section<'a>(prompt: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = prompt.find(open)? + open.len();
    let len = prompt[start..].find(close)?;
    Some(prompt[start..start + len].trim_matches('\n'))
}
