//! Context rewriting (marker highlighting, attached evidence blocks,
//! filtering) and the prompt templates used by every method.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segment::SegmentedContext;

pub const DEFAULT_OPEN: &str = "<start_important>";
pub const DEFAULT_CLOSE: &str = "<end_important>";

/// The fixed answer for questions the context cannot answer.
pub const REJECTION: &str = "I cannot answer based on the given context.";

const QA_INSTRUCTION: &str = "Directly answer the question based on the context passage, no explanation is needed. If the context does not contain any evidence, output \"I cannot answer based on the given context.\"";
const COT_SENTENCE: &str = "Think step by step to provide the answer.";
const PROMPT_ELICIT_INSTRUCTION: &str = "Please find the supporting evidence sentences from the context for the question, then copy-paste the original text to output. Template for output: '- [sentence1] - [sentence2] ...'";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HighlightError {
    #[error("marker {marker:?} already occurs in the context at byte {offset}")]
    MarkerCollision { marker: String, offset: usize },
    #[error("markers must be non-empty, distinct, and not contain one another")]
    BadMarkers,
    #[error("selected index {index} out of range for {m} sentences")]
    InvalidSelection { index: usize, m: usize },
    #[error("filter strategy with an empty selection would leave no context")]
    EmptyFilter,
    #[error("unbalanced markers at byte {offset}")]
    Unbalanced { offset: usize },
    #[error("the {0} strategy cannot be undone")]
    NotInvertible(Strategy),
    #[error("context and question must be non-empty")]
    EmptyPromptField,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Markers {
    pub open: String,
    pub close: String,
}

impl Markers {
    pub fn new(open: impl Into<String>, close: impl Into<String>) -> Result<Self, HighlightError> {
        let m = Self {
            open: open.into(),
            close: close.into(),
        };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<(), HighlightError> {
        let (o, c) = (&self.open, &self.close);
        if o.is_empty() || c.is_empty() || o.contains(c.as_str()) || c.contains(o.as_str()) {
            return Err(HighlightError::BadMarkers);
        }
        Ok(())
    }

    fn wrap(&self, text: &str, out: &mut String) {
        out.push_str(&self.open);
        out.push_str(text);
        out.push_str(&self.close);
    }

    /// Fails if either marker occurs in `text`.
    pub fn check_absent(&self, text: &str) -> Result<(), HighlightError> {
        for marker in [&self.open, &self.close] {
            if let Some(offset) = text.find(marker.as_str()) {
                return Err(HighlightError::MarkerCollision {
                    marker: marker.clone(),
                    offset,
                });
            }
        }
        Ok(())
    }

    /// Number of complete open/close pairs in `text`.
    pub fn count_pairs(&self, text: &str) -> usize {
        marked_regions(text, self).len()
    }
}

impl Default for Markers {
    fn default() -> Self {
        Self {
            open: DEFAULT_OPEN.into(),
            close: DEFAULT_CLOSE.into(),
        }
    }
}

impl FromStr for Markers {
    type Err = String;

    /// `OPEN,CLOSE`
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (o, c) = s
            .split_once(',')
            .ok_or_else(|| format!("expected OPEN,CLOSE, found {s:?}"))?;
        Markers::new(o, c).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Wrap each selected sentence in place.
    #[default]
    InContext,
    /// Marker-wrapped copies of the selected sentences before the context.
    Prepend,
    /// Marker-wrapped copies of the selected sentences after the context.
    Append,
    /// Keep only the selected sentences.
    Filter,
    /// One marker pair around the whole context.
    Full,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::InContext => "in_context",
            Strategy::Prepend => "prepend",
            Strategy::Append => "append",
            Strategy::Filter => "filter",
            Strategy::Full => "full",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "in_context" => Strategy::InContext,
            "prepend" => Strategy::Prepend,
            "append" => Strategy::Append,
            "filter" => Strategy::Filter,
            "full" => Strategy::Full,
            _ => return Err(format!("unknown strategy {s:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HighlightPlan {
    pub strategy: Strategy,
    pub selected: Vec<usize>,
    pub markers: Markers,
}

/// Rewritten context plus where each original sentence ended up in it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Highlighted {
    pub text: String,
    /// Byte range of sentence `i` in `text`; `None` when filtered out.
    pub sentence_spans: Vec<Option<Range<usize>>>,
}

fn normalized_selection(seg: &SegmentedContext, selected: &[usize]) -> Result<BTreeSet<usize>, HighlightError> {
    let m = seg.m();
    if let Some(&index) = selected.iter().find(|&&i| i >= m) {
        return Err(HighlightError::InvalidSelection { index, m });
    }
    Ok(selected.iter().copied().collect())
}

/// Rewrites the context according to `plan`.
pub fn apply_highlight(seg: &SegmentedContext, plan: &HighlightPlan) -> Result<String, HighlightError> {
    highlight_mapped(seg, plan).map(|h| h.text)
}

/// [`apply_highlight`] that also reports where each sentence landed.
pub fn highlight_mapped(seg: &SegmentedContext, plan: &HighlightPlan) -> Result<Highlighted, HighlightError> {
    plan.markers.check()?;
    let ctx = seg.context.as_str();
    let selected = normalized_selection(seg, &plan.selected)?;
    if plan.strategy != Strategy::Filter {
        plan.markers.check_absent(ctx)?;
    }
    let markers = &plan.markers;
    let mut out = String::with_capacity(ctx.len() + selected.len() * 40);
    let mut spans = vec![None; seg.m()];

    match plan.strategy {
        Strategy::InContext => {
            let mut cursor = 0;
            for (i, s) in seg.sentences.iter().enumerate() {
                out.push_str(&ctx[cursor..s.chars.start]);
                let is_sel = selected.contains(&i);
                if is_sel {
                    out.push_str(&markers.open);
                }
                let start = out.len();
                out.push_str(&ctx[s.chars.clone()]);
                spans[i] = Some(start..out.len());
                if is_sel {
                    out.push_str(&markers.close);
                }
                cursor = s.chars.end;
            }
            out.push_str(&ctx[cursor..]);
        }
        Strategy::Full => {
            out.push_str(&markers.open);
            let base = out.len();
            out.push_str(ctx);
            out.push_str(&markers.close);
            for (i, s) in seg.sentences.iter().enumerate() {
                spans[i] = Some(base + s.chars.start..base + s.chars.end);
            }
        }
        Strategy::Prepend => {
            for &i in &selected {
                markers.wrap(seg.sentence_text(i), &mut out);
                out.push(' ');
            }
            let base = out.len();
            out.push_str(ctx);
            for (i, s) in seg.sentences.iter().enumerate() {
                spans[i] = Some(base + s.chars.start..base + s.chars.end);
            }
        }
        Strategy::Append => {
            out.push_str(ctx);
            for (i, s) in seg.sentences.iter().enumerate() {
                spans[i] = Some(s.chars.clone());
            }
            for &i in &selected {
                out.push(' ');
                markers.wrap(seg.sentence_text(i), &mut out);
            }
        }
        Strategy::Filter => {
            if selected.is_empty() {
                return Err(HighlightError::EmptyFilter);
            }
            for (k, &i) in selected.iter().enumerate() {
                if k > 0 {
                    out.push(' ');
                }
                let start = out.len();
                out.push_str(seg.sentence_text(i));
                spans[i] = Some(start..out.len());
            }
        }
    }
    Ok(Highlighted {
        text: out,
        sentence_spans: spans,
    })
}

/// Byte ranges of the text between each balanced open/close marker pair.
/// Unbalanced markers are skipped.
pub fn marked_regions(text: &str, markers: &Markers) -> Vec<Range<usize>> {
    let mut regions = Vec::new();
    let mut pos = 0;
    while let Some(o) = text[pos..].find(markers.open.as_str()) {
        let inner = pos + o + markers.open.len();
        match text[inner..].find(markers.close.as_str()) {
            Some(c) => {
                regions.push(inner..inner + c);
                pos = inner + c + markers.close.len();
            }
            None => break,
        }
    }
    regions
}

/// Removes every marker from an in-context or full highlight, checking that
/// markers alternate open/close.
fn strip_inline(text: &str, markers: &Markers) -> Result<String, HighlightError> {
    let mut out = String::with_capacity(text.len());
    let mut pos = 0;
    let mut open_at: Option<usize> = None;
    loop {
        let next_open = text[pos..].find(markers.open.as_str()).map(|o| pos + o);
        let next_close = text[pos..].find(markers.close.as_str()).map(|c| pos + c);
        let (at, is_open) = match (next_open, next_close) {
            (None, None) => break,
            (Some(o), None) => (o, true),
            (None, Some(c)) => (c, false),
            (Some(o), Some(c)) => {
                if o < c {
                    (o, true)
                } else {
                    (c, false)
                }
            }
        };
        if is_open == open_at.is_some() {
            return Err(HighlightError::Unbalanced { offset: at });
        }
        out.push_str(&text[pos..at]);
        if is_open {
            open_at = Some(at);
            pos = at + markers.open.len();
        } else {
            open_at = None;
            pos = at + markers.close.len();
        }
    }
    if let Some(offset) = open_at {
        return Err(HighlightError::Unbalanced { offset });
    }
    out.push_str(&text[pos..]);
    Ok(out)
}

/// Inverts [`apply_highlight`] for every strategy except `filter`.
pub fn strip_markers(text: &str, markers: &Markers, strategy: Strategy) -> Result<String, HighlightError> {
    markers.check()?;
    match strategy {
        Strategy::InContext | Strategy::Full => strip_inline(text, markers),
        Strategy::Filter => Err(HighlightError::NotInvertible(strategy)),
        Strategy::Prepend => {
            let mut pos = 0;
            while text[pos..].starts_with(markers.open.as_str()) {
                let inner = pos + markers.open.len();
                let close = text[inner..]
                    .find(markers.close.as_str())
                    .ok_or(HighlightError::Unbalanced { offset: pos })?;
                let after = inner + close + markers.close.len();
                if !text[after..].starts_with(' ') {
                    return Err(HighlightError::Unbalanced { offset: after });
                }
                pos = after + 1;
            }
            let rest = &text[pos..];
            ensure_no_markers(rest, markers, pos)?;
            Ok(rest.to_owned())
        }
        Strategy::Append => {
            let mut end = text.len();
            while text[..end].ends_with(markers.close.as_str()) {
                let close_at = end - markers.close.len();
                let open_at = text[..close_at]
                    .rfind(markers.open.as_str())
                    .ok_or(HighlightError::Unbalanced { offset: close_at })?;
                if open_at == 0 || !text[..open_at].ends_with(' ') {
                    return Err(HighlightError::Unbalanced { offset: open_at });
                }
                end = open_at - 1;
            }
            let rest = &text[..end];
            ensure_no_markers(rest, markers, 0)?;
            Ok(rest.to_owned())
        }
    }
}

fn ensure_no_markers(text: &str, markers: &Markers, base: usize) -> Result<(), HighlightError> {
    let hit = [&markers.open, &markers.close]
        .iter()
        .filter_map(|m| text.find(m.as_str()))
        .min();
    match hit {
        Some(offset) => Err(HighlightError::Unbalanced {
            offset: base + offset,
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Qa,
    Seqa,
    Cot,
    PromptElicit,
}

impl FromStr for PromptKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "qa" => PromptKind::Qa,
            "seqa" => PromptKind::Seqa,
            "cot" => PromptKind::Cot,
            "prompt_elicit" => PromptKind::PromptElicit,
            _ => return Err(format!("unknown prompt kind {s:?}")),
        })
    }
}

/// An instantiated template and the byte range of the context inside it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub context: Range<usize>,
}

/// Instruction line of each template. The highlighting explanation names the
/// configured markers.
pub fn instruction(kind: PromptKind, markers: &Markers) -> String {
    match kind {
        PromptKind::Qa => QA_INSTRUCTION.to_owned(),
        PromptKind::Cot => format!("{QA_INSTRUCTION} {COT_SENTENCE}"),
        PromptKind::Seqa => format!(
            "{QA_INSTRUCTION} Within the context, {} and {} are used to mark the important evidence sentences, read carefully. Do not include the markers in the output.",
            markers.open, markers.close
        ),
        PromptKind::PromptElicit => PROMPT_ELICIT_INSTRUCTION.to_owned(),
    }
}

pub fn build_prompt(
    kind: PromptKind,
    context: &str,
    question: &str,
    markers: &Markers,
) -> Result<Prompt, HighlightError> {
    if context.is_empty() || question.is_empty() {
        return Err(HighlightError::EmptyPromptField);
    }
    let mut text = instruction(kind, markers);
    text.push_str("\nContext: ");
    let start = text.len();
    text.push_str(context);
    let end = text.len();
    text.push_str("\nQuestion: ");
    text.push_str(question);
    Ok(Prompt {
        text,
        context: start..end,
    })
}

/// Sentences located by exact text search for generated evidence snippets.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceMatch {
    pub selected: Vec<usize>,
    pub unmatched: Vec<String>,
}

/// Selects every sentence overlapping an exact occurrence of any snippet.
pub fn match_extracted_evidence(seg: &SegmentedContext, snippets: &[String]) -> EvidenceMatch {
    let mut selected = BTreeSet::new();
    let mut unmatched = Vec::new();
    for snippet in snippets {
        let needle = snippet.trim();
        if needle.is_empty() {
            continue;
        }
        let mut found = false;
        for (at, _) in seg.context.match_indices(needle) {
            found = true;
            let hit = at..at + needle.len();
            for (i, s) in seg.sentences.iter().enumerate() {
                if s.chars.start < hit.end && hit.start < s.chars.end {
                    selected.insert(i);
                }
            }
        }
        if !found {
            unmatched.push(snippet.clone());
        }
    }
    EvidenceMatch {
        selected: selected.into_iter().collect(),
        unmatched,
    }
}

/// Splits generated `- [sentence1] - [sentence2]` output into snippets.
pub fn parse_extracted_evidence(output: &str) -> Vec<String> {
    let mut snippets = Vec::new();
    for line in output.lines() {
        let line = line.trim();
        let line = line
            .strip_prefix("- ")
            .or_else(|| line.strip_prefix("* "))
            .or_else(|| line.strip_prefix('-'))
            .unwrap_or(line);
        for piece in line.split(" - ") {
            let mut p = piece.trim();
            if let Some(inner) = p.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                p = inner.trim();
            }
            if let Some(inner) = p.strip_prefix('"').and_then(|s| s.strip_suffix('"')) {
                p = inner.trim();
            }
            if !p.is_empty() {
                snippets.push(p.to_owned());
            }
        }
    }
    snippets
}
