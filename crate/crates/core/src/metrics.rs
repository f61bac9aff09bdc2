//! Answer quality (EM, token F1, rejection accuracy) and evidence quality
//! (AUROC, NDCG over the full ranking, elicit ratio) metrics, plus derivation
//! of ground-truth evidence labels.

use std::collections::HashMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::highlight::REJECTION;
use crate::pipeline::QaSample;
use crate::segment::SegmentedContext;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("gold answer list is empty")]
    EmptyGold,
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
    #[error("{scores} scores for {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("sample has no annotated evidence sentences")]
    MissingAnnotations,
}

static ARTICLES: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(a|an|the)\b").unwrap());

/// Lowercases, drops ASCII punctuation, removes the articles a/an/the and
/// collapses whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lower = text.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let no_articles = ARTICLES.replace_all(&no_punct, " ");
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn exact_match(prediction: &str, golds: &[String]) -> Result<bool, MetricError> {
    if golds.is_empty() {
        return Err(MetricError::EmptyGold);
    }
    let p = normalize_answer(prediction);
    Ok(golds.iter().any(|g| normalize_answer(g) == p))
}

fn f1_single(pred: &[&str], gold: &[&str]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, isize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best token-overlap F1 against any gold answer.
pub fn token_f1(prediction: &str, golds: &[String]) -> Result<f64, MetricError> {
    if golds.is_empty() {
        return Err(MetricError::EmptyGold);
    }
    let p = normalize_answer(prediction);
    let pred: Vec<&str> = p.split_whitespace().collect();
    Ok(golds
        .iter()
        .map(|g| {
            let g = normalize_answer(g);
            f1_single(&pred, &g.split_whitespace().collect::<Vec<_>>())
        })
        .fold(0.0, f64::max))
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<(), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from average ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Undefined("AUROC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // twice the rank sum of positives keeps tied ranks integral
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share the average (i+1+j)/2
        let avg2 = (i + 1 + j) as u64;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        rank_sum2 += avg2 * pos_in_group;
        i = j;
    }
    let p = n_pos as u64;
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// NDCG over the full ranking with binary gains. Ties in score keep the
/// original index order.
pub fn ndcg_all(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(MetricError::Undefined("NDCG needs a positive label"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = order
        .iter()
        .enumerate()
        .filter(|(_, &k)| labels[k])
        .map(|(r, _)| discount(r + 1))
        .sum();
    let ideal: f64 = (1..=n_pos).map(discount).sum();
    Ok(dcg / ideal)
}

/// Fraction of context tokens inside the selected sentences.
pub fn elicit_ratio(seg: &SegmentedContext, selected: &[usize]) -> f64 {
    let total = seg.n_context_tokens();
    if total == 0 {
        return 0.0;
    }
    let mut seen = vec![false; seg.m()];
    let mut inside = 0;
    for &i in selected {
        if i < seg.m() && !seen[i] {
            seen[i] = true;
            inside += seg.sentences[i].n_tokens();
        }
    }
    inside as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Sentences overlapping annotated supporting-fact text.
    Annotated,
    /// Sentences containing a gold answer.
    AnswerContainment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceLabels {
    pub labels: Vec<bool>,
    pub provenance: LabelMode,
}

impl EvidenceLabels {
    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

fn contains_subsequence(hay: &[&str], needle: &[&str]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Ground-truth evidence labels for the sentences of `seg`.
pub fn derive_evidence_labels(
    sample: &QaSample,
    seg: &SegmentedContext,
    mode: LabelMode,
) -> Result<EvidenceLabels, MetricError> {
    let labels = match mode {
        LabelMode::Annotated => {
            let snippets = sample
                .evidence_sentences
                .as_deref()
                .filter(|s| !s.is_empty())
                .ok_or(MetricError::MissingAnnotations)?;
            let mut labels = vec![false; seg.m()];
            for snippet in snippets {
                let needle = snippet.trim();
                if needle.is_empty() {
                    continue;
                }
                let mut found = false;
                for (at, _) in seg.context.match_indices(needle) {
                    found = true;
                    for (i, s) in seg.sentences.iter().enumerate() {
                        if s.chars.start < at + needle.len() && at < s.chars.end {
                            labels[i] = true;
                        }
                    }
                }
                if !found {
                    log::warn!("{}: evidence annotation not found in context: {needle:?}", sample.id);
                }
            }
            labels
        }
        LabelMode::AnswerContainment => {
            if sample.answers.is_empty() {
                return Err(MetricError::EmptyGold);
            }
            let golds: Vec<String> = sample.answers.iter().map(|a| normalize_answer(a)).collect();
            (0..seg.m())
                .map(|i| {
                    let norm = normalize_answer(seg.sentence_text(i));
                    let toks: Vec<&str> = norm.split_whitespace().collect();
                    golds.iter().any(|g| {
                        contains_subsequence(&toks, &g.split_whitespace().collect::<Vec<_>>())
                    })
                })
                .collect()
        }
    };
    let out = EvidenceLabels {
        labels,
        provenance: mode,
    };
    if out.n_positive() == 0 {
        log::warn!("{}: no sentence labelled as evidence", sample.id);
    }
    Ok(out)
}

/// Fraction of unanswerable samples answered with the rejection string.
pub fn rejection_accuracy(predictions: &[String], answerable: &[bool]) -> Result<f64, MetricError> {
    if predictions.len() != answerable.len() {
        return Err(MetricError::LengthMismatch {
            scores: predictions.len(),
            labels: answerable.len(),
        });
    }
    let target = normalize_answer(REJECTION);
    let (mut hits, mut total) = (0usize, 0usize);
    for (p, &ok) in predictions.iter().zip(answerable) {
        if !ok {
            total += 1;
            if normalize_answer(p) == target {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(MetricError::Undefined("no unanswerable samples"));
    }
    Ok(hits as f64 / total as f64)
}
