//! Evidence scoring from attention traces.
//!
//! Sentence attention at one layer is the mean attention per token over the
//! sentence's token span. A sentence's evidence score is that quantity averaged
//! over the evidence-reading layers, and sentences scoring at least
//! `alpha * max(e)` are selected as evidence.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segment::SegmentedContext;
use crate::trace::AttentionTrace;

pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoreError {
    #[error("layer {layer} out of range for a {n_layers}-layer trace")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("segmentation does not match trace: {0}")]
    Mismatch(String),
    #[error("evidence-reading layer set is empty")]
    EmptyLayerSet,
    #[error("layer span {0} selects no layers of a {1}-layer model")]
    EmptySpan(LayerSpan, usize),
    #[error("invalid layer span {lo}:{hi}, need 0 <= lo < hi <= 1")]
    InvalidSpan { lo: f64, hi: f64 },
    #[error("alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("score vector is empty")]
    EmptyScores,
    #[error("score vector contains a non-finite value")]
    NonFiniteScore,
    #[error("labels must contain both evidence and non-evidence sentences")]
    SingleClass,
    #[error("{labels} labels for {sentences} sentences")]
    LabelLength { labels: usize, sentences: usize },
}

/// Fractional layer interval `[lo, hi)`; maps to layers
/// `floor(lo*L) ..= floor(hi*L) - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpan {
    pub lo: f64,
    pub hi: f64,
}

impl LayerSpan {
    pub const DEEP_HALF: LayerSpan = LayerSpan { lo: 0.5, hi: 1.0 };
    pub const SHALLOW_HALF: LayerSpan = LayerSpan { lo: 0.0, hi: 0.5 };
    pub const ALL: LayerSpan = LayerSpan { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self, ScoreError> {
        if !(0.0..1.0).contains(&lo) || !(hi > lo && hi <= 1.0) {
            return Err(ScoreError::InvalidSpan { lo, hi });
        }
        Ok(Self { lo, hi })
    }
}

impl Default for LayerSpan {
    fn default() -> Self {
        Self::DEEP_HALF
    }
}

impl fmt::Display for LayerSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.lo, self.hi)
    }
}

impl FromStr for LayerSpan {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (lo, hi) = s
            .split_once(':')
            .ok_or_else(|| format!("expected LO:HI, found {s:?}"))?;
        let lo: f64 = lo.trim().parse().map_err(|_| format!("bad span start {lo:?}"))?;
        let hi: f64 = hi.trim().parse().map_err(|_| format!("bad span end {hi:?}"))?;
        LayerSpan::new(lo, hi).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Sentence,
    Token,
}

impl FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sentence" => Ok(Self::Sentence),
            "token" => Ok(Self::Token),
            _ => Err(format!("unknown granularity {s:?} (sentence|token)")),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sentence => "sentence",
            Self::Token => "token",
        })
    }
}

// Guards floor() against products like 0.29 * 100 = 28.999999999999996.
const FLOOR_EPS: f64 = 1e-9;

fn frac_floor(x: f64, n: usize) -> usize {
    ((x * n as f64) + FLOOR_EPS).floor() as usize
}

/// Layer indices covered by `span` in an `n_layers`-layer model.
pub fn select_layers(n_layers: usize, span: LayerSpan) -> Result<Vec<usize>, ScoreError> {
    LayerSpan::new(span.lo, span.hi)?;
    let lo = frac_floor(span.lo, n_layers);
    let hi = frac_floor(span.hi, n_layers).min(n_layers);
    if lo >= hi {
        return Err(ScoreError::EmptySpan(span, n_layers));
    }
    Ok((lo..hi).collect())
}

fn check_alignment(trace: &AttentionTrace, seg: &SegmentedContext) -> Result<(), ScoreError> {
    let ctx = &trace.context_tokens;
    for (i, s) in seg.sentences.iter().enumerate() {
        if s.token_start > s.token_end || s.token_start < ctx.start || s.token_end >= ctx.end {
            return Err(ScoreError::Mismatch(format!(
                "sentence {i} tokens {}..={} outside context tokens {}..{}",
                s.token_start, s.token_end, ctx.start, ctx.end
            )));
        }
    }
    if ctx.end > trace.n_tokens() {
        return Err(ScoreError::Mismatch(format!(
            "context tokens end at {} but trace has {} tokens",
            ctx.end,
            trace.n_tokens()
        )));
    }
    Ok(())
}

fn check_layer(trace: &AttentionTrace, layer: usize) -> Result<(), ScoreError> {
    if layer >= trace.n_layers() {
        return Err(ScoreError::LayerOutOfRange {
            layer,
            n_layers: trace.n_layers(),
        });
    }
    Ok(())
}

fn sentence_means(row: &[f32], seg: &SegmentedContext) -> Vec<f64> {
    seg.sentences
        .iter()
        .map(|s| {
            let sum: f64 = row[s.tokens()].iter().map(|&a| f64::from(a)).sum();
            sum / s.n_tokens() as f64
        })
        .collect()
}

/// Mean attention per token of each sentence at `layer`.
pub fn sentence_attention(
    trace: &AttentionTrace,
    seg: &SegmentedContext,
    layer: usize,
) -> Result<Vec<f64>, ScoreError> {
    check_layer(trace, layer)?;
    check_alignment(trace, seg)?;
    Ok(sentence_means(&trace.layers[layer], seg))
}

/// Evidence score of every sentence: sentence attention averaged over `layers`.
pub fn evidence_scores(
    trace: &AttentionTrace,
    seg: &SegmentedContext,
    layers: &[usize],
) -> Result<Vec<f64>, ScoreError> {
    if layers.is_empty() {
        return Err(ScoreError::EmptyLayerSet);
    }
    for &l in layers {
        check_layer(trace, l)?;
    }
    check_alignment(trace, seg)?;
    let mut e = vec![0.0f64; seg.m()];
    for &l in layers {
        for (acc, v) in e.iter_mut().zip(sentence_means(&trace.layers[l], seg)) {
            *acc += v;
        }
    }
    let k = layers.len() as f64;
    e.iter_mut().for_each(|v| *v /= k);
    Ok(e)
}

/// Per-context-token scores: raw attention averaged over `layers`.
pub fn token_scores(trace: &AttentionTrace, layers: &[usize]) -> Result<Vec<f64>, ScoreError> {
    if layers.is_empty() {
        return Err(ScoreError::EmptyLayerSet);
    }
    for &l in layers {
        check_layer(trace, l)?;
    }
    let ctx = trace.context_tokens.clone();
    if ctx.end > trace.n_tokens() {
        return Err(ScoreError::Mismatch("context range exceeds trace".into()));
    }
    let k = layers.len() as f64;
    Ok(ctx
        .map(|j| layers.iter().map(|&l| f64::from(trace.layers[l][j])).sum::<f64>() / k)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub indices: Vec<usize>,
    /// Every score was zero, so everything was selected.
    pub degenerate: bool,
}

/// Indices `i` with `e[i] >= alpha * max(e)`, in ascending order.
pub fn threshold_select(e: &[f64], alpha: f64) -> Result<Selection, ScoreError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ScoreError::InvalidAlpha(alpha));
    }
    if e.is_empty() {
        return Err(ScoreError::EmptyScores);
    }
    if e.iter().any(|v| !v.is_finite()) {
        return Err(ScoreError::NonFiniteScore);
    }
    let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cut = alpha * max;
    let indices = e
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= cut)
        .map(|(i, _)| i)
        .collect();
    let degenerate = max == 0.0;
    if degenerate {
        log::warn!("all evidence scores are zero; selecting every unit");
    }
    Ok(Selection {
        indices,
        degenerate,
    })
}

/// Scores plus the selected evidence set for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceScores {
    pub scores: Vec<f64>,
    pub selected: Vec<usize>,
    pub alpha: f64,
    pub layers: Vec<usize>,
    pub granularity: Granularity,
    pub degenerate: bool,
}

/// Scores `seg`'s units over the layers in `span` and thresholds them at
/// `alpha`. For token granularity `seg` must come from
/// [`SegmentedContext::token_level`].
pub fn elicit(
    trace: &AttentionTrace,
    seg: &SegmentedContext,
    span: LayerSpan,
    alpha: f64,
    granularity: Granularity,
) -> Result<EvidenceScores, ScoreError> {
    let layers = select_layers(trace.n_layers(), span)?;
    let scores = match granularity {
        Granularity::Sentence => evidence_scores(trace, seg, &layers)?,
        Granularity::Token => token_scores(trace, &layers)?,
    };
    let sel = threshold_select(&scores, alpha)?;
    Ok(EvidenceScores {
        scores,
        selected: sel.indices,
        alpha,
        layers,
        granularity,
        degenerate: sel.degenerate,
    })
}

/// Attention per token over the given prompt-token indices, averaged over
/// `layers`.
pub fn section_apt(trace: &AttentionTrace, tokens: &[usize], layers: &[usize]) -> f64 {
    if tokens.is_empty() || layers.is_empty() {
        return 0.0;
    }
    let total: f64 = layers
        .iter()
        .map(|&l| tokens.iter().map(|&j| f64::from(trace.layers[l][j])).sum::<f64>())
        .sum();
    total / (tokens.len() * layers.len()) as f64
}

/// Evidence and non-evidence attention per token at `layer`, each divided by
/// the context-average attention per token. 6.0 means six times the average.
pub fn relative_apt(
    trace: &AttentionTrace,
    seg: &SegmentedContext,
    labels: &[bool],
    layer: usize,
) -> Result<(f64, f64), ScoreError> {
    check_layer(trace, layer)?;
    check_alignment(trace, seg)?;
    if labels.len() != seg.m() {
        return Err(ScoreError::LabelLength {
            labels: labels.len(),
            sentences: seg.m(),
        });
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(ScoreError::SingleClass);
    }
    let row = &trace.layers[layer];
    let (mut mass, mut count) = ([0.0f64; 2], [0usize; 2]);
    for (s, &is_ev) in seg.sentences.iter().zip(labels) {
        let k = usize::from(is_ev);
        mass[k] += row[s.tokens()].iter().map(|&a| f64::from(a)).sum::<f64>();
        count[k] += s.n_tokens();
    }
    let ctx_apt = (mass[0] + mass[1]) / (count[0] + count[1]) as f64;
    let apt = |k: usize| mass[k] / count[k] as f64 / ctx_apt;
    Ok((apt(1), apt(0)))
}

/// One point of a layer-wise relative attention curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerPoint {
    pub layer: usize,
    /// `layer / n_layers`, the depth fraction matching [`LayerSpan`].
    pub fraction: f64,
    pub evidence: f64,
    pub nonevidence: f64,
}

/// [`relative_apt`] at every layer of the trace.
pub fn layer_curve(
    trace: &AttentionTrace,
    seg: &SegmentedContext,
    labels: &[bool],
) -> Result<Vec<LayerPoint>, ScoreError> {
    let n = trace.n_layers();
    (0..n)
        .map(|l| {
            let (evidence, nonevidence) = relative_apt(trace, seg, labels, l)?;
            Ok(LayerPoint {
                layer: l,
                fraction: l as f64 / n as f64,
                evidence,
                nonevidence,
            })
        })
        .collect()
}
