//! Parameter sweeps over cached traces, layer-wise attention curves, and the
//! attention shift caused by highlighting.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{aggregate, collect_traces, request, run_with_traces, Aggregate, ConfigError, Method, QaSample, RunConfig, SampleRecord};
use crate::backend::{Provider, RequestMode};
use crate::highlight::{highlight_mapped, HighlightPlan, PromptKind, Strategy};
use crate::metrics::exact_match;
use crate::scorer::{elicit, layer_curve, relative_apt, select_layers, LayerSpan};
use crate::segment::{align_tokens, SegmentedContext};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("empty sweep grid")]
    EmptyGrid,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error("sweeps and curves need self_elicit, not {0}")]
    Method(Method),
    #[error("{0}")]
    Unsupported(String),
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    /// `alpha=0.5` or `layers=0.5:1`.
    pub parameter: String,
    pub aggregate: Aggregate,
    pub records: Vec<SampleRecord>,
}

fn check(config: &RunConfig) -> Result<(), SweepError> {
    config.validate()?;
    if config.method != Method::SelfElicit {
        return Err(SweepError::Method(config.method));
    }
    Ok(())
}

fn sweep<P: Provider + ?Sized>(
    samples: &[QaSample],
    provider: &P,
    base: &RunConfig,
    dataset: &str,
    points: Vec<(String, RunConfig)>,
) -> Result<Vec<SweepPoint>, SweepError> {
    if points.is_empty() {
        return Err(SweepError::EmptyGrid);
    }
    for (_, c) in &points {
        c.validate()?;
    }
    // one trace per sample, shared by every grid point
    let traces = collect_traces(samples, provider, base)?;
    points
        .into_iter()
        .map(|(parameter, cfg)| {
            let out = run_with_traces(samples, &traces, provider, &cfg)?;
            let mut agg = aggregate(Method::SelfElicit, dataset, &out.records);
            agg.parameter = Some(parameter.clone());
            Ok(SweepPoint {
                parameter,
                aggregate: agg,
                records: out.records,
            })
        })
        .collect()
}

pub fn sweep_alpha<P: Provider + ?Sized>(
    samples: &[QaSample],
    provider: &P,
    config: &RunConfig,
    dataset: &str,
    grid: &[f64],
) -> Result<Vec<SweepPoint>, SweepError> {
    check(config)?;
    let points = grid
        .iter()
        .map(|&alpha| (format!("alpha={alpha}"), RunConfig { alpha, ..config.clone() }))
        .collect();
    sweep(samples, provider, config, dataset, points)
}

pub fn sweep_layers<P: Provider + ?Sized>(
    samples: &[QaSample],
    provider: &P,
    config: &RunConfig,
    dataset: &str,
    spans: &[LayerSpan],
) -> Result<Vec<SweepPoint>, SweepError> {
    check(config)?;
    let points = spans
        .iter()
        .map(|&layer_span| (format!("layers={layer_span}"), RunConfig { layer_span, ..config.clone() }))
        .collect();
    sweep(samples, provider, config, dataset, points)
}

/// Mean relative attention per token at one layer, over samples whose plain
/// answer was correct (or not).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub layer_index: usize,
    pub layer_fraction: f64,
    pub evidence_ratio: f64,
    pub nonevidence_ratio: f64,
    pub correctness_flag: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCurves {
    pub rows: Vec<CurveRow>,
    /// Samples used per correctness flag.
    pub n_correct: usize,
    pub n_incorrect: usize,
    /// Samples without a trace, answer, or two-class labels.
    pub n_skipped: usize,
}

/// Relative evidence / non-evidence attention per layer, split by whether
/// the plain QA answer is correct. Issues one trace and one answer request
/// per sample.
pub fn layer_curves<P: Provider + ?Sized>(
    samples: &[QaSample],
    provider: &P,
    config: &RunConfig,
) -> Result<LayerCurves, SweepError> {
    config.validate()?;
    let traces = collect_traces(samples, provider, config)?;
    let per_sample: Vec<Option<(bool, Vec<(usize, f64, f64, f64)>)>> = super::in_pool(provider, config, || {
        samples
            .par_iter()
            .zip(traces.par_iter())
            .map(|(s, t)| {
                let trace = t.as_ref().ok()?;
                let seg = SegmentedContext::new(&s.context, trace).ok()?;
                let labels = super::labels_for(s, &seg, config.label_mode)?;
                let curve = layer_curve(trace, &seg, &labels).ok()?;
                let req = request(s, RequestMode::Answer, PromptKind::Qa, &s.context, &config.markers).ok()?;
                let answer = provider.answer(&req).ok()?;
                let correct = exact_match(&answer, &s.answers).ok()?;
                Some((correct, curve.iter().map(|p| (p.layer, p.fraction, p.evidence, p.nonevidence)).collect()))
            })
            .collect()
    })?;

    let mut sums: BTreeMap<(bool, usize), (f64, f64, f64, usize)> = BTreeMap::new();
    let (mut n_correct, mut n_incorrect, mut n_skipped) = (0, 0, 0);
    for entry in &per_sample {
        let Some((correct, points)) = entry else {
            n_skipped += 1;
            continue;
        };
        if *correct {
            n_correct += 1;
        } else {
            n_incorrect += 1;
        }
        for &(layer, fraction, ev, non) in points {
            let acc = sums.entry((*correct, layer)).or_insert((fraction, 0.0, 0.0, 0));
            acc.1 += ev;
            acc.2 += non;
            acc.3 += 1;
        }
    }
    let rows = sums
        .into_iter()
        .map(|((correctness_flag, layer_index), (layer_fraction, ev, non, n))| CurveRow {
            layer_index,
            layer_fraction,
            evidence_ratio: ev / n as f64,
            nonevidence_ratio: non / n as f64,
            correctness_flag,
        })
        .collect();
    Ok(LayerCurves {
        rows,
        n_correct,
        n_incorrect,
        n_skipped,
    })
}

/// Evidence attention before and after highlighting, each as relative
/// attention per token averaged over the evidence-reading layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AptShift {
    pub id: String,
    pub before: f64,
    pub after: f64,
}

/// Compares the evidence attention in the plain QA prompt with the
/// attention in the highlighted prompt. Needs the in-place strategy so the
/// sentences stay in order. Samples lacking two-class labels are left out.
pub fn apt_shift<P: Provider + ?Sized>(
    samples: &[QaSample],
    provider: &P,
    config: &RunConfig,
) -> Result<Vec<AptShift>, SweepError> {
    check(config)?;
    if !matches!(config.strategy, Strategy::InContext) {
        return Err(SweepError::Unsupported(format!(
            "attention shift needs the in_context strategy, not {}",
            config.strategy
        )));
    }
    let traces = collect_traces(samples, provider, config)?;
    let shifts = super::in_pool(provider, config, || {
        samples
            .par_iter()
            .zip(traces.par_iter())
            .filter_map(|(s, t)| {
                let trace = t.as_ref().ok()?;
                let seg = SegmentedContext::new(&s.context, trace).ok()?;
                let labels = super::labels_for(s, &seg, config.label_mode)?;
                let scores = elicit(trace, &seg, config.layer_span, config.alpha, config.granularity).ok()?;
                let layers = select_layers(trace.n_layers(), config.layer_span).ok()?;
                let mean_apt = |tr, sg: &SegmentedContext| -> Option<f64> {
                    let vals: Option<Vec<f64>> =
                        layers.iter().map(|&l| relative_apt(tr, sg, &labels, l).ok().map(|r| r.0)).collect();
                    let vals = vals?;
                    Some(vals.iter().sum::<f64>() / vals.len() as f64)
                };
                let before = mean_apt(trace, &seg)?;

                let plan = HighlightPlan {
                    strategy: Strategy::InContext,
                    selected: scores.selected.clone(),
                    markers: config.markers.clone(),
                };
                let h = highlight_mapped(&seg, &plan).ok()?;
                // each sentence claims its own markers
                let spans: Vec<_> = h
                    .sentence_spans
                    .iter()
                    .enumerate()
                    .map(|(i, sp)| {
                        let sp = sp.clone()?;
                        Some(if scores.selected.contains(&i) {
                            sp.start - plan.markers.open.len()..sp.end + plan.markers.close.len()
                        } else {
                            sp
                        })
                    })
                    .collect::<Option<_>>()?;
                let req = request(s, RequestMode::TraceOnly, PromptKind::Seqa, &h.text, &config.markers).ok()?;
                let after_trace = provider.trace(&req).ok()?;
                let after_seg = align_tokens(&h.text, &spans, &after_trace).ok()?;
                let after = mean_apt(&after_trace, &after_seg)?;
                Some(AptShift {
                    id: s.id.clone(),
                    before,
                    after,
                })
            })
            .collect::<Vec<_>>()
    })?;
    let mut shifts = shifts;
    shifts.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(shifts)
}
