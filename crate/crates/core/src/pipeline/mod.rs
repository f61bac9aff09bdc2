//! End-to-end methods over datasets: SelfElicit and the baselines, sweeps,
//! and reports.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Concurrency, Provider, ProviderError, ProviderRequest, RequestMode};
use crate::highlight::{apply_highlight, build_prompt, match_extracted_evidence, HighlightPlan, Markers, PromptKind, Strategy};
use crate::metrics::{auroc, derive_evidence_labels, elicit_ratio, exact_match, ndcg_all, token_f1, LabelMode};
use crate::scorer::{elicit, Granularity, LayerSpan, DEFAULT_ALPHA};
use crate::segment::SegmentedContext;
use crate::trace::AttentionTrace;

pub mod dataset;
pub mod report;
pub mod sweep;

pub use dataset::{ingest_dataset, parse_dataset, QaSample};
pub use report::{aggregate, Aggregate, RequestCounts, SampleRecord, StageTimings, Status};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Base,
    Cot,
    FullElicit,
    PromptElicit,
    SelfElicit,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Base,
        Method::Cot,
        Method::FullElicit,
        Method::PromptElicit,
        Method::SelfElicit,
    ];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Base => "base",
            Method::Cot => "cot",
            Method::FullElicit => "full_elicit",
            Method::PromptElicit => "prompt_elicit",
            Method::SelfElicit => "self_elicit",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("alpha must lie in [0, 1], got {0}")]
    Alpha(String),
    #[error("worker count must be at least 1")]
    Jobs,
    #[error("token granularity only applies to self_elicit, not {0}")]
    Granularity(Method),
    #[error("the {0} strategy does not apply to {1}")]
    Strategy(Strategy, Method),
    #[error("bad markers: {0}")]
    Markers(String),
}

/// Settings for one method over one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub alpha: f64,
    pub layer_span: LayerSpan,
    pub granularity: Granularity,
    pub strategy: Strategy,
    pub markers: Markers,
    /// Evidence ground truth; `None` uses annotations when a sample has them
    /// and answer containment otherwise.
    pub label_mode: Option<LabelMode>,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::SelfElicit,
            alpha: DEFAULT_ALPHA,
            layer_span: LayerSpan::default(),
            granularity: Granularity::Sentence,
            strategy: Strategy::InContext,
            markers: Markers::default(),
            label_mode: None,
            jobs: 1,
        }
    }
}

impl RunConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ConfigError::Alpha(self.alpha.to_string()));
        }
        if self.jobs == 0 {
            return Err(ConfigError::Jobs);
        }
        if self.granularity == Granularity::Token && self.method != Method::SelfElicit {
            return Err(ConfigError::Granularity(self.method));
        }
        // full_elicit is defined as every sentence wrapped in place
        if self.method == Method::FullElicit && self.strategy != Strategy::InContext && self.strategy != Strategy::Full {
            return Err(ConfigError::Strategy(self.strategy, self.method));
        }
        Markers::new(self.markers.open.clone(), self.markers.close.clone())
            .map_err(|e| ConfigError::Markers(e.to_string()))?;
        Ok(())
    }
}

/// Why a sample did not complete.
pub(crate) struct Abort {
    status: Status,
    message: String,
}

impl From<ProviderError> for Abort {
    fn from(e: ProviderError) -> Self {
        let status = match e {
            ProviderError::BadTrace(_) => Status::Skipped,
            _ => Status::Failed,
        };
        Abort {
            status,
            message: e.to_string(),
        }
    }
}

fn fail(e: impl fmt::Display) -> Abort {
    Abort {
        status: Status::Failed,
        message: e.to_string(),
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

pub(crate) fn request(sample: &QaSample, mode: RequestMode, kind: PromptKind, context: &str, markers: &Markers) -> Result<ProviderRequest, Abort> {
    let p = build_prompt(kind, context, &sample.question, markers).map_err(fail)?;
    Ok(ProviderRequest {
        sample_id: sample.id.clone(),
        mode,
        prompt: p.text,
        context: p.context,
    })
}

/// Scores the answer after removing any markers the model echoed back.
fn score_answer(rec: &mut SampleRecord, sample: &QaSample, answer: String, markers: &Markers) {
    let clean = answer.replace(&markers.open, "").replace(&markers.close, "");
    rec.em = exact_match(&clean, &sample.answers).ok();
    rec.f1 = token_f1(&clean, &sample.answers).ok();
    rec.answer = Some(answer);
}

pub(crate) fn labels_for(sample: &QaSample, seg: &SegmentedContext, mode: Option<LabelMode>) -> Option<Vec<bool>> {
    let mode = mode.unwrap_or(match &sample.evidence_sentences {
        Some(e) if !e.is_empty() => LabelMode::Annotated,
        _ => LabelMode::AnswerContainment,
    });
    derive_evidence_labels(sample, seg, mode).ok().map(|l| l.labels)
}

fn ranking_metrics(rec: &mut SampleRecord, scores: &[f64], labels: Option<&[bool]>) {
    match labels {
        Some(labels) => {
            rec.auroc = auroc(scores, labels).ok();
            rec.ndcg = ndcg_all(scores, labels).ok();
            rec.metric_undefined = rec.auroc.is_none() || rec.ndcg.is_none();
        }
        None => rec.metric_undefined = true,
    }
}

/// Runs the configured method on one sample. Failures are recorded, never
/// propagated.
pub fn run_sample<P: Provider + ?Sized>(sample: &QaSample, provider: &P, config: &RunConfig) -> (SampleRecord, StageTimings) {
    match config.method {
        Method::SelfElicit => run_self_elicit(sample, provider, config),
        _ => run_baseline(sample, provider, config),
    }
}

/// Trace on the plain QA prompt, score and select evidence, highlight it,
/// answer from the highlighted prompt.
pub fn run_self_elicit<P: Provider + ?Sized>(sample: &QaSample, provider: &P, config: &RunConfig) -> (SampleRecord, StageTimings) {
    let start = Instant::now();
    let mut timings = StageTimings::new(sample, Method::SelfElicit);
    let traced = request_trace(sample, provider, &config.markers);
    timings.trace_ms = ms(start);
    let (mut rec, mut t) = match traced {
        Ok(trace) => run_self_elicit_with_trace(sample, &trace, provider, config),
        Err(abort) => {
            let mut rec = SampleRecord::new(sample, Method::SelfElicit);
            rec.abort(abort.status, abort.message);
            rec.requests.trace = 1;
            (rec, StageTimings::new(sample, Method::SelfElicit))
        }
    };
    t.trace_ms = timings.trace_ms;
    t.total_ms = ms(start);
    rec.requests.trace = 1;
    (rec, t)
}

/// The trace request of SelfElicit, on the plain QA prompt.
fn request_trace<P: Provider + ?Sized>(sample: &QaSample, provider: &P, markers: &Markers) -> Result<AttentionTrace, Abort> {
    let req = request(sample, RequestMode::TraceOnly, PromptKind::Qa, &sample.context, markers)?;
    Ok(provider.trace(&req)?)
}

/// Fetches the SelfElicit trace of every sample, for reuse across sweeps.
pub fn collect_traces<P: Provider + ?Sized>(
    samples: &[QaSample],
    provider: &P,
    config: &RunConfig,
) -> Result<Vec<Result<AttentionTrace, String>>, rayon::ThreadPoolBuildError> {
    in_pool(provider, config, || {
        samples
            .par_iter()
            .map(|s| request_trace(s, provider, &config.markers).map_err(|a| a.message))
            .collect()
    })
}

/// SelfElicit from an already captured trace; issues only the answer request.
pub fn run_self_elicit_with_trace<P: Provider + ?Sized>(
    sample: &QaSample,
    trace: &AttentionTrace,
    provider: &P,
    config: &RunConfig,
) -> (SampleRecord, StageTimings) {
    let mut rec = SampleRecord::new(sample, Method::SelfElicit);
    rec.requests.trace = 1;
    let mut timings = StageTimings::new(sample, Method::SelfElicit);
    let start = Instant::now();
    if let Err(abort) = self_elicit_stages(sample, trace, provider, config, &mut rec, &mut timings) {
        rec.abort(abort.status, abort.message);
    }
    timings.total_ms = ms(start);
    (rec, timings)
}

fn self_elicit_stages<P: Provider + ?Sized>(
    sample: &QaSample,
    trace: &AttentionTrace,
    provider: &P,
    config: &RunConfig,
    rec: &mut SampleRecord,
    timings: &mut StageTimings,
) -> Result<(), Abort> {
    let report = trace.validate();
    if !report.is_valid() {
        return Err(Abort {
            status: Status::Skipped,
            message: format!("invalid trace: {report}"),
        });
    }
    let t = Instant::now();
    let sentences = SegmentedContext::new(&sample.context, trace).map_err(fail)?;
    let labels = labels_for(sample, &sentences, config.label_mode);
    let (seg, unit_labels) = match config.granularity {
        Granularity::Sentence => (sentences, labels),
        Granularity::Token => {
            let tokens = SegmentedContext::token_level(&sample.context, trace).map_err(fail)?;
            // a token inherits its sentence's label
            let unit = labels.map(|l| {
                sentences
                    .sentences
                    .iter()
                    .zip(&l)
                    .flat_map(|(s, &v)| std::iter::repeat(v).take(s.n_tokens()))
                    .collect()
            });
            (tokens, unit)
        }
    };
    let scores = elicit(trace, &seg, config.layer_span, config.alpha, config.granularity).map_err(fail)?;
    if scores.degenerate {
        log::warn!("{}: all evidence scores are zero; selecting everything", sample.id);
    }
    rec.n_units = Some(seg.m());
    rec.elicit_ratio = Some(elicit_ratio(&seg, &scores.selected));
    ranking_metrics(rec, &scores.scores, unit_labels.as_deref());
    rec.selected = scores.selected.clone();
    rec.scores = scores.scores;
    rec.degenerate = scores.degenerate;

    let plan = HighlightPlan {
        strategy: config.strategy,
        selected: scores.selected,
        markers: config.markers.clone(),
    };
    let highlighted = apply_highlight(&seg, &plan).map_err(fail)?;
    timings.score_ms = ms(t);

    let t = Instant::now();
    let req = request(sample, RequestMode::Answer, PromptKind::Seqa, &highlighted, &config.markers)?;
    rec.requests.answer += 1;
    let answer = provider.answer(&req)?;
    timings.answer_ms = ms(t);
    score_answer(rec, sample, answer, &config.markers);
    Ok(())
}

/// Base, CoT, FullElicit and PromptElicit. Without a trace, sentences are
/// measured in whitespace words.
pub fn run_baseline<P: Provider + ?Sized>(sample: &QaSample, provider: &P, config: &RunConfig) -> (SampleRecord, StageTimings) {
    if config.method == Method::SelfElicit {
        return run_self_elicit(sample, provider, config);
    }
    let mut rec = SampleRecord::new(sample, config.method);
    let mut timings = StageTimings::new(sample, config.method);
    let start = Instant::now();
    if let Err(abort) = baseline_stages(sample, provider, config, &mut rec, &mut timings) {
        rec.abort(abort.status, abort.message);
    }
    timings.total_ms = ms(start);
    (rec, timings)
}

fn baseline_stages<P: Provider + ?Sized>(
    sample: &QaSample,
    provider: &P,
    config: &RunConfig,
    rec: &mut SampleRecord,
    timings: &mut StageTimings,
) -> Result<(), Abort> {
    let markers = &config.markers;
    let (kind, context) = match config.method {
        Method::Base => (PromptKind::Qa, sample.context.clone()),
        Method::Cot => (PromptKind::Cot, sample.context.clone()),
        Method::FullElicit | Method::PromptElicit => {
            let t = Instant::now();
            let seg = SegmentedContext::by_words(&sample.context).map_err(fail)?;
            let selected = if config.method == Method::FullElicit {
                (0..seg.m()).collect()
            } else {
                let req = request(sample, RequestMode::ExtractEvidence, PromptKind::PromptElicit, &sample.context, markers)?;
                rec.requests.extract += 1;
                let snippets = provider.extract(&req)?;
                let found = match_extracted_evidence(&seg, &snippets);
                rec.unmatched_snippets = found.unmatched;
                let scores: Vec<f64> = (0..seg.m())
                    .map(|i| f64::from(u8::from(found.selected.binary_search(&i).is_ok())))
                    .collect();
                let labels = labels_for(sample, &seg, config.label_mode);
                ranking_metrics(rec, &scores, labels.as_deref());
                rec.scores = scores;
                found.selected
            };
            timings.extract_ms = ms(t);
            rec.n_units = Some(seg.m());
            rec.elicit_ratio = Some(elicit_ratio(&seg, &selected));
            let plan = HighlightPlan {
                strategy: config.strategy,
                selected: selected.clone(),
                markers: markers.clone(),
            };
            rec.selected = selected;
            (PromptKind::Seqa, apply_highlight(&seg, &plan).map_err(fail)?)
        }
        Method::SelfElicit => unreachable!("handled by run_self_elicit"),
    };
    let t = Instant::now();
    let req = request(sample, RequestMode::Answer, kind, &context, markers)?;
    rec.requests.answer += 1;
    let answer = provider.answer(&req)?;
    timings.answer_ms = ms(t);
    score_answer(rec, sample, answer, markers);
    Ok(())
}

pub(crate) fn in_pool<P, T, F>(provider: &P, config: &RunConfig, work: F) -> Result<T, rayon::ThreadPoolBuildError>
where
    P: Provider + ?Sized,
    T: Send,
    F: FnOnce() -> T + Send,
{
    let jobs = match provider.concurrency() {
        Concurrency::Serial => 1,
        Concurrency::Concurrent => config.jobs.max(1),
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    Ok(pool.install(work))
}

/// Per-sample records and timings of one run, ordered by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<SampleRecord>,
    pub timings: Vec<StageTimings>,
}

fn sorted(mut pairs: Vec<(SampleRecord, StageTimings)>) -> RunOutput {
    // stable: duplicate ids keep dataset order
    pairs.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    let (records, timings) = pairs.into_iter().unzip();
    RunOutput { records, timings }
}

/// Runs the configured method over every sample on `config.jobs` workers
/// (one for serial providers).
pub fn run_dataset<P: Provider + ?Sized>(
    samples: &[QaSample],
    provider: &P,
    config: &RunConfig,
) -> Result<RunOutput, rayon::ThreadPoolBuildError> {
    let pairs = in_pool(provider, config, || {
        samples
            .par_iter()
            .map(|s| run_sample(s, provider, config))
            .collect::<Vec<_>>()
    })?;
    Ok(sorted(pairs))
}

/// [`run_dataset`] for SelfElicit over traces captured by
/// [`collect_traces`].
pub fn run_with_traces<P: Provider + ?Sized>(
    samples: &[QaSample],
    traces: &[Result<AttentionTrace, String>],
    provider: &P,
    config: &RunConfig,
) -> Result<RunOutput, rayon::ThreadPoolBuildError> {
    let pairs = in_pool(provider, config, || {
        samples
            .par_iter()
            .zip(traces.par_iter())
            .map(|(s, t)| match t {
                Ok(trace) => run_self_elicit_with_trace(s, trace, provider, config),
                Err(message) => {
                    let mut rec = SampleRecord::new(s, Method::SelfElicit);
                    rec.requests.trace = 1;
                    rec.abort(Status::Failed, message.clone());
                    (rec, StageTimings::new(s, Method::SelfElicit))
                }
            })
            .collect::<Vec<_>>()
    })?;
    Ok(sorted(pairs))
}
