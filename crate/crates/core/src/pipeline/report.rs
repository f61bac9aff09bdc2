//! Per-sample records, aggregates, and their file formats.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{Method, QaSample};
use crate::metrics::rejection_accuracy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    /// Provider or pipeline error.
    Failed,
    /// The trace failed validation.
    Skipped,
}

/// Provider requests issued for one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestCounts {
    pub trace: u32,
    pub answer: u32,
    pub extract: u32,
}

/// Everything recorded for one sample except wall-clock timings, so that
/// repeated runs produce identical records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub method: Method,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub answerable: bool,
    pub answer: Option<String>,
    pub em: Option<bool>,
    pub f1: Option<f64>,
    /// Sentences (or tokens) the context was split into.
    pub n_units: Option<usize>,
    pub selected: Vec<usize>,
    pub scores: Vec<f64>,
    pub degenerate: bool,
    pub elicit_ratio: Option<f64>,
    pub auroc: Option<f64>,
    pub ndcg: Option<f64>,
    pub metric_undefined: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unmatched_snippets: Vec<String>,
    pub requests: RequestCounts,
}

impl SampleRecord {
    pub fn new(sample: &QaSample, method: Method) -> Self {
        Self {
            id: sample.id.clone(),
            method,
            status: Status::Ok,
            error: None,
            answerable: sample.answerable,
            answer: None,
            em: None,
            f1: None,
            n_units: None,
            selected: Vec::new(),
            scores: Vec::new(),
            degenerate: false,
            elicit_ratio: None,
            auroc: None,
            ndcg: None,
            metric_undefined: false,
            unmatched_snippets: Vec::new(),
            requests: RequestCounts::default(),
        }
    }

    pub(crate) fn abort(&mut self, status: Status, message: String) {
        log::warn!("{}: {}: {message}", self.id, self.method);
        self.status = status;
        self.error = Some(message);
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub id: String,
    pub method: Method,
    pub trace_ms: f64,
    pub score_ms: f64,
    pub extract_ms: f64,
    pub answer_ms: f64,
    pub total_ms: f64,
}

impl StageTimings {
    pub fn new(sample: &QaSample, method: Method) -> Self {
        Self {
            id: sample.id.clone(),
            method,
            trace_ms: 0.0,
            score_ms: 0.0,
            extract_ms: 0.0,
            answer_ms: 0.0,
            total_ms: 0.0,
        }
    }
}

/// Means over completed samples; ranking metrics over samples where they
/// are defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub dataset: String,
    #[serde(rename = "EM")]
    pub em: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "AUROC")]
    pub auroc: Option<f64>,
    #[serde(rename = "NDCG")]
    pub ndcg: Option<f64>,
    pub elicit_ratio: Option<f64>,
    pub n_samples: usize,
    pub n_metric_undefined: usize,
    pub n_failed: usize,
    pub rejection_accuracy: Option<f64>,
    /// Mean of EM and F1 ranks among the aggregates ranked together.
    pub rank: Option<f64>,
    /// Sweep grid point, e.g. `alpha=0.5`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter: Option<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn aggregate(method: Method, dataset: &str, records: &[SampleRecord]) -> Aggregate {
    let ok: Vec<&SampleRecord> = records.iter().filter(|r| r.is_ok()).collect();
    let answered: Vec<&SampleRecord> = ok.iter().copied().filter(|r| r.answer.is_some()).collect();
    let predictions: Vec<String> = answered.iter().map(|r| r.answer.clone().unwrap_or_default()).collect();
    let flags: Vec<bool> = answered.iter().map(|r| r.answerable).collect();
    Aggregate {
        method,
        dataset: dataset.to_owned(),
        em: mean(ok.iter().map(|r| f64::from(u8::from(r.em.unwrap_or(false))))).unwrap_or(0.0),
        f1: mean(ok.iter().map(|r| r.f1.unwrap_or(0.0))).unwrap_or(0.0),
        auroc: mean(ok.iter().filter_map(|r| r.auroc)),
        ndcg: mean(ok.iter().filter_map(|r| r.ndcg)),
        elicit_ratio: mean(ok.iter().filter_map(|r| r.elicit_ratio)),
        n_samples: records.len(),
        n_metric_undefined: ok.iter().filter(|r| r.metric_undefined).count(),
        n_failed: records.len() - ok.len(),
        rejection_accuracy: rejection_accuracy(&predictions, &flags).ok(),
        rank: None,
        parameter: None,
    }
}

/// Ranks descending by `key`, ties sharing their average rank (1 = best).
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Fills `rank` with the mean of each aggregate's EM rank and F1 rank among
/// those given. The value depends on which methods were run.
pub fn rank_methods(aggs: &mut [Aggregate]) {
    let em = average_ranks(&aggs.iter().map(|a| a.em).collect::<Vec<_>>());
    let f1 = average_ranks(&aggs.iter().map(|a| a.f1).collect::<Vec<_>>());
    for (a, (e, f)) in aggs.iter_mut().zip(em.into_iter().zip(f1)) {
        a.rank = Some((e + f) / 2.0);
    }
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(mut out: impl Write, rows: &[T]) -> std::io::Result<()> {
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// CSV with a header row; `None` becomes an empty field.
pub fn write_csv<T: Serialize>(out: impl Write, rows: &[T]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
