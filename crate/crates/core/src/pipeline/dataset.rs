//! Dataset records, ingestion, and conversion from common QA formats.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::highlight::REJECTION;

/// One question over one context passage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaSample {
    pub id: String,
    pub context: String,
    pub question: String,
    pub answers: Vec<String>,
    /// Annotated supporting-fact text, when the dataset has it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence_sentences: Option<Vec<String>>,
    #[serde(default = "yes")]
    pub answerable: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: no valid samples ({rejected} lines rejected)")]
    NoSamples { path: String, rejected: usize },
    #[error("malformed {format} input: {reason}")]
    Convert { format: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedLine {
    /// 1-based.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ingested {
    pub samples: Vec<QaSample>,
    pub rejected: Vec<RejectedLine>,
}

fn check_sample(s: &QaSample) -> Result<(), String> {
    if s.id.trim().is_empty() {
        return Err("empty id".into());
    }
    if s.context.trim().is_empty() {
        return Err("empty context".into());
    }
    if s.question.trim().is_empty() {
        return Err("empty question".into());
    }
    if s.answers.is_empty() {
        return Err("empty answers".into());
    }
    Ok(())
}

/// Parses line-delimited sample records. Malformed lines are reported and
/// skipped.
pub fn parse_dataset(text: &str) -> Ingested {
    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    let mut seen = HashSet::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let verdict = serde_json::from_str::<QaSample>(line)
            .map_err(|e| e.to_string())
            .and_then(|s| check_sample(&s).map(|_| s))
            .and_then(|s| {
                if seen.insert(s.id.clone()) {
                    Ok(s)
                } else {
                    Err(format!("duplicate id {:?}", s.id))
                }
            });
        match verdict {
            Ok(s) => samples.push(s),
            Err(reason) => rejected.push(RejectedLine { line: k + 1, reason }),
        }
    }
    Ingested { samples, rejected }
}

/// Reads a dataset file; fails only if it is unreadable or has no valid
/// sample.
pub fn ingest_dataset(path: &Path) -> Result<Ingested, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Unreadable {
        path: path.display().to_string(),
        source,
    })?;
    let out = parse_dataset(&text);
    for r in &out.rejected {
        log::warn!("{}:{}: rejected: {}", path.display(), r.line, r.reason);
    }
    if out.samples.is_empty() {
        return Err(DatasetError::NoSamples {
            path: path.display().to_string(),
            rejected: out.rejected.len(),
        });
    }
    Ok(out)
}

/// Serializes samples as one JSON record per line.
pub fn to_jsonl(samples: &[QaSample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("sample serializes"));
        out.push('\n');
    }
    out
}

fn str_field<'a>(v: &'a Value, key: &str, format: &'static str) -> Result<&'a str, DatasetError> {
    v.get(key).and_then(Value::as_str).ok_or_else(|| DatasetError::Convert {
        format,
        reason: format!("missing string field {key:?}"),
    })
}

/// HotpotQA JSON (a list of records with `context` paragraphs and
/// `supporting_facts`). Paragraphs are joined with line breaks; supporting
/// facts become annotated evidence.
pub fn convert_hotpotqa(json: &str) -> Result<Vec<QaSample>, DatasetError> {
    const F: &str = "hotpotqa";
    let err = |reason: String| DatasetError::Convert { format: F, reason };
    let records: Vec<Value> = serde_json::from_str(json).map_err(|e| err(e.to_string()))?;
    records
        .iter()
        .map(|r| {
            let id = r
                .get("_id")
                .or_else(|| r.get("id"))
                .and_then(Value::as_str)
                .ok_or_else(|| err("missing \"_id\"".into()))?;
            let question = str_field(r, "question", F)?;
            let answer = str_field(r, "answer", F)?;
            let paragraphs = r
                .get("context")
                .and_then(Value::as_array)
                .ok_or_else(|| err(format!("{id}: missing context")))?;
            let mut lines = Vec::new();
            let mut titled = Vec::new();
            for p in paragraphs {
                let title = p.get(0).and_then(Value::as_str).unwrap_or_default();
                let sents: Vec<&str> = p
                    .get(1)
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(Value::as_str).collect())
                    .unwrap_or_default();
                let text = sents.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect::<Vec<_>>();
                if !text.is_empty() {
                    lines.push(text.join(" "));
                }
                titled.push((title, sents));
            }
            let mut evidence = Vec::new();
            for fact in r.get("supporting_facts").and_then(Value::as_array).into_iter().flatten() {
                let title = fact.get(0).and_then(Value::as_str).unwrap_or_default();
                let idx = fact.get(1).and_then(Value::as_u64).unwrap_or(u64::MAX) as usize;
                let found = titled
                    .iter()
                    .find(|(t, _)| *t == title)
                    .and_then(|(_, s)| s.get(idx))
                    .map(|s| s.trim())
                    .filter(|s| !s.is_empty());
                match found {
                    Some(s) => evidence.push(s.to_owned()),
                    None => log::warn!("{id}: supporting fact ({title:?}, {idx}) not in context"),
                }
            }
            Ok(QaSample {
                id: id.to_owned(),
                context: lines.join("\n"),
                question: question.to_owned(),
                answers: vec![answer.to_owned()],
                evidence_sentences: (!evidence.is_empty()).then_some(evidence),
                answerable: true,
            })
        })
        .collect()
}

/// MRQA JSONL: an optional header line, then one record per context with a
/// `qas` list. Each question becomes a sample.
pub fn convert_mrqa(jsonl: &str) -> Result<Vec<QaSample>, DatasetError> {
    const F: &str = "mrqa";
    let mut out = Vec::new();
    for (k, line) in jsonl.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| DatasetError::Convert {
            format: F,
            reason: format!("line {}: {reason}", k + 1),
        };
        let v: Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if v.get("header").is_some() {
            continue;
        }
        let context = str_field(&v, "context", F)?;
        let qas = v
            .get("qas")
            .and_then(Value::as_array)
            .ok_or_else(|| err("missing \"qas\"".into()))?;
        for qa in qas {
            let id = qa
                .get("qid")
                .or_else(|| qa.get("id"))
                .and_then(Value::as_str)
                .ok_or_else(|| err("question without \"qid\"".into()))?;
            let answers: Vec<String> = qa
                .get("answers")
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(Value::as_str).map(str::to_owned).collect())
                .unwrap_or_default();
            // unanswerable questions take the rejection string as gold
            let answerable = !answers.is_empty();
            out.push(QaSample {
                id: id.to_owned(),
                context: context.to_owned(),
                question: str_field(qa, "question", F)?.to_owned(),
                answers: if answerable { answers } else { vec![REJECTION.to_owned()] },
                answerable,
                evidence_sentences: None,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answerable_defaults_to_true() {
        let s: QaSample =
            serde_json::from_str(r#"{"id":"a","context":"C.","question":"Q?","answers":["x"]}"#).unwrap();
        assert!(s.answerable);
        assert_eq!(s.evidence_sentences, None);
    }

    #[test]
    fn rejects_bad_lines_with_numbers() {
        let text = concat!(
            r#"{"id":"a","context":"C.","question":"Q?","answers":["x"]}"#,
            "\n",
            r#"{"id":"b","context":"C.","question":"Q?"}"#,
            "\n\nnot json\n",
            r#"{"id":"a","context":"C.","question":"Q?","answers":["y"]}"#,
            "\n"
        );
        let got = parse_dataset(text);
        assert_eq!(got.samples.len(), 1);
        let lines: Vec<usize> = got.rejected.iter().map(|r| r.line).collect();
        assert_eq!(lines, vec![2, 4, 5]);
    }

    #[test]
    fn hotpot_supporting_facts_become_evidence() {
        let json = r#"[{"_id":"h1","question":"When?","answer":"1941",
            "context":[["SAS",["The SAS was founded in 1941."," It grew."]],["Other",["Nothing here."]]],
            "supporting_facts":[["SAS",0]]}]"#;
        let got = convert_hotpotqa(json).unwrap();
        assert_eq!(got[0].context, "The SAS was founded in 1941. It grew.\nNothing here.");
        assert_eq!(got[0].evidence_sentences, Some(vec!["The SAS was founded in 1941.".to_owned()]));
    }

    #[test]
    fn mrqa_expands_questions() {
        let jsonl = concat!(
            r#"{"header":{"dataset":"x"}}"#,
            "\n",
            r#"{"context":"A b.","qas":[{"qid":"1","question":"Q1?","answers":["b"]},{"qid":"2","question":"Q2?","answers":[]}]}"#
        );
        let got = convert_mrqa(jsonl).unwrap();
        assert_eq!(got.len(), 2);
        assert!(got[0].answerable);
        assert!(!got[1].answerable);
    }
}
