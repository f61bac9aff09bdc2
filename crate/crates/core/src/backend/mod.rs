//! The contract a language-model runtime satisfies to drive the pipeline.
//!
//! Three request modes exist: `trace_only` runs one generation step and
//! returns the attention trace, `answer` generates an answer greedily, and
//! `extract_evidence` generates evidence snippets for the PromptElicit
//! baseline.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::AttentionTrace;

pub mod mock;
pub mod stream;

pub use mock::{MockCase, MockDataset, MockProvider, MockWorld, SynthConfig};
pub use stream::StreamProvider;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestMode {
    TraceOnly,
    Answer,
    ExtractEvidence,
}

impl fmt::Display for RequestMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RequestMode::TraceOnly => "trace_only",
            RequestMode::Answer => "answer",
            RequestMode::ExtractEvidence => "extract_evidence",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderRequest {
    /// Opaque tag passed through to the provider.
    pub sample_id: String,
    pub mode: RequestMode,
    pub prompt: String,
    /// Byte range of the context passage inside `prompt`.
    pub context: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderResponse {
    Trace(AttentionTrace),
    Answer(String),
    Evidence(Vec<String>),
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("provider returned an error: {0}")]
    Remote(String),
    #[error("provider protocol violation: {0}")]
    Protocol(String),
    #[error("provider returned an invalid trace: {0}")]
    BadTrace(String),
    #[error("unknown sample {0:?}")]
    UnknownSample(String),
    #[error("provider I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Whether a provider accepts overlapping requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concurrency {
    #[default]
    Concurrent,
    Serial,
}

impl FromStr for Concurrency {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "concurrent" => Ok(Self::Concurrent),
            "serial" => Ok(Self::Serial),
            _ => Err(format!("unknown concurrency {s:?}")),
        }
    }
}

pub trait Provider: Send + Sync {
    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }

    fn call(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError>;

    fn trace(&self, request: &ProviderRequest) -> Result<AttentionTrace, ProviderError> {
        debug_assert_eq!(request.mode, RequestMode::TraceOnly);
        match self.call(request)? {
            ProviderResponse::Trace(t) => {
                let report = t.validate();
                if !report.is_valid() {
                    return Err(ProviderError::BadTrace(report.to_string()));
                }
                Ok(t)
            }
            other => Err(unexpected(RequestMode::TraceOnly, &other)),
        }
    }

    fn answer(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        match self.call(request)? {
            ProviderResponse::Answer(a) => Ok(a),
            other => Err(unexpected(RequestMode::Answer, &other)),
        }
    }

    fn extract(&self, request: &ProviderRequest) -> Result<Vec<String>, ProviderError> {
        match self.call(request)? {
            ProviderResponse::Evidence(e) => Ok(e),
            // raw generated text is parsed as a bullet list
            ProviderResponse::Answer(text) => Ok(crate::highlight::parse_extracted_evidence(&text)),
            other => Err(unexpected(RequestMode::ExtractEvidence, &other)),
        }
    }
}

fn unexpected(mode: RequestMode, got: &ProviderResponse) -> ProviderError {
    let kind = match got {
        ProviderResponse::Trace(_) => "trace",
        ProviderResponse::Answer(_) => "answer",
        ProviderResponse::Evidence(_) => "evidence",
    };
    ProviderError::Protocol(format!("{mode} request answered with a {kind} response"))
}

impl<P: Provider + ?Sized> Provider for Box<P> {
    fn concurrency(&self) -> Concurrency {
        (**self).concurrency()
    }

    fn call(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        (**self).call(request)
    }
}

impl<P: Provider + ?Sized> Provider for std::sync::Arc<P> {
    fn concurrency(&self) -> Concurrency {
        (**self).concurrency()
    }

    fn call(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        (**self).call(request)
    }
}
