//! Line-delimited JSON protocol for out-of-process providers.
//!
//! The provider process first writes a manifest line:
//!
//! ```text
//! {"protocol":"setr-stream/1","concurrency":"serial","model":"<id>"}
//! ```
//!
//! Then, for each request line
//!
//! ```text
//! {"seq":1,"sample_id":"q1","mode":"trace_only","prompt":"...","context_start":210,"context_end":812}
//! ```
//!
//! it writes exactly one response line carrying the same `seq` and one of
//! `trace_path` (a `SETR1` file, for `trace_only`), `text` (for `answer`, or
//! raw generated text for `extract_evidence`), `snippets` (a list, for
//! `extract_evidence`) or `error`. The context range is in UTF-8 bytes of
//! `prompt`. Providers must decode greedily so repeated requests give
//! identical responses. A malformed request line gets an error response with
//! `seq` null and the provider keeps serving.

use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Concurrency, Provider, ProviderError, ProviderRequest, ProviderResponse, RequestMode};
use crate::trace::{read_trace_file, write_trace_file};

pub const PROTOCOL: &str = "setr-stream/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub protocol: String,
    #[serde(default)]
    pub concurrency: Concurrency,
    #[serde(default)]
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub seq: u64,
    pub sample_id: String,
    pub mode: RequestMode,
    pub prompt: String,
    pub context_start: usize,
    pub context_end: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snippets: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RequestRecord {
    pub fn to_request(&self) -> ProviderRequest {
        ProviderRequest {
            sample_id: self.sample_id.clone(),
            mode: self.mode,
            prompt: self.prompt.clone(),
            context: self.context_start..self.context_end,
        }
    }
}

/// Counters reported when [`serve`] reaches end of input.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub requests: usize,
    pub errors: usize,
}

/// Serves `provider` over the stream protocol until `input` ends. Traces are
/// written into `trace_dir`.
pub fn serve<P: Provider + ?Sized>(
    provider: &P,
    model: &str,
    input: impl BufRead,
    mut output: impl Write,
    trace_dir: &Path,
) -> io::Result<ServeStats> {
    let manifest = Manifest {
        protocol: PROTOCOL.into(),
        concurrency: provider.concurrency(),
        model: model.into(),
    };
    writeln!(output, "{}", serde_json::to_string(&manifest)?)?;
    output.flush()?;

    let mut stats = ServeStats::default();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.requests += 1;
        let response = match serde_json::from_str::<RequestRecord>(&line) {
            Err(e) => ResponseRecord {
                error: Some(format!("malformed request: {e}")),
                ..Default::default()
            },
            Ok(rec) => respond(provider, &rec, trace_dir),
        };
        if response.error.is_some() {
            stats.errors += 1;
        }
        writeln!(output, "{}", serde_json::to_string(&response)?)?;
        output.flush()?;
    }
    Ok(stats)
}

fn respond<P: Provider + ?Sized>(provider: &P, rec: &RequestRecord, trace_dir: &Path) -> ResponseRecord {
    let mut out = ResponseRecord {
        seq: Some(rec.seq),
        ..Default::default()
    };
    let result = provider.call(&rec.to_request()).and_then(|resp| match resp {
        ProviderResponse::Trace(t) => {
            let bytes = write_trace_file(&t).map_err(|e| ProviderError::BadTrace(e.to_string()))?;
            let path = trace_dir.join(format!("{:08}.setr", rec.seq));
            std::fs::write(&path, bytes)?;
            out.trace_path = Some(path.to_string_lossy().into_owned());
            Ok(())
        }
        ProviderResponse::Answer(text) => {
            out.text = Some(text);
            Ok(())
        }
        ProviderResponse::Evidence(snippets) => {
            out.snippets = Some(snippets);
            Ok(())
        }
    });
    if let Err(e) = result {
        out.error = Some(e.to_string());
    }
    out
}

struct Channel {
    reader: Box<dyn BufRead + Send>,
    writer: Option<Box<dyn Write + Send>>,
    next_seq: u64,
}

/// Client side of the stream protocol.
pub struct StreamProvider {
    channel: Mutex<Channel>,
    manifest: Manifest,
    child: Mutex<Option<Child>>,
}

impl std::fmt::Debug for StreamProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StreamProvider")
            .field("manifest", &self.manifest)
            .finish_non_exhaustive()
    }
}

impl StreamProvider {
    /// Talks to a provider over an already-open pair of streams, reading the
    /// manifest line first.
    pub fn connect(
        mut reader: Box<dyn BufRead + Send>,
        writer: Box<dyn Write + Send>,
    ) -> Result<Self, ProviderError> {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(ProviderError::Protocol("provider closed before sending a manifest".into()));
        }
        let manifest: Manifest = serde_json::from_str(line.trim())
            .map_err(|e| ProviderError::Protocol(format!("bad manifest line: {e}")))?;
        if manifest.protocol != PROTOCOL {
            return Err(ProviderError::Protocol(format!(
                "unsupported protocol {:?}, expected {PROTOCOL:?}",
                manifest.protocol
            )));
        }
        Ok(Self {
            channel: Mutex::new(Channel {
                reader,
                writer: Some(writer),
                next_seq: 1,
            }),
            manifest,
            child: Mutex::new(None),
        })
    }

    /// Starts `command` through the shell and connects to its stdio.
    pub fn spawn(command: &str) -> Result<Self, ProviderError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let provider = Self::connect(Box::new(BufReader::new(stdout)), Box::new(stdin))?;
        *provider.child.lock().expect("child lock") = Some(child);
        Ok(provider)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }
}

impl Drop for StreamProvider {
    fn drop(&mut self) {
        if let Ok(ch) = self.channel.get_mut() {
            // closing stdin asks the provider to exit
            ch.writer = None;
        }
        if let Ok(Some(mut child)) = self.child.get_mut().map(Option::take) {
            let _ = child.wait();
        }
    }
}

impl Provider for StreamProvider {
    fn concurrency(&self) -> Concurrency {
        self.manifest.concurrency
    }

    fn call(&self, req: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        let mut ch = self
            .channel
            .lock()
            .map_err(|_| ProviderError::Protocol("provider channel poisoned".into()))?;
        let seq = ch.next_seq;
        ch.next_seq += 1;
        let record = RequestRecord {
            seq,
            sample_id: req.sample_id.clone(),
            mode: req.mode,
            prompt: req.prompt.clone(),
            context_start: req.context.start,
            context_end: req.context.end,
        };
        let line = serde_json::to_string(&record).map_err(|e| ProviderError::Protocol(e.to_string()))?;
        let writer = ch
            .writer
            .as_mut()
            .ok_or_else(|| ProviderError::Protocol("provider input closed".into()))?;
        writeln!(writer, "{line}")?;
        writer.flush()?;

        let mut reply = String::new();
        if ch.reader.read_line(&mut reply)? == 0 {
            return Err(ProviderError::Protocol("provider closed the stream".into()));
        }
        drop(ch);
        let resp: ResponseRecord = serde_json::from_str(reply.trim())
            .map_err(|e| ProviderError::Protocol(format!("bad response line: {e}")))?;
        if resp.seq != Some(seq) {
            return Err(ProviderError::Protocol(format!(
                "response seq {:?} does not match request {seq}",
                resp.seq
            )));
        }
        decode(req.mode, resp)
    }
}

fn decode(mode: RequestMode, resp: ResponseRecord) -> Result<ProviderResponse, ProviderError> {
    if let Some(e) = resp.error {
        return Err(ProviderError::Remote(e));
    }
    match (mode, resp.trace_path, resp.text, resp.snippets) {
        (RequestMode::TraceOnly, Some(path), _, _) => {
            let bytes = std::fs::read(PathBuf::from(&path))?;
            let trace = read_trace_file(&bytes).map_err(|e| ProviderError::BadTrace(format!("{path}: {e}")))?;
            Ok(ProviderResponse::Trace(trace))
        }
        (RequestMode::Answer, _, Some(text), _) => Ok(ProviderResponse::Answer(text)),
        (RequestMode::ExtractEvidence, _, _, Some(snippets)) => Ok(ProviderResponse::Evidence(snippets)),
        (RequestMode::ExtractEvidence, _, Some(text), None) => Ok(ProviderResponse::Answer(text)),
        (mode, ..) => Err(ProviderError::Protocol(format!("response lacks the field a {mode} request needs"))),
    }
}
