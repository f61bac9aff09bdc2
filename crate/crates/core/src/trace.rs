//! Attention traces: the head-averaged attention row of every layer, read at
//! the prompt position that produces the first response token.
//!
//! A trace is stored as one self-describing file (`SETR1`): a text manifest
//! followed by a little-endian `f32` payload. See [`write_trace_file`] for the
//! exact layout.

use std::fmt;
use std::ops::Range;

use thiserror::Error;

/// Allowed deviation of a layer's attention row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-3;
/// Allowed deviation between stored layers and the mean of the per-head rows.
pub const HEAD_MEAN_TOLERANCE: f64 = 1e-5;

const MAGIC: &[u8] = b"SETR1\n";
const MAGIC_PREFIX: &[u8] = b"SETR";

/// One prompt token. `span` is a byte range into the context string and is
/// `None` for tokens outside the context passage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRecord {
    pub text: String,
    pub span: Option<Range<usize>>,
}

impl TokenRecord {
    pub fn new(text: impl Into<String>, span: Option<Range<usize>>) -> Self {
        Self {
            text: text.into(),
            span,
        }
    }
}

/// Per-layer, head-averaged attention over the `n` prompt tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub id: String,
    pub model_id: String,
    /// `layers[l][j]`: attention paid to prompt token `j` by layer `l`.
    pub layers: Vec<Vec<f32>>,
    /// Prompt token indices `[start, end)` covering the context passage.
    pub context_tokens: Range<usize>,
    pub tokens: Vec<TokenRecord>,
    /// Optional `L × H × n` audit copy of the raw per-head rows.
    pub per_head: Option<Vec<Vec<Vec<f32>>>>,
}

impl AttentionTrace {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.layers.first().map_or(self.tokens.len(), Vec::len)
    }

    pub fn n_heads(&self) -> usize {
        self.per_head
            .as_ref()
            .and_then(|p| p.first())
            .map_or(0, Vec::len)
    }

    pub fn n_context_tokens(&self) -> usize {
        self.context_tokens.len()
    }

    /// Builds a trace from a per-head tensor, storing both the head mean and
    /// the raw rows.
    pub fn from_per_head(
        id: impl Into<String>,
        model_id: impl Into<String>,
        per_head: Vec<Vec<Vec<f32>>>,
        context_tokens: Range<usize>,
        tokens: Vec<TokenRecord>,
    ) -> Result<Self, ShapeError> {
        let layers = head_average(&per_head)?;
        Ok(Self {
            id: id.into(),
            model_id: model_id.into(),
            layers,
            context_tokens,
            tokens,
            per_head: Some(per_head),
        })
    }

    pub fn validate(&self) -> ValidationReport {
        validate_trace(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{axis} axis mismatch: expected {expected}, found {found} (at {location})")]
pub struct ShapeError {
    pub axis: Axis,
    pub expected: usize,
    pub found: usize,
    pub location: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Layer,
    Head,
    Token,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Layer => "layer",
            Axis::Head => "head",
            Axis::Token => "token",
        })
    }
}

/// Averages attention over heads: `out[l][j] = mean_h per_head[l][h][j]`.
///
/// Accumulation is done in `f64` before rounding back to `f32`.
pub fn head_average(per_head: &[Vec<Vec<f32>>]) -> Result<Vec<Vec<f32>>, ShapeError> {
    if per_head.is_empty() {
        return Err(ShapeError {
            axis: Axis::Layer,
            expected: 1,
            found: 0,
            location: "tensor".into(),
        });
    }
    let n_heads = per_head[0].len();
    let n_tokens = per_head[0].first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(per_head.len());
    for (l, heads) in per_head.iter().enumerate() {
        if heads.len() != n_heads || n_heads == 0 {
            return Err(ShapeError {
                axis: Axis::Head,
                expected: n_heads.max(1),
                found: heads.len(),
                location: format!("layer {l}"),
            });
        }
        let mut acc = vec![0.0f64; n_tokens];
        for (h, row) in heads.iter().enumerate() {
            if row.len() != n_tokens {
                return Err(ShapeError {
                    axis: Axis::Token,
                    expected: n_tokens,
                    found: row.len(),
                    location: format!("layer {l}, head {h}"),
                });
            }
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += f64::from(v);
            }
        }
        out.push(acc.into_iter().map(|a| (a / n_heads as f64) as f32).collect());
    }
    Ok(out)
}

/// One violated trace invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoLayers,
    NoTokens,
    RowLength { layer: usize, expected: usize, found: usize },
    NegativeOrNonFinite { layer: usize, token: usize, value: f32 },
    RowSum { layer: usize, sum: f64 },
    ContextRange { start: usize, end: usize, n_tokens: usize },
    TokenCount { expected: usize, found: usize },
    MissingContextOffset { token: usize },
    OffsetOutsideContext { token: usize },
    BadTokenSpan { token: usize },
    OverlappingTokenSpans { token: usize },
    PerHeadShape(String),
    HeadMean { layer: usize, token: usize, diff: f64 },
    ManifestText { field: &'static str },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoLayers => write!(f, "trace has no layers"),
            Violation::NoTokens => write!(f, "trace has no tokens"),
            Violation::RowLength {
                layer,
                expected,
                found,
            } => write!(f, "layer {layer}: row has {found} entries, expected {expected}"),
            Violation::NegativeOrNonFinite { layer, token, value } => {
                write!(f, "layer {layer}, token {token}: invalid attention value {value}")
            }
            Violation::RowSum { layer, sum } => {
                write!(f, "layer {layer}: attention row sums to {sum}, expected 1")
            }
            Violation::ContextRange {
                start,
                end,
                n_tokens,
            } => write!(
                f,
                "context token range [{start}, {end}) invalid for {n_tokens} tokens"
            ),
            Violation::TokenCount { expected, found } => {
                write!(f, "{found} token records, expected {expected}")
            }
            Violation::MissingContextOffset { token } => {
                write!(f, "context token {token} has no character span")
            }
            Violation::OffsetOutsideContext { token } => {
                write!(f, "token {token} outside the context carries a character span")
            }
            Violation::BadTokenSpan { token } => write!(f, "token {token}: span end before start"),
            Violation::OverlappingTokenSpans { token } => {
                write!(f, "token {token}: span overlaps or precedes the previous token")
            }
            Violation::PerHeadShape(msg) => write!(f, "per-head tensor: {msg}"),
            Violation::HeadMean { layer, token, diff } => write!(
                f,
                "layer {layer}, token {token}: stored value differs from head mean by {diff}"
            ),
            Violation::ManifestText { field } => {
                write!(f, "{field} must not contain line breaks")
            }
        }
    }
}

/// Result of [`validate_trace`]: empty means the trace is valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            return write!(f, "ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks every trace invariant and reports all violations found.
pub fn validate_trace(trace: &AttentionTrace) -> ValidationReport {
    let mut v = Vec::new();
    let n = trace.n_tokens();
    if trace.layers.is_empty() {
        v.push(Violation::NoLayers);
    }
    if n == 0 {
        v.push(Violation::NoTokens);
    }
    for (field, text) in [("id", &trace.id), ("model", &trace.model_id)] {
        if text.contains(['\n', '\r']) {
            v.push(Violation::ManifestText { field });
        }
    }

    for (l, row) in trace.layers.iter().enumerate() {
        if row.len() != n {
            v.push(Violation::RowLength {
                layer: l,
                expected: n,
                found: row.len(),
            });
            continue;
        }
        let mut sum = 0.0f64;
        for (j, &a) in row.iter().enumerate() {
            if !a.is_finite() || a < 0.0 {
                v.push(Violation::NegativeOrNonFinite {
                    layer: l,
                    token: j,
                    value: a,
                });
            }
            sum += f64::from(a);
        }
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            v.push(Violation::RowSum { layer: l, sum });
        }
    }

    let ctx = &trace.context_tokens;
    if ctx.start >= ctx.end || ctx.end > n {
        v.push(Violation::ContextRange {
            start: ctx.start,
            end: ctx.end,
            n_tokens: n,
        });
    }

    if trace.tokens.len() != n {
        v.push(Violation::TokenCount {
            expected: n,
            found: trace.tokens.len(),
        });
    }
    let mut prev_end = 0usize;
    for (j, tok) in trace.tokens.iter().enumerate() {
        let inside = ctx.contains(&j);
        match (&tok.span, inside) {
            (None, true) => v.push(Violation::MissingContextOffset { token: j }),
            (Some(_), false) => v.push(Violation::OffsetOutsideContext { token: j }),
            (Some(span), true) => {
                if span.end < span.start {
                    v.push(Violation::BadTokenSpan { token: j });
                } else if span.start < prev_end {
                    v.push(Violation::OverlappingTokenSpans { token: j });
                } else {
                    prev_end = span.end;
                }
            }
            (None, false) => {}
        }
    }

    if let Some(per_head) = &trace.per_head {
        match head_average(per_head) {
            Err(e) => v.push(Violation::PerHeadShape(e.to_string())),
            Ok(mean) if mean.len() != trace.layers.len() => {
                v.push(Violation::PerHeadShape(format!(
                    "{} layers, trace has {}",
                    mean.len(),
                    trace.layers.len()
                )))
            }
            Ok(mean) => {
                for (l, (m_row, row)) in mean.iter().zip(&trace.layers).enumerate() {
                    if m_row.len() != row.len() {
                        v.push(Violation::PerHeadShape(format!(
                            "layer {l} has {} tokens, trace has {}",
                            m_row.len(),
                            row.len()
                        )));
                        continue;
                    }
                    let worst = m_row
                        .iter()
                        .zip(row)
                        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(&b.1));
                    if let Some((j, diff)) = worst {
                        if diff > HEAD_MEAN_TOLERANCE {
                            v.push(Violation::HeadMean {
                                layer: l,
                                token: j,
                                diff,
                            });
                        }
                    }
                }
            }
        }
    }

    ValidationReport { violations: v }
}

#[derive(Debug, Error)]
pub enum TraceFileError {
    #[error("not a trace file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported trace format version {0:?}")]
    UnsupportedVersion(String),
    #[error("malformed manifest at line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    PayloadSize { expected: usize, found: usize },
    #[error("invalid trace:\n{0}")]
    Invalid(ValidationReport),
}

/// Serializes a valid trace.
///
/// Layout:
///
/// ```text
/// SETR1\n
/// id=<sample id>
/// model=<model id>
/// layers=<L>
/// heads=<H, 0 when no per-head payload>
/// tokens=<n>
/// ctx_start=<c_start>
/// ctx_end=<c_end>
/// <index>,<start>,<end>,<json-quoted token text>    (one per token; "-,-" outside the context)
/// \n                                                (blank line)
/// <L*n f32 LE, row-major><L*H*n f32 LE, row-major, only when H > 0>
/// ```
///
/// Token spans are UTF-8 byte offsets into the context string.
pub fn write_trace_file(trace: &AttentionTrace) -> Result<Vec<u8>, TraceFileError> {
    let report = validate_trace(trace);
    if !report.is_valid() {
        return Err(TraceFileError::Invalid(report));
    }
    let n = trace.n_tokens();
    let heads = trace.n_heads();
    let mut manifest = String::new();
    manifest.push_str(&format!("id={}\n", trace.id));
    manifest.push_str(&format!("model={}\n", trace.model_id));
    manifest.push_str(&format!("layers={}\n", trace.n_layers()));
    manifest.push_str(&format!("heads={heads}\n"));
    manifest.push_str(&format!("tokens={n}\n"));
    manifest.push_str(&format!("ctx_start={}\n", trace.context_tokens.start));
    manifest.push_str(&format!("ctx_end={}\n", trace.context_tokens.end));
    for (j, tok) in trace.tokens.iter().enumerate() {
        let text = serde_json::to_string(&tok.text).expect("string serialization");
        match &tok.span {
            Some(s) => manifest.push_str(&format!("{j},{},{},{text}\n", s.start, s.end)),
            None => manifest.push_str(&format!("{j},-,-,{text}\n")),
        }
    }
    manifest.push('\n');

    let payload_len = 4 * n * trace.n_layers() * (1 + heads);
    let mut out = Vec::with_capacity(MAGIC.len() + manifest.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(manifest.as_bytes());
    for row in &trace.layers {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(per_head) = &trace.per_head {
        for v in per_head.iter().flatten().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a trace file and validates the result.
pub fn read_trace_file(bytes: &[u8]) -> Result<AttentionTrace, TraceFileError> {
    let first_nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(TraceFileError::BadMagic)?;
    let magic = &bytes[..=first_nl];
    if magic != MAGIC {
        if magic.starts_with(MAGIC_PREFIX) {
            let v = String::from_utf8_lossy(&magic[MAGIC_PREFIX.len()..first_nl]).into_owned();
            return Err(TraceFileError::UnsupportedVersion(v));
        }
        return Err(TraceFileError::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    let header_end = find_blank_line(rest).ok_or(TraceFileError::Manifest {
        line: 0,
        reason: "missing blank line terminating the manifest".into(),
    })?;
    let manifest = std::str::from_utf8(&rest[..header_end]).map_err(|e| TraceFileError::Manifest {
        line: 0,
        reason: format!("manifest is not UTF-8: {e}"),
    })?;
    let payload = &rest[header_end + 1..];

    let header = parse_manifest(manifest)?;
    let (n_layers, n_heads, n) = (header.layers, header.heads, header.tokens);
    let expected = n_layers
        .checked_mul(n)
        .and_then(|x| x.checked_mul(1 + n_heads))
        .and_then(|x| x.checked_mul(4))
        .ok_or(TraceFileError::Manifest {
            line: 0,
            reason: "dimensions overflow".into(),
        })?;
    if payload.len() != expected {
        return Err(TraceFileError::PayloadSize {
            expected,
            found: payload.len(),
        });
    }

    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let layers: Vec<Vec<f32>> = (0..n_layers)
        .map(|_| values.by_ref().take(n).collect())
        .collect();
    let per_head = (n_heads > 0).then(|| {
        (0..n_layers)
            .map(|_| {
                (0..n_heads)
                    .map(|_| values.by_ref().take(n).collect())
                    .collect()
            })
            .collect()
    });

    let trace = AttentionTrace {
        id: header.id,
        model_id: header.model,
        layers,
        context_tokens: header.ctx_start..header.ctx_end,
        tokens: header.token_records,
        per_head,
    };
    let report = validate_trace(&trace);
    if !report.is_valid() {
        return Err(TraceFileError::Invalid(report));
    }
    Ok(trace)
}

fn find_blank_line(bytes: &[u8]) -> Option<usize> {
    // Offset of the second '\n' in "\n\n", or 0 when the manifest is empty.
    if bytes.first() == Some(&b'\n') {
        return Some(0);
    }
    bytes.windows(2).position(|w| w == b"\n\n").map(|p| p + 1)
}

struct Header {
    id: String,
    model: String,
    layers: usize,
    heads: usize,
    tokens: usize,
    ctx_start: usize,
    ctx_end: usize,
    token_records: Vec<TokenRecord>,
}

fn parse_manifest(text: &str) -> Result<Header, TraceFileError> {
    let mut id = None;
    let mut model = None;
    let mut nums: [Option<usize>; 5] = [None; 5];
    const NUM_KEYS: [&str; 5] = ["layers", "heads", "tokens", "ctx_start", "ctx_end"];
    let mut records = Vec::new();

    for (i, line) in text.lines().enumerate() {
        let lineno = i + 2;
        let bad = |reason: String| TraceFileError::Manifest {
            line: lineno,
            reason,
        };
        if line.starts_with(|c: char| c.is_ascii_digit()) {
            records.push(parse_token_line(line).map_err(bad)?);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, found {line:?}")))?;
        match key {
            "id" => id = Some(value.to_owned()),
            "model" => model = Some(value.to_owned()),
            k => {
                if let Some(slot) = NUM_KEYS.iter().position(|&n| n == k) {
                    let parsed = value
                        .parse()
                        .map_err(|_| bad(format!("{k} is not a count: {value:?}")))?;
                    nums[slot] = Some(parsed);
                }
                // other keys are tolerated and ignored
            }
        }
    }

    let missing = |k: &str| TraceFileError::Manifest {
        line: 0,
        reason: format!("missing key {k}"),
    };
    let get = |slot: usize| nums[slot].ok_or_else(|| missing(NUM_KEYS[slot]));
    let header = Header {
        id: id.ok_or_else(|| missing("id"))?,
        model: model.ok_or_else(|| missing("model"))?,
        layers: get(0)?,
        heads: get(1)?,
        tokens: get(2)?,
        ctx_start: get(3)?,
        ctx_end: get(4)?,
        token_records: Vec::new(),
    };
    if records.len() != header.tokens {
        return Err(TraceFileError::Manifest {
            line: 0,
            reason: format!(
                "{} token lines for tokens={}",
                records.len(),
                header.tokens
            ),
        });
    }
    for (expected, (index, _)) in records.iter().enumerate() {
        if *index != expected {
            return Err(TraceFileError::Manifest {
                line: 0,
                reason: format!("token line index {index}, expected {expected}"),
            });
        }
    }
    Ok(Header {
        token_records: records.into_iter().map(|(_, r)| r).collect(),
        ..header
    })
}

fn parse_token_line(line: &str) -> Result<(usize, TokenRecord), String> {
    let mut parts = line.splitn(4, ',');
    let mut next = |what: &str| parts.next().ok_or_else(|| format!("token line missing {what}"));
    let index = next("index")?;
    let start = next("start")?;
    let end = next("end")?;
    let text = next("text")?;
    let index: usize = index
        .parse()
        .map_err(|_| format!("bad token index {index:?}"))?;
    let span = match (start, end) {
        ("-", "-") => None,
        (s, e) => {
            let s: usize = s.parse().map_err(|_| format!("bad span start {s:?}"))?;
            let e: usize = e.parse().map_err(|_| format!("bad span end {e:?}"))?;
            Some(s..e)
        }
    };
    let text: String =
        serde_json::from_str(text).map_err(|e| format!("bad token text {text:?}: {e}"))?;
    Ok((index, TokenRecord { text, span }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_trace(n_layers: usize, n: usize) -> AttentionTrace {
        let tokens = (0..n)
            .map(|j| {
                if j == 0 {
                    TokenRecord::new("<s>", None)
                } else {
                    TokenRecord::new(format!("w{j}"), Some((j - 1) * 3..(j - 1) * 3 + 2))
                }
            })
            .collect();
        AttentionTrace {
            id: "s1".into(),
            model_id: "toy".into(),
            layers: vec![vec![1.0 / n as f32; n]; n_layers],
            context_tokens: 1..n,
            tokens,
            per_head: None,
        }
    }

    #[test]
    fn head_average_single_head_is_identity() {
        let t = vec![vec![vec![0.1, 0.2, 0.7]], vec![vec![0.5, 0.25, 0.25]]];
        let avg = head_average(&t).unwrap();
        assert_eq!(avg, vec![vec![0.1, 0.2, 0.7], vec![0.5, 0.25, 0.25]]);
    }

    #[test]
    fn head_average_two_heads() {
        let t = vec![vec![vec![0.2, 0.8], vec![0.6, 0.4]]];
        let avg = head_average(&t).unwrap();
        assert!((avg[0][0] - 0.4).abs() < 1e-7);
        assert!((avg[0][1] - 0.6).abs() < 1e-7);
    }

    #[test]
    fn head_average_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (l, h, n) = (3, 4, 10);
        let t: Vec<Vec<Vec<f32>>> = (0..l)
            .map(|_| (0..h).map(|_| (0..n).map(|_| rng.gen::<f32>()).collect()).collect())
            .collect();
        let avg = head_average(&t).unwrap();
        for li in 0..l {
            for j in 0..n {
                let mut s = 0.0f64;
                for hi in 0..h {
                    s += t[li][hi][j] as f64;
                }
                let oracle = (s / h as f64) as f32;
                assert!((f64::from(avg[li][j]) - f64::from(oracle)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn head_average_names_mismatched_axis() {
        let t = vec![vec![vec![0.5, 0.5], vec![1.0]]];
        let err = head_average(&t).unwrap_err();
        assert_eq!(err.axis, Axis::Token);
        let t = vec![vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5], vec![0.5, 0.5]]];
        assert_eq!(head_average(&t).unwrap_err().axis, Axis::Head);
    }

    #[test]
    fn uniform_trace_is_valid() {
        assert!(validate_trace(&uniform_trace(3, 6)).is_valid());
    }

    #[test]
    fn scaled_row_reports_layer() {
        let mut t = uniform_trace(3, 6);
        for v in &mut t.layers[1] {
            *v *= 2.0;
        }
        let report = validate_trace(&t);
        assert_eq!(report.violations.len(), 1);
        assert!(matches!(report.violations[0], Violation::RowSum { layer: 1, .. }));
    }

    #[test]
    fn report_collects_every_violation() {
        let mut t = uniform_trace(2, 5);
        t.context_tokens = 1..9;
        t.layers[0][2] = -0.1;
        let report = validate_trace(&t);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::ContextRange { end: 9, .. })));
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::NegativeOrNonFinite { layer: 0, token: 2, .. })));
        assert!(report.violations.len() >= 3);
    }

    #[test]
    fn per_head_mismatch_is_reported() {
        let per_head = vec![vec![vec![0.2, 0.8], vec![0.6, 0.4]]];
        let tokens = vec![TokenRecord::new("a", Some(0..1)), TokenRecord::new("b", Some(2..3))];
        let mut t = AttentionTrace::from_per_head("x", "m", per_head, 0..2, tokens).unwrap();
        assert!(t.validate().is_valid());
        t.layers[0] = vec![0.5, 0.5];
        assert!(t
            .validate()
            .violations
            .iter()
            .any(|v| matches!(v, Violation::HeadMean { layer: 0, .. })));
    }

    #[test]
    fn round_trip_two_layer_five_token() {
        let t = uniform_trace(2, 5);
        let bytes = write_trace_file(&t).unwrap();
        assert!(bytes.starts_with(b"SETR1\n"));
        assert_eq!(read_trace_file(&bytes).unwrap(), t);
    }

    #[test]
    fn truncated_payload_is_size_error() {
        let bytes = write_trace_file(&uniform_trace(2, 5)).unwrap();
        let err = read_trace_file(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(matches!(
            err,
            TraceFileError::PayloadSize {
                expected: 40,
                found: 36
            }
        ));
    }

    #[test]
    fn zero_layers_is_validation_error() {
        let text = "SETR1\nid=a\nmodel=m\nlayers=0\nheads=0\ntokens=1\nctx_start=0\nctx_end=1\n0,0,1,\"a\"\n\n";
        let err = read_trace_file(text.as_bytes()).unwrap_err();
        match err {
            TraceFileError::Invalid(r) => assert!(r.violations.contains(&Violation::NoLayers)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn distinct_format_errors() {
        assert!(matches!(
            read_trace_file(b"SETR2\nid=a\n\n").unwrap_err(),
            TraceFileError::UnsupportedVersion(v) if v == "2"
        ));
        assert!(matches!(
            read_trace_file(b"GIF89a\n").unwrap_err(),
            TraceFileError::BadMagic
        ));
        assert!(matches!(
            read_trace_file(b"SETR1\nid=a\nlayers=x\n\n").unwrap_err(),
            TraceFileError::Manifest { .. }
        ));
    }

    #[test]
    fn token_text_with_commas_and_newlines_survives() {
        let mut t = uniform_trace(1, 3);
        t.tokens[1].text = "a,\"b\"\n".into();
        let back = read_trace_file(&write_trace_file(&t).unwrap()).unwrap();
        assert_eq!(back.tokens[1].text, "a,\"b\"\n");
    }

    fn arb_trace() -> impl Strategy<Value = AttentionTrace> {
        (1usize..4, 0usize..3, 2usize..12, any::<u64>()).prop_map(|(l, h, n, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let row = |rng: &mut ChaCha8Rng| {
                let raw: Vec<f32> = (0..n).map(|_| rng.gen::<f32>() + 1e-3).collect();
                let s: f32 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect::<Vec<f32>>()
            };
            let tokens: Vec<TokenRecord> = (0..n)
                .map(|j| {
                    let span = (j >= 1).then(|| (j * 2)..(j * 2 + 1));
                    TokenRecord::new(format!("t{j}"), span)
                })
                .collect();
            if h == 0 {
                let layers = (0..l).map(|_| row(&mut rng)).collect();
                AttentionTrace {
                    id: format!("id{seed}"),
                    model_id: "m".into(),
                    layers,
                    context_tokens: 1..n,
                    tokens,
                    per_head: None,
                }
            } else {
                let per_head = (0..l)
                    .map(|_| (0..h).map(|_| row(&mut rng)).collect())
                    .collect();
                AttentionTrace::from_per_head("p", "m", per_head, 1..n, tokens).unwrap()
            }
        })
    }

    proptest! {
        #[test]
        fn file_round_trip_is_lossless(t in arb_trace()) {
            let bytes = write_trace_file(&t).unwrap();
            let back = read_trace_file(&bytes).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn head_average_commutes_with_token_permutation(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (l, h, n) = (2, 3, 6);
            let t: Vec<Vec<Vec<f32>>> = (0..l)
                .map(|_| (0..h).map(|_| (0..n).map(|_| rng.gen::<f32>()).collect()).collect())
                .collect();
            let perm: Vec<usize> = {
                let mut p: Vec<usize> = (0..n).collect();
                p.reverse();
                p.rotate_left(seed as usize % n);
                p
            };
            let permuted: Vec<Vec<Vec<f32>>> = t
                .iter()
                .map(|heads| heads.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect())
                .collect();
            let a = head_average(&t).unwrap();
            let b = head_average(&permuted).unwrap();
            for li in 0..l {
                for (k, &j) in perm.iter().enumerate() {
                    prop_assert_eq!(a[li][j], b[li][k]);
                }
            }
        }
    }
}
