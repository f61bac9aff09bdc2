//! Sentence segmentation of the context passage and alignment of sentences to
//! prompt-token spans.

use std::ops::Range;

use thiserror::Error;

use crate::trace::AttentionTrace;

const TERMINATORS: [char; 3] = ['.', '!', '?'];
const CLOSERS: [char; 8] = ['"', '\'', '\u{201D}', '\u{2019}', ')', ']', '\u{00BB}', '}'];
const OPENERS: [char; 6] = ['"', '\'', '\u{201C}', '\u{2018}', '(', '['];

/// Words that take a trailing period without ending the sentence. Compared
/// lowercase, without the final period.
const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "mt", "ft", "vs", "etc", "e.g", "i.e",
    "inc", "ltd", "co", "corp", "gen", "col", "lt", "sgt", "capt", "cmdr", "adm", "gov", "sen",
    "rep", "rev", "hon", "no", "nos", "vol", "fig", "approx", "dept", "est", "jan", "feb", "mar",
    "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec", "u.s", "u.k", "a.m", "p.m",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SegmentError {
    #[error("context is empty or whitespace-only")]
    EmptyContext,
    #[error("context token {token} has no character span")]
    MissingOffset { token: usize },
    #[error("context token {token} span {start}..{end} lies outside the context (length {len})")]
    OffsetOutOfBounds {
        token: usize,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("sentence {index} captures no tokens")]
    EmptySentence { index: usize },
    #[error("sentence spans are not ordered and disjoint at sentence {index}")]
    BadSpans { index: usize },
}

/// Splits `context` into sentences, returning trimmed byte spans.
///
/// A sentence ends at a run of `.`/`!`/`?` (plus any closing quotes or
/// brackets) that is followed by whitespace and then an uppercase letter,
/// digit or opening quote, unless the word before a single `.` is a known
/// abbreviation. A line break always ends a sentence.
pub fn split_sentences(context: &str) -> Result<Vec<Range<usize>>, SegmentError> {
    if context.trim().is_empty() {
        return Err(SegmentError::EmptyContext);
    }
    let mut spans = Vec::new();
    let mut line_start = 0;
    for line in context.split('\n') {
        split_line(line, line_start, &mut spans);
        line_start += line.len() + 1;
    }
    Ok(spans)
}

fn split_line(line: &str, offset: usize, out: &mut Vec<Range<usize>>) {
    let chars: Vec<(usize, char)> = line.char_indices().collect();
    let byte_at = |i: usize| chars.get(i).map_or(line.len(), |&(b, _)| b);
    let mut start: Option<usize> = None;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i].1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if start.is_none() {
            start = Some(i);
        }
        if !TERMINATORS.contains(&c) {
            i += 1;
            continue;
        }
        let run_start = i;
        let mut j = i;
        while j < chars.len() && TERMINATORS.contains(&chars[j].1) {
            j += 1;
        }
        let single_period = j - run_start == 1 && c == '.';
        while j < chars.len() && CLOSERS.contains(&chars[j].1) {
            j += 1;
        }
        if j < chars.len() && chars[j].1.is_whitespace() {
            let mut k = j;
            while k < chars.len() && chars[k].1.is_whitespace() {
                k += 1;
            }
            if k < chars.len() {
                let next = chars[k].1;
                let opens = next.is_uppercase() || next.is_ascii_digit() || OPENERS.contains(&next);
                let guarded = single_period && is_abbreviation(&chars, run_start);
                if opens && !guarded {
                    let s = start.take().expect("sentence start set");
                    out.push(offset + byte_at(s)..offset + byte_at(j));
                    i = k;
                    continue;
                }
            }
        }
        i = j;
    }
    if let Some(s) = start {
        let end = line.trim_end().len();
        out.push(offset + byte_at(s)..offset + end);
    }
}

fn is_abbreviation(chars: &[(usize, char)], period: usize) -> bool {
    let mut w = period;
    while w > 0 && !chars[w - 1].1.is_whitespace() {
        w -= 1;
    }
    let word: String = chars[w..period]
        .iter()
        .map(|&(_, c)| c)
        .skip_while(|c| !c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    ABBREVIATIONS.contains(&word.as_str())
}

/// One context sentence: its byte span in the context and the closed interval
/// of prompt-token indices it covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub chars: Range<usize>,
    pub token_start: usize,
    /// Inclusive.
    pub token_end: usize,
}

impl Sentence {
    pub fn n_tokens(&self) -> usize {
        self.token_end - self.token_start + 1
    }

    pub fn tokens(&self) -> Range<usize> {
        self.token_start..self.token_end + 1
    }
}

/// The context split into sentences `s_1..s_m`, each aligned to a token span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentedContext {
    pub context: String,
    pub sentences: Vec<Sentence>,
}

impl SegmentedContext {
    /// Splits `context` and aligns the sentences with `trace`'s context tokens.
    pub fn new(context: &str, trace: &AttentionTrace) -> Result<Self, SegmentError> {
        let spans = split_sentences(context)?;
        align_tokens(context, &spans, trace)
    }

    /// Token-level granularity: every context token is its own "sentence".
    pub fn token_level(context: &str, trace: &AttentionTrace) -> Result<Self, SegmentError> {
        let mut sentences = Vec::with_capacity(trace.n_context_tokens());
        for j in trace.context_tokens.clone() {
            let span = checked_span(trace, j, context.len())?;
            sentences.push(Sentence {
                chars: span,
                token_start: j,
                token_end: j,
            });
        }
        Ok(Self {
            context: context.to_owned(),
            sentences,
        })
    }

    /// Segmentation without a trace: whitespace-delimited words stand in for
    /// model tokens, numbered from 0. Used by methods that never read
    /// attention.
    pub fn by_words(context: &str) -> Result<Self, SegmentError> {
        let spans = split_sentences(context)?;
        let mut next = 0;
        let sentences = spans
            .into_iter()
            .enumerate()
            .map(|(i, chars)| {
                let n = context[chars.clone()].split_whitespace().count();
                if n == 0 {
                    return Err(SegmentError::EmptySentence { index: i });
                }
                let s = Sentence {
                    chars,
                    token_start: next,
                    token_end: next + n - 1,
                };
                next += n;
                Ok(s)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            context: context.to_owned(),
            sentences,
        })
    }

    pub fn m(&self) -> usize {
        self.sentences.len()
    }

    pub fn sentence_text(&self, i: usize) -> &str {
        &self.context[self.sentences[i].chars.clone()]
    }

    pub fn n_context_tokens(&self) -> usize {
        self.sentences.iter().map(Sentence::n_tokens).sum()
    }

    /// Sentence spans without token information, in context order.
    pub fn char_spans(&self) -> Vec<Range<usize>> {
        self.sentences.iter().map(|s| s.chars.clone()).collect()
    }
}

fn checked_span(trace: &AttentionTrace, j: usize, len: usize) -> Result<Range<usize>, SegmentError> {
    let span = trace
        .tokens
        .get(j)
        .and_then(|t| t.span.clone())
        .ok_or(SegmentError::MissingOffset { token: j })?;
    if span.end > len || span.start > span.end {
        return Err(SegmentError::OffsetOutOfBounds {
            token: j,
            start: span.start,
            end: span.end,
            len,
        });
    }
    Ok(span)
}

/// Assigns every context token to the sentence holding the midpoint of its
/// span. The whitespace gap after a sentence belongs to that sentence, so the
/// sentences partition the whole context.
pub fn align_tokens(
    context: &str,
    spans: &[Range<usize>],
    trace: &AttentionTrace,
) -> Result<SegmentedContext, SegmentError> {
    for (i, w) in spans.windows(2).enumerate() {
        if w[1].start < w[0].end {
            return Err(SegmentError::BadSpans { index: i + 1 });
        }
    }
    if let Some(i) = spans.iter().position(|s| s.start > s.end || s.end > context.len()) {
        return Err(SegmentError::BadSpans { index: i });
    }

    let mut assigned: Vec<Option<(usize, usize)>> = vec![None; spans.len()];
    for j in trace.context_tokens.clone() {
        let span = checked_span(trace, j, context.len())?;
        let mid2 = span.start + span.end;
        // last sentence whose territory starts at or before the midpoint
        let idx = spans
            .iter()
            .skip(1)
            .take_while(|s| 2 * s.start <= mid2)
            .count();
        let slot = &mut assigned[idx];
        *slot = Some(match *slot {
            None => (j, j),
            Some((first, _)) => (first, j),
        });
    }

    let sentences = spans
        .iter()
        .zip(assigned)
        .enumerate()
        .map(|(i, (span, tokens))| {
            let (token_start, token_end) = tokens.ok_or(SegmentError::EmptySentence { index: i })?;
            Ok(Sentence {
                chars: span.clone(),
                token_start,
                token_end,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SegmentedContext {
        context: context.to_owned(),
        sentences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TokenRecord;

    fn texts<'a>(ctx: &'a str, spans: &[Range<usize>]) -> Vec<&'a str> {
        spans.iter().map(|s| &ctx[s.clone()]).collect()
    }

    /// Trace over `context` whose tokens are the given byte spans, preceded by
    /// one instruction token.
    fn trace_with_spans(spans: &[Range<usize>]) -> AttentionTrace {
        let n = spans.len() + 1;
        let mut tokens = vec![TokenRecord::new("Q", None)];
        tokens.extend(spans.iter().map(|s| TokenRecord::new("t", Some(s.clone()))));
        AttentionTrace {
            id: "t".into(),
            model_id: "m".into(),
            layers: vec![vec![1.0 / n as f32; n]],
            context_tokens: 1..n,
            tokens,
            per_head: None,
        }
    }

    #[test]
    fn terminators_split() {
        let ctx = "A. B? C!";
        assert_eq!(texts(ctx, &split_sentences(ctx).unwrap()), ["A.", "B?", "C!"]);
    }

    #[test]
    fn abbreviation_stays_attached() {
        let ctx = "Dr. Smith arrived. He left.";
        assert_eq!(
            texts(ctx, &split_sentences(ctx).unwrap()),
            ["Dr. Smith arrived.", "He left."]
        );
    }

    #[test]
    fn unterminated_sentence_is_trimmed() {
        let ctx = "  no terminator here  ";
        assert_eq!(texts(ctx, &split_sentences(ctx).unwrap()), ["no terminator here"]);
    }

    #[test]
    fn whitespace_only_is_error() {
        assert_eq!(split_sentences(" \n\t "), Err(SegmentError::EmptyContext));
        assert_eq!(split_sentences(""), Err(SegmentError::EmptyContext));
    }

    #[test]
    fn newline_is_boundary_and_quotes_attach() {
        let ctx = "He said \"Stop.\" Then he left\nNew line here";
        assert_eq!(
            texts(ctx, &split_sentences(ctx).unwrap()),
            ["He said \"Stop.\"", "Then he left", "New line here"]
        );
    }

    #[test]
    fn lowercase_continuation_and_decimals_do_not_split() {
        let ctx = "Pi is 3.14 roughly. it continues. Next one.";
        assert_eq!(
            texts(ctx, &split_sentences(ctx).unwrap()),
            ["Pi is 3.14 roughly. it continues.", "Next one."]
        );
    }

    #[test]
    fn exact_tiling_alignment() {
        let ctx = "Aa bb. Cc dd.";
        let spans = split_sentences(ctx).unwrap();
        let trace = trace_with_spans(&[0..2, 2..6, 6..9, 9..13]);
        let seg = align_tokens(ctx, &spans, &trace).unwrap();
        assert_eq!(seg.sentences[0].tokens(), 1..3);
        assert_eq!(seg.sentences[1].tokens(), 3..5);
        assert_eq!(seg.n_context_tokens(), 4);
    }

    #[test]
    fn straddling_token_goes_to_midpoint_sentence() {
        // sentence 2 starts at byte 7; token 5..13 has midpoint 9
        let ctx = "Aa bb. Cc dd ee.";
        let spans = split_sentences(ctx).unwrap();
        assert_eq!(spans[1].start, 7);
        let trace = trace_with_spans(&[0..5, 5..13, 13..16]);
        let seg = align_tokens(ctx, &spans, &trace).unwrap();
        assert_eq!(seg.sentences[0].tokens(), 1..2);
        assert_eq!(seg.sentences[1].tokens(), 2..4);
    }

    #[test]
    fn empty_sentence_is_named() {
        let ctx = "Aa. Bb. Cc.";
        let spans = split_sentences(ctx).unwrap();
        let trace = trace_with_spans(&[0..3, 8..11]);
        assert_eq!(
            align_tokens(ctx, &spans, &trace),
            Err(SegmentError::EmptySentence { index: 1 })
        );
    }

    #[test]
    fn out_of_bounds_offset_is_error() {
        let ctx = "Aa.";
        let spans = split_sentences(ctx).unwrap();
        let trace = trace_with_spans(&[0..2, 2..9]);
        assert!(matches!(
            align_tokens(ctx, &spans, &trace),
            Err(SegmentError::OffsetOutOfBounds { token: 2, .. })
        ));
    }

    #[test]
    fn token_level_has_one_sentence_per_token() {
        let ctx = "Aa bb.";
        let trace = trace_with_spans(&[0..2, 2..5, 5..6]);
        let seg = SegmentedContext::token_level(ctx, &trace).unwrap();
        assert_eq!(seg.m(), 3);
        assert_eq!(seg.sentence_text(1), " bb");
    }
}
