//! A deterministic synthetic language model.
//!
//! Every sample has *planted* evidence sentences. Traces are random attention
//! rows in which the planted tokens receive a boost that ramps up with layer
//! depth, reaching `beta` times the context-average attention per token at
//! the last layer. Answers are gold only when every planted sentence is
//! wrapped in markers, so answer quality follows elicitation quality.

use std::collections::HashMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal};

use super::{Provider, ProviderError, ProviderRequest, ProviderResponse, RequestMode};
use crate::highlight::{marked_regions, Markers, REJECTION};
use crate::metrics::{derive_evidence_labels, LabelMode};
use crate::pipeline::QaSample;
use crate::segment::{split_sentences, SegmentedContext, Sentence};
use crate::trace::{AttentionTrace, TokenRecord};

/// Cap on the evidence share of context attention, so non-evidence tokens
/// always keep some mass.
const MAX_EVIDENCE_SHARE: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct MockWorld {
    pub seed: u64,
    /// Evidence attention per token relative to the context average at the
    /// last layer.
    pub beta: f64,
    pub n_layers: usize,
    /// Shape of the depth ramp `1 + (beta - 1) * depth^p`; 1 is linear.
    pub ramp_exponent: f64,
    /// Gamma shape of per-token noise; smaller is noisier.
    pub concentration: f64,
    /// Log-normal sigma of the per-sentence salience shared by all layers.
    pub salience_sigma: f64,
    /// Extra attention multiplier for marker-wrapped tokens.
    pub highlight_gain: f64,
    pub markers: Markers,
    /// Answer given when the planted evidence is not fully highlighted.
    pub distractor_answer: String,
    pub model_id: String,
}

impl Default for MockWorld {
    fn default() -> Self {
        Self {
            seed: 0,
            beta: 6.0,
            n_layers: 32,
            ramp_exponent: 3.0,
            concentration: 1.5,
            salience_sigma: 0.25,
            highlight_gain: 1.5,
            markers: Markers::default(),
            distractor_answer: "unknown".into(),
            model_id: "mock".into(),
        }
    }
}

impl MockWorld {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Boost target at layer `l`: 1 at the first layer, `beta` at the last.
    pub fn ramp(&self, l: usize) -> f64 {
        if self.n_layers <= 1 {
            return self.beta;
        }
        let depth = l as f64 / (self.n_layers - 1) as f64;
        1.0 + (self.beta - 1.0) * depth.powf(self.ramp_exponent)
    }
}

/// A sample with its planted-evidence bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct MockCase {
    pub sample: QaSample,
    /// Sentences of the original context; anything after is a distractor.
    pub n_base_sentences: usize,
}

impl MockCase {
    /// Treats every sentence of `sample` as original context.
    pub fn from_sample(sample: QaSample) -> Self {
        let n_base_sentences = split_sentences(&sample.context).map_or(0, |s| s.len());
        Self {
            sample,
            n_base_sentences,
        }
    }
}

#[derive(Debug, Clone)]
struct MockSentence {
    text: String,
    plant: bool,
    distractor: bool,
    salience: f64,
}

#[derive(Debug, Clone)]
struct Entry {
    answerable: bool,
    answer: Option<String>,
    sentences: Vec<MockSentence>,
}

/// Plant labels: annotated evidence when present, else answer containment.
fn plant_labels(sample: &QaSample, spans: &[Range<usize>]) -> Vec<bool> {
    if !sample.answerable {
        return vec![false; spans.len()];
    }
    // labels only look at sentence text, so token indices are placeholders
    let seg = SegmentedContext {
        context: sample.context.clone(),
        sentences: spans
            .iter()
            .enumerate()
            .map(|(i, s)| Sentence {
                chars: s.clone(),
                token_start: i,
                token_end: i,
            })
            .collect(),
    };
    let mode = match &sample.evidence_sentences {
        Some(e) if !e.is_empty() => LabelMode::Annotated,
        _ => LabelMode::AnswerContainment,
    };
    derive_evidence_labels(sample, &seg, mode)
        .map(|l| l.labels)
        .unwrap_or_else(|_| vec![false; spans.len()])
}

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        // separator so ("ab","c") and ("a","bc") differ
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn rng_for(seed: u64, parts: &[&[u8]]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(parts))
}

/// Whitespace-delimited words of `text` as byte ranges.
fn words(text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push(s..i);
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(s..text.len());
    }
    out
}

fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

/// Serves trace, answer and evidence requests for a fixed set of samples.
#[derive(Debug, Clone)]
pub struct MockProvider {
    world: MockWorld,
    entries: HashMap<String, Entry>,
}

impl MockProvider {
    pub fn new(world: MockWorld, cases: &[MockCase]) -> Self {
        let salience = LogNormal::new(0.0, world.salience_sigma.max(0.0)).expect("finite sigma");
        let entries = cases
            .iter()
            .map(|case| {
                let s = &case.sample;
                let spans = split_sentences(&s.context).unwrap_or_default();
                let plants = plant_labels(s, &spans);
                let sentences = spans
                    .iter()
                    .zip(plants)
                    .enumerate()
                    .map(|(i, (span, plant))| {
                        let text = s.context[span.clone()].to_owned();
                        let mut rng = rng_for(world.seed, &[b"salience", s.id.as_bytes(), text.as_bytes()]);
                        MockSentence {
                            salience: salience.sample(&mut rng),
                            text,
                            plant,
                            distractor: i >= case.n_base_sentences,
                        }
                    })
                    .collect();
                let entry = Entry {
                    answerable: s.answerable,
                    answer: s.answers.first().cloned(),
                    sentences,
                };
                (s.id.clone(), entry)
            })
            .collect();
        Self { world, entries }
    }

    pub fn from_samples(world: MockWorld, samples: &[QaSample]) -> Self {
        let cases: Vec<MockCase> = samples.iter().cloned().map(MockCase::from_sample).collect();
        Self::new(world, &cases)
    }

    pub fn world(&self) -> &MockWorld {
        &self.world
    }

    fn entry(&self, id: &str) -> Result<&Entry, ProviderError> {
        self.entries
            .get(id)
            .ok_or_else(|| ProviderError::UnknownSample(id.to_owned()))
    }

    fn context<'a>(&self, req: &'a ProviderRequest) -> Result<&'a str, ProviderError> {
        req.prompt
            .get(req.context.clone())
            .ok_or_else(|| ProviderError::Protocol(format!("context range {:?} outside prompt", req.context)))
    }

    /// Generates the attention trace for `req`.
    pub fn mock_trace(&self, req: &ProviderRequest) -> Result<AttentionTrace, ProviderError> {
        let entry = self.entry(&req.sample_id)?;
        let ctx = self.context(req)?;
        let (cs, ce) = (req.context.start, req.context.end);
        let w = &self.world;

        let spans = words(&req.prompt);
        let in_ctx = |r: &Range<usize>| 2 * cs <= r.start + r.end && r.start + r.end < 2 * ce;
        let first = spans.iter().position(in_ctx);
        let count = spans.iter().filter(|r| in_ctx(r)).count();
        let Some(first) = first else {
            return Err(ProviderError::Protocol("prompt context holds no tokens".into()));
        };
        let context_tokens = first..first + count;

        let tokens: Vec<TokenRecord> = spans
            .iter()
            .enumerate()
            .map(|(j, r)| {
                let span = context_tokens
                    .contains(&j)
                    .then(|| r.start.max(cs) - cs..r.end.min(ce) - cs);
                TokenRecord::new(&req.prompt[r.clone()], span)
            })
            .collect();

        // per-token attributes from the sentences they overlap
        let n = spans.len();
        let mut salience = vec![1.0f64; n];
        let mut plant = vec![false; n];
        let mut distractor = vec![false; n];
        let ctx_spans: Vec<Range<usize>> = tokens[context_tokens.clone()]
            .iter()
            .map(|t| t.span.clone().expect("context token has a span"))
            .collect();
        for s in &entry.sentences {
            for (at, _) in ctx.match_indices(s.text.as_str()) {
                let hit = at..at + s.text.len();
                for (k, span) in ctx_spans.iter().enumerate() {
                    if overlaps(span, &hit) {
                        let j = first + k;
                        salience[j] = s.salience;
                        plant[j] |= s.plant;
                        distractor[j] |= s.distractor;
                    }
                }
            }
        }
        let regions = marked_regions(ctx, &w.markers);
        let highlighted: Vec<bool> = (0..n)
            .map(|j| {
                context_tokens.contains(&j) && regions.iter().any(|r| overlaps(&ctx_spans[j - first], r))
            })
            .collect();

        let n_plant = context_tokens.clone().filter(|&j| plant[j]).count();
        let n_base = context_tokens.clone().filter(|&j| !distractor[j]).count();
        let f_base = n_plant as f64 / n_base.max(1) as f64;
        let f_ctx = n_plant as f64 / count as f64;

        let gamma = Gamma::new(w.concentration, 1.0)
            .map_err(|e| ProviderError::Remote(format!("bad noise concentration: {e}")))?;
        let mut rng = rng_for(w.seed, &[req.sample_id.as_bytes(), req.prompt.as_bytes()]);
        let mut layers = Vec::with_capacity(w.n_layers);
        for l in 0..w.n_layers {
            let mut row: Vec<f64> = (0..n).map(|j| gamma.sample(&mut rng) * salience[j]).collect();
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|a| *a /= total);

            let c: f64 = row[context_tokens.clone()].iter().sum();
            let e: f64 = context_tokens.clone().filter(|&j| plant[j]).map(|j| row[j]).sum();
            if n_plant > 0 && n_plant < count && e > 0.0 && c > e {
                let share = (w.ramp(l) * f_base * (e / c) / f_ctx).min(MAX_EVIDENCE_SHARE);
                let (ke, kn) = (share * c / e, (1.0 - share) * c / (c - e));
                for j in context_tokens.clone() {
                    row[j] *= if plant[j] { ke } else { kn };
                }
            }
            if w.highlight_gain != 1.0 && highlighted.iter().any(|&h| h) {
                for j in 0..n {
                    if highlighted[j] {
                        row[j] *= w.highlight_gain;
                    }
                }
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|a| *a /= total);
            }
            layers.push(row.into_iter().map(|a| a as f32).collect());
        }

        Ok(AttentionTrace {
            id: req.sample_id.clone(),
            model_id: w.model_id.clone(),
            layers,
            context_tokens,
            tokens,
            per_head: None,
        })
    }

    /// Gold answer iff every planted sentence lies inside a marked region.
    /// Unanswerable samples are rejected iff nothing is marked.
    pub fn mock_answer(&self, req: &ProviderRequest) -> Result<String, ProviderError> {
        let entry = self.entry(&req.sample_id)?;
        let ctx = self.context(req)?;
        let regions = marked_regions(ctx, &self.world.markers);
        if !entry.answerable {
            return Ok(if regions.is_empty() {
                REJECTION.to_owned()
            } else {
                self.world.distractor_answer.clone()
            });
        }
        let mut plants = entry.sentences.iter().filter(|s| s.plant).peekable();
        let covered = plants.peek().is_some()
            && plants.all(|s| {
                ctx.match_indices(s.text.as_str()).any(|(at, _)| {
                    regions
                        .iter()
                        .any(|r| r.start <= at && at + s.text.len() <= r.end)
                })
            });
        Ok(match (&entry.answer, covered) {
            (Some(a), true) => a.clone(),
            _ => self.world.distractor_answer.clone(),
        })
    }

    /// The planted sentences, verbatim.
    pub fn mock_evidence(&self, req: &ProviderRequest) -> Result<Vec<String>, ProviderError> {
        let entry = self.entry(&req.sample_id)?;
        Ok(entry
            .sentences
            .iter()
            .filter(|s| s.plant)
            .map(|s| s.text.clone())
            .collect())
    }
}

impl Provider for MockProvider {
    fn call(&self, req: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        match req.mode {
            RequestMode::TraceOnly => self.mock_trace(req).map(ProviderResponse::Trace),
            RequestMode::Answer => self.mock_answer(req).map(ProviderResponse::Answer),
            RequestMode::ExtractEvidence => self.mock_evidence(req).map(ProviderResponse::Evidence),
        }
    }
}

/// Shape of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_samples: usize,
    /// Inclusive range of sentences per context.
    pub sentences: (usize, usize),
    /// Inclusive range of words per sentence.
    pub words: (usize, usize),
    /// Inclusive range of planted evidence sentences.
    pub plants: (usize, usize),
    pub unanswerable_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 200,
            sentences: (14, 18),
            words: (8, 20),
            plants: (1, 2),
            unanswerable_fraction: 0.0,
        }
    }
}

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ren", "tu", "sa", "vel", "dor", "ni", "pe", "zo", "fi", "ba", "tem", "ros",
    "gal", "hu", "bi", "ke", "lun", "sor", "da", "wi", "qui", "fen", "ta", "ri", "mo", "ve", "xu",
];

fn pseudo_word(rng: &mut impl Rng) -> String {
    let n = rng.gen_range(2..=3);
    (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect()
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

fn filler_sentence(rng: &mut impl Rng, words: (usize, usize)) -> String {
    let n = rng.gen_range(words.0..=words.1).max(2);
    let body: Vec<String> = (0..n).map(|_| pseudo_word(rng)).collect();
    format!("{} {}.", capitalize(&body[0]), body[1..].join(" "))
}

/// Synthetic samples with known planted evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct MockDataset {
    pub cases: Vec<MockCase>,
    seed: u64,
    words: (usize, usize),
}

impl MockDataset {
    pub fn synthesize(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let cases = (0..cfg.n_samples)
            .map(|k| {
                let id = format!("mock-{k:05}");
                let m = rng.gen_range(cfg.sentences.0..=cfg.sentences.1).max(1);
                let answerable = !rng.gen_bool(cfg.unanswerable_fraction.clamp(0.0, 1.0));
                let mut sentences: Vec<String> =
                    (0..m).map(|_| filler_sentence(&mut rng, cfg.words)).collect();

                let entity = capitalize(&pseudo_word(&mut rng));
                let answer = format!("{}{}", capitalize(&pseudo_word(&mut rng)), rng.gen_range(10..100));
                let question = format!("Which key does {entity} keep?");
                let (answers, evidence) = if answerable {
                    let n_plants = rng.gen_range(cfg.plants.0..=cfg.plants.1).clamp(1, m);
                    let mut slots: Vec<usize> = (0..m).collect();
                    slots.shuffle(&mut rng);
                    let mut slots = slots[..n_plants].to_vec();
                    slots.sort_unstable();
                    let place = capitalize(&pseudo_word(&mut rng));
                    let mut evidence = Vec::with_capacity(n_plants);
                    for (p, &slot) in slots.iter().enumerate() {
                        let head = if p == 0 {
                            format!("{entity} keeps the key {answer} in {place} and")
                        } else {
                            format!("{place} is where {entity} hides things and")
                        };
                        // same length distribution as filler, so length alone
                        // carries no signal
                        let target = rng.gen_range(cfg.words.0..=cfg.words.1);
                        let n_tail = target.saturating_sub(head.split_whitespace().count()).max(2);
                        let tail: Vec<String> = (0..n_tail).map(|_| pseudo_word(&mut rng)).collect();
                        sentences[slot] = format!("{head} {}.", tail.join(" "));
                        evidence.push(sentences[slot].clone());
                    }
                    (vec![answer], Some(evidence))
                } else {
                    (vec![REJECTION.to_owned()], None)
                };
                MockCase {
                    sample: QaSample {
                        id,
                        context: sentences.join(" "),
                        question,
                        answers,
                        evidence_sentences: evidence,
                        answerable,
                    },
                    n_base_sentences: m,
                }
            })
            .collect();
        Self {
            cases,
            seed: cfg.seed,
            words: cfg.words,
        }
    }

    /// Appends `factor` times each context's sentence count in distractor
    /// sentences, so the context grows to `factor + 1` times its length.
    pub fn with_distractors(&self, factor: usize) -> Self {
        let cases = self
            .cases
            .iter()
            .map(|case| {
                let mut rng = rng_for(self.seed, &[b"distractors", case.sample.id.as_bytes()]);
                let extra: Vec<String> = (0..factor * case.n_base_sentences)
                    .map(|_| filler_sentence(&mut rng, self.words))
                    .collect();
                let mut sample = case.sample.clone();
                if !extra.is_empty() {
                    sample.context = format!("{} {}", sample.context, extra.join(" "));
                }
                MockCase {
                    sample,
                    n_base_sentences: case.n_base_sentences,
                }
            })
            .collect();
        Self {
            cases,
            seed: self.seed,
            words: self.words,
        }
    }

    pub fn samples(&self) -> Vec<QaSample> {
        self.cases.iter().map(|c| c.sample.clone()).collect()
    }

    pub fn provider(&self, world: MockWorld) -> MockProvider {
        MockProvider::new(world, &self.cases)
    }
}
