#![allow(dead_code)]

use rand::Rng;
use selfelicit::segment::{Sentence, SegmentedContext};
use selfelicit::trace::{AttentionTrace, TokenRecord};

/// A random trace whose context is `m` sentences of random token lengths,
/// with a few non-context tokens on either side, plus the matching
/// segmentation.
pub fn random_case(rng: &mut impl Rng) -> (AttentionTrace, SegmentedContext) {
    let n_layers = rng.gen_range(1..=12);
    let prefix = rng.gen_range(0..=5);
    let suffix = rng.gen_range(0..=4);
    let m = rng.gen_range(1..=8);
    let lengths: Vec<usize> = (0..m).map(|_| rng.gen_range(1..=6)).collect();
    let n_ctx: usize = lengths.iter().sum();
    let n = prefix + n_ctx + suffix;

    let mut context = String::new();
    let mut tokens: Vec<TokenRecord> = (0..prefix).map(|_| TokenRecord::new("p", None)).collect();
    let mut sentences = Vec::new();
    let mut j = prefix;
    for (i, &len) in lengths.iter().enumerate() {
        if i > 0 {
            context.push(' ');
        }
        let start = context.len();
        for k in 0..len {
            if k > 0 {
                context.push(' ');
            }
            let at = context.len();
            context.push_str("ab");
            tokens.push(TokenRecord::new("ab", Some(at..at + 2)));
        }
        sentences.push(Sentence {
            chars: start..context.len(),
            token_start: j,
            token_end: j + len - 1,
        });
        j += len;
    }
    tokens.extend((0..suffix).map(|_| TokenRecord::new("s", None)));

    let layers = (0..n_layers).map(|_| random_row(rng, n)).collect();
    let trace = AttentionTrace {
        id: "r".into(),
        model_id: "random".into(),
        layers,
        context_tokens: prefix..prefix + n_ctx,
        tokens,
        per_head: None,
    };
    (trace, SegmentedContext { context, sentences })
}

pub fn random_row(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|a| (a / total) as f32).collect()
}

/// Non-empty random subset of `0..n`, ascending.
pub fn random_layers(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    loop {
        let set: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.5)).collect();
        if !set.is_empty() {
            return set;
        }
    }
}

/// Sentence attention by explicit token loop.
pub fn oracle_sentence_attention(trace: &AttentionTrace, seg: &SegmentedContext, layer: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for s in &seg.sentences {
        let mut sum = 0.0;
        let mut count = 0;
        let mut j = s.token_start;
        while j <= s.token_end {
            sum += trace.layers[layer][j] as f64;
            count += 1;
            j += 1;
        }
        out.push(sum / count as f64);
    }
    out
}

/// Evidence scores by explicit layer and token loops.
pub fn oracle_evidence_scores(trace: &AttentionTrace, seg: &SegmentedContext, layers: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; seg.sentences.len()];
    for (i, s) in seg.sentences.iter().enumerate() {
        let mut total = 0.0;
        for &l in layers {
            let mut sum = 0.0;
            for j in s.token_start..=s.token_end {
                sum += trace.layers[l][j] as f64;
            }
            total += sum / (s.token_end - s.token_start + 1) as f64;
        }
        out[i] = total / layers.len() as f64;
    }
    out
}

/// AUROC by comparing every positive with every negative.
pub fn oracle_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (k, &lk) in labels.iter().enumerate() {
            if lk {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[k] {
                wins += 1.0;
            } else if scores[i] == scores[k] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// NDCG@all written out from its definition: sort by score descending
/// (index order on ties), sum 1/log2(rank + 1) over positives, divide by the
/// same sum with all positives first.
pub fn oracle_ndcg(scores: &[f64], labels: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // insertion sort keeps the index tie-break explicit
    for a in 1..order.len() {
        let mut b = a;
        while b > 0 && scores[order[b]] > scores[order[b - 1]] {
            order.swap(b, b - 1);
            b -= 1;
        }
    }
    let mut dcg = 0.0;
    for (rank0, &i) in order.iter().enumerate() {
        if labels[i] {
            dcg += 1.0 / ((rank0 + 2) as f64).log2();
        }
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let mut ideal = 0.0;
    for rank0 in 0..positives {
        ideal += 1.0 / ((rank0 + 2) as f64).log2();
    }
    dcg / ideal
}
