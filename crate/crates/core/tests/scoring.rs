mod common;

use common::{oracle_auroc, oracle_evidence_scores, oracle_ndcg, oracle_sentence_attention, random_case, random_layers};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use selfelicit::metrics::{auroc, elicit_ratio, ndcg_all};
use selfelicit::scorer::{
    elicit, evidence_scores, relative_apt, section_apt, select_layers, sentence_attention, threshold_select, token_scores,
};
use selfelicit::{Granularity, LayerSpan, SegmentedContext};

const TOL: f64 = 1e-12;

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= TOL)
}

fn span_strategy() -> impl Strategy<Value = LayerSpan> {
    (0u32..100, 1u32..=100).prop_filter_map("non-empty span", |(a, b)| {
        let (lo, hi) = (a as f64 / 100.0, b as f64 / 100.0);
        LayerSpan::new(lo, hi).ok()
    })
}

/// Layers ℓ with lo ≤ ℓ/L < hi, found by scanning every layer with exact
/// rational comparison.
fn oracle_layers(n_layers: usize, lo_pct: u32, hi_pct: u32) -> Vec<usize> {
    (0..n_layers)
        .filter(|&l| {
            // floor(lo*L) <= l  <=>  lo*L < l+1 ;  l < floor(hi*L)  <=>  l+1 <= hi*L
            let l100 = 100 * l as u64;
            let lo_ok = (lo_pct as u64) * (n_layers as u64) < l100 + 100;
            let hi_ok = l100 + 100 <= (hi_pct as u64) * (n_layers as u64);
            lo_ok && hi_ok
        })
        .collect()
}

proptest! {
    #[test]
    fn sentence_attention_matches_token_loop(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (trace, seg) = random_case(&mut rng);
        for l in 0..trace.n_layers() {
            let got = sentence_attention(&trace, &seg, l).unwrap();
            prop_assert!(close(&got, &oracle_sentence_attention(&trace, &seg, l)));
        }
    }

    #[test]
    fn evidence_scores_match_layer_loop(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (trace, seg) = random_case(&mut rng);
        let layers = random_layers(&mut rng, trace.n_layers());
        let got = evidence_scores(&trace, &seg, &layers).unwrap();
        prop_assert!(close(&got, &oracle_evidence_scores(&trace, &seg, &layers)));
    }

    #[test]
    fn evidence_scores_are_means_of_token_scores(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (trace, seg) = random_case(&mut rng);
        let layers = random_layers(&mut rng, trace.n_layers());
        let tokens = token_scores(&trace, &layers).unwrap();
        let c0 = trace.context_tokens.start;
        let composed: Vec<f64> = seg
            .sentences
            .iter()
            .map(|s| {
                let t = &tokens[s.token_start - c0..=s.token_end - c0];
                t.iter().sum::<f64>() / t.len() as f64
            })
            .collect();
        let direct = evidence_scores(&trace, &seg, &layers).unwrap();
        prop_assert!(direct.iter().zip(&composed).all(|(a, b)| (a - b).abs() <= 1e-9));
    }

    #[test]
    fn layer_selection_matches_scan(n_layers in 1usize..80, a in 0u32..100, b in 1u32..=100) {
        prop_assume!(a < b);
        let span = LayerSpan::new(a as f64 / 100.0, b as f64 / 100.0).unwrap();
        let expected = oracle_layers(n_layers, a, b);
        match select_layers(n_layers, span) {
            Ok(got) => prop_assert_eq!(got, expected),
            Err(_) => prop_assert!(expected.is_empty()),
        }
    }

    #[test]
    fn selection_is_the_threshold_set(scores in prop::collection::vec(0.0f64..1.0, 1..30), alpha in 0.0f64..=1.0) {
        let sel = threshold_select(&scores, alpha).unwrap();
        let max = scores.iter().copied().fold(0.0, f64::max);
        let expected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= alpha * max).collect();
        prop_assert_eq!(&sel.indices, &expected);
        prop_assert!(!sel.indices.is_empty());
        prop_assert_eq!(sel.degenerate, max == 0.0);
    }

    #[test]
    fn selection_shrinks_as_alpha_grows(scores in prop::collection::vec(0.0f64..1.0, 1..30), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let big = threshold_select(&scores, lo).unwrap().indices;
        let small = threshold_select(&scores, hi).unwrap().indices;
        prop_assert!(small.iter().all(|i| big.contains(i)));
    }

    #[test]
    fn elicit_agrees_with_its_parts(seed in any::<u64>(), span in span_strategy(), alpha in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (trace, seg) = random_case(&mut rng);
        let Ok(layers) = select_layers(trace.n_layers(), span) else {
            prop_assert!(elicit(&trace, &seg, span, alpha, Granularity::Sentence).is_err());
            return Ok(());
        };
        let out = elicit(&trace, &seg, span, alpha, Granularity::Sentence).unwrap();
        let e = oracle_evidence_scores(&trace, &seg, &layers);
        prop_assert!(close(&out.scores, &e));
        let max = e.iter().copied().fold(0.0, f64::max);
        let expected: Vec<usize> = (0..e.len()).filter(|&i| out.scores[i] >= alpha * max).collect();
        prop_assert_eq!(out.selected, expected);
        prop_assert_eq!(out.layers, layers);
    }

    #[test]
    fn relative_apt_matches_direct_formula(seed in any::<u64>(), mask in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (trace, seg) = random_case(&mut rng);
        let labels: Vec<bool> = (0..seg.m()).map(|i| mask >> (i % 64) & 1 == 1).collect();
        let two_class = labels.iter().any(|&l| l) && labels.iter().any(|&l| !l);
        for l in 0..trace.n_layers() {
            let got = relative_apt(&trace, &seg, &labels, l);
            if !two_class {
                prop_assert!(got.is_err());
                continue;
            }
            let (ev, non) = got.unwrap();
            let tokens_of = |want: bool| -> Vec<usize> {
                seg.sentences
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &lab)| lab == want)
                    .flat_map(|(s, _)| s.token_start..=s.token_end)
                    .collect()
            };
            let all: Vec<usize> = trace.context_tokens.clone().collect();
            let ctx = section_apt(&trace, &all, &[l]);
            prop_assert!((ev - section_apt(&trace, &tokens_of(true), &[l]) / ctx).abs() < 1e-9);
            prop_assert!((non - section_apt(&trace, &tokens_of(false), &[l]) / ctx).abs() < 1e-9);
        }
    }

    #[test]
    fn auroc_matches_pairwise_count(
        pairs in prop::collection::vec((0u8..6, any::<bool>()), 2..40)
    ) {
        // small score alphabet forces ties
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 5.0).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let two_class = labels.iter().any(|&l| l) && labels.iter().any(|&l| !l);
        match auroc(&scores, &labels) {
            Ok(v) => {
                prop_assert!(two_class);
                prop_assert!((v - oracle_auroc(&scores, &labels)).abs() < 1e-12);
            }
            Err(_) => prop_assert!(!two_class),
        }
    }

    #[test]
    fn ndcg_matches_definition(
        pairs in prop::collection::vec((0u8..6, any::<bool>()), 1..40)
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        match ndcg_all(&scores, &labels) {
            Ok(v) => {
                prop_assert!((v - oracle_ndcg(&scores, &labels)).abs() < 1e-12);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
            Err(_) => prop_assert!(labels.iter().all(|&l| !l)),
        }
    }

    #[test]
    fn elicit_ratio_counts_selected_tokens(seed in any::<u64>(), mask in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, seg) = random_case(&mut rng);
        let selected: Vec<usize> = (0..seg.m()).filter(|i| mask >> i & 1 == 1).collect();
        let inside: usize = selected.iter().map(|&i| seg.sentences[i].token_end - seg.sentences[i].token_start + 1).sum();
        let total: usize = seg.sentences.iter().map(|s| s.token_end - s.token_start + 1).sum();
        prop_assert!((elicit_ratio(&seg, &selected) - inside as f64 / total as f64).abs() < 1e-12);
    }
}

#[test]
fn all_zero_scores_select_everything() {
    let sel = threshold_select(&[0.0, 0.0, 0.0], 0.5).unwrap();
    assert_eq!(sel.indices, vec![0, 1, 2]);
    assert!(sel.degenerate);
}

#[test]
fn ties_at_the_threshold_are_kept() {
    let sel = threshold_select(&[0.2, 0.4, 0.1, 0.2], 0.5).unwrap();
    assert_eq!(sel.indices, vec![0, 1, 3]);
}

#[test]
fn deep_half_of_32_layers() {
    assert_eq!(select_layers(32, LayerSpan::DEEP_HALF).unwrap(), (16..32).collect::<Vec<_>>());
    assert_eq!(select_layers(32, LayerSpan::new(0.0, 0.25).unwrap()).unwrap(), (0..8).collect::<Vec<_>>());
    // floor(0.29 * 100) must be 29
    assert_eq!(select_layers(100, LayerSpan::new(0.29, 0.3).unwrap()).unwrap(), vec![29]);
    assert!(select_layers(3, LayerSpan::new(0.1, 0.2).unwrap()).is_err());
}

#[test]
fn token_granularity_scores_every_context_token() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (trace, _) = random_case(&mut rng);
    let seg = SegmentedContext {
        context: String::new(),
        sentences: Vec::new(),
    };
    let out = elicit(&trace, &seg, LayerSpan::ALL, 0.0, Granularity::Token).unwrap();
    assert_eq!(out.scores.len(), trace.n_context_tokens());
    assert_eq!(out.selected.len(), trace.n_context_tokens());
}
