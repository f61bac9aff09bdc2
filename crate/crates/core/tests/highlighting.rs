use proptest::prelude::*;
use proptest::strategy::Strategy as _;
use selfelicit::highlight::{
    apply_highlight, build_prompt, highlight_mapped, marked_regions, match_extracted_evidence, parse_extracted_evidence,
    strip_markers, HighlightPlan, Markers, PromptKind, Strategy,
};
use selfelicit::segment::split_sentences;
use selfelicit::SegmentedContext;

fn by_words(text: &str) -> SegmentedContext {
    SegmentedContext::by_words(text).unwrap()
}

fn plan(strategy: Strategy, selected: &[usize]) -> HighlightPlan {
    HighlightPlan {
        strategy,
        selected: selected.to_vec(),
        markers: Markers::default(),
    }
}

fn home_monthly() -> SegmentedContext {
    by_words(include_str!("fixtures/home_monthly.txt").trim_end())
}

#[test]
fn prompt_templates_match_golden_files() {
    let ctx = "Home Monthly was a monthly women's magazine.";
    let q = "Which magazine came first?";
    let m = Markers::default();
    for (kind, golden) in [
        (PromptKind::Qa, include_str!("fixtures/templates/qa.txt")),
        (PromptKind::Seqa, include_str!("fixtures/templates/seqa.txt")),
        (PromptKind::Cot, include_str!("fixtures/templates/cot.txt")),
        (PromptKind::PromptElicit, include_str!("fixtures/templates/prompt_elicit.txt")),
    ] {
        let p = build_prompt(kind, ctx, q, &m).unwrap();
        assert_eq!(p.text, golden, "{kind:?}");
        assert_eq!(&p.text[p.context.clone()], ctx);
    }
}

#[test]
fn seqa_instruction_names_custom_markers() {
    let m = Markers::new("[[", "]]").unwrap();
    let p = build_prompt(PromptKind::Seqa, "A.", "Q?", &m).unwrap();
    assert!(p.text.contains("[[ and ]] are used to mark"));
}

#[test]
fn home_monthly_evidence_is_wrapped_exactly() {
    let seg = home_monthly();
    assert_eq!(seg.m(), 11);
    let out = apply_highlight(&seg, &plan(Strategy::InContext, &[0, 2])).unwrap();
    let m = Markers::default();
    let inner: Vec<&str> = marked_regions(&out, &m).into_iter().map(|r| &out[r]).collect();
    assert_eq!(
        inner,
        [
            "Home Monthly was a monthly women's magazine published in Pittsburgh, Pennsylvania in the late 19th century.",
            "It was first published in \"Home Monthly\" in December 1896.",
        ]
    );
    assert!(out.starts_with("<start_important>Home Monthly was"));
    assert!(out.contains("Willa Cather. <start_important>It was first published in \"Home Monthly\" in December 1896.<end_important> The Count"));
    assert_eq!(strip_markers(&out, &m, Strategy::InContext).unwrap(), seg.context);
}

#[test]
fn home_monthly_three_sentence_highlight() {
    let seg = home_monthly();
    let out = apply_highlight(&seg, &plan(Strategy::InContext, &[0, 2, 5])).unwrap();
    let m = Markers::default();
    assert_eq!(m.count_pairs(&out), 3);
    let third = &out[marked_regions(&out, &m)[2].clone()];
    assert_eq!(third, "Mirabella was a women's magazine published from June 1989 to April 2000.");
}

#[test]
fn single_sentence_rule() {
    let out = apply_highlight(&by_words("A. B."), &plan(Strategy::InContext, &[0])).unwrap();
    assert_eq!(out, "<start_important>A.<end_important> B.");
}

#[test]
fn strategies_on_a_small_context() {
    let seg = by_words("One. Two. Three.");
    let get = |s, sel: &[usize]| apply_highlight(&seg, &plan(s, sel)).unwrap();
    assert_eq!(get(Strategy::Prepend, &[0, 2]), "<start_important>One.<end_important> <start_important>Three.<end_important> One. Two. Three.");
    assert_eq!(get(Strategy::Append, &[1]), "One. Two. Three. <start_important>Two.<end_important>");
    assert_eq!(get(Strategy::Filter, &[2, 0]), "One. Three.");
    assert_eq!(get(Strategy::Full, &[]), "<start_important>One. Two. Three.<end_important>");
    assert!(apply_highlight(&seg, &plan(Strategy::Filter, &[])).is_err());
    assert!(apply_highlight(&seg, &plan(Strategy::InContext, &[3])).is_err());
}

#[test]
fn marker_collision_is_rejected() {
    let seg = by_words("Says <start_important> here. Fine.");
    assert!(apply_highlight(&seg, &plan(Strategy::InContext, &[1])).is_err());
}

#[test]
fn strip_errors() {
    let m = Markers::default();
    assert_eq!(strip_markers("plain text", &m, Strategy::InContext).unwrap(), "plain text");
    assert!(strip_markers("a <start_important>b", &m, Strategy::InContext).is_err());
    assert!(strip_markers("a <end_important>b", &m, Strategy::InContext).is_err());
    assert!(strip_markers("x", &m, Strategy::Filter).is_err());
}

#[test]
fn extracted_snippets_match_sentences() {
    let seg = home_monthly();
    let output = "- It was first published in \"Home Monthly\" in December 1896.\n- Mirabella was a women's magazine published from June 1989 to April 2000.\n- Not in the text at all.";
    let snippets = parse_extracted_evidence(output);
    assert_eq!(snippets.len(), 3);
    let found = match_extracted_evidence(&seg, &snippets);
    assert_eq!(found.selected, vec![2, 5]);
    assert_eq!(found.unmatched, vec!["Not in the text at all.".to_owned()]);
}

fn context_strategy() -> impl proptest::strategy::Strategy<Value = String> {
    let word = prop::sample::select(vec!["café", "b", "the", "Mr.", "ok", "7", "naïve", "end"]);
    let end = prop::sample::select(vec![". ", "? ", "! ", "\n", ".  "]);
    prop::collection::vec((prop::collection::vec(word, 1..5), end), 1..8)
        .prop_map(|s| s.into_iter().map(|(w, e)| format!("{}{e}", w.join(" "))).collect::<String>())
        .prop_filter("non-blank", |s| !s.trim().is_empty())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn strip_inverts_highlight(context in context_strategy(), mask in any::<u32>(), which in 0usize..4) {
        let seg = by_words(&context);
        let selected: Vec<usize> = (0..seg.m()).filter(|i| mask >> (i % 32) & 1 == 1).collect();
        let strategy = [Strategy::InContext, Strategy::Prepend, Strategy::Append, Strategy::Full][which];
        let out = apply_highlight(&seg, &plan(strategy, &selected)).unwrap();
        prop_assert_eq!(strip_markers(&out, &Markers::default(), strategy).unwrap(), context);
    }

    #[test]
    fn in_context_spans_point_at_original_sentences(context in context_strategy(), mask in any::<u32>()) {
        let seg = by_words(&context);
        let selected: Vec<usize> = (0..seg.m()).filter(|i| mask >> (i % 32) & 1 == 1).collect();
        let h = highlight_mapped(&seg, &plan(Strategy::InContext, &selected)).unwrap();
        let m = Markers::default();
        prop_assert_eq!(m.count_pairs(&h.text), selected.len());
        for (i, span) in h.sentence_spans.iter().enumerate() {
            let span = span.clone().unwrap();
            prop_assert_eq!(&h.text[span.clone()], seg.sentence_text(i));
            let wrapped = h.text[..span.start].ends_with(&m.open) && h.text[span.end..].starts_with(&m.close);
            prop_assert_eq!(wrapped, selected.contains(&i));
        }
    }

    #[test]
    fn filter_keeps_only_selected(context in context_strategy(), mask in 1u32..) {
        let seg = by_words(&context);
        let selected: Vec<usize> = (0..seg.m()).filter(|i| mask >> (i % 32) & 1 == 1).collect();
        prop_assume!(!selected.is_empty());
        let out = apply_highlight(&seg, &plan(Strategy::Filter, &selected)).unwrap();
        let expected: Vec<&str> = selected.iter().map(|&i| seg.sentence_text(i)).collect();
        prop_assert_eq!(out, expected.join(" "));
    }

    #[test]
    fn splitting_the_filtered_text_keeps_sentence_count(context in context_strategy()) {
        let seg = by_words(&context);
        let all: Vec<usize> = (0..seg.m()).collect();
        let out = apply_highlight(&seg, &plan(Strategy::Filter, &all)).unwrap();
        prop_assert!(split_sentences(&out).unwrap().len() <= seg.m());
    }
}
