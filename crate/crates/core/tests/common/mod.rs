#![allow(dead_code)]

use annotator::corpus::{extract_entities, parse_conll, Sentence, TagScheme};
use annotator::promptkit::{render_prompt, serialize_example, ContextExample, PromptMode};

pub const PROMPT_CONLL: &str = include_str!("../fixtures/prompt_conll.txt");
pub const PROMPT_WNUT: &str = include_str!("../fixtures/prompt_wnut.txt");
pub const GOLDEN_BASELINE_CONLL: &str = include_str!("../golden/baseline_conll.txt");
pub const GOLDEN_RAG_CONLL: &str = include_str!("../golden/rag_conll.txt");
pub const GOLDEN_ICL_WNUT: &str = include_str!("../golden/icl_wnut.txt");

pub fn labels(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

pub fn conll_labels() -> Vec<String> {
    labels(&["PER", "ORG", "LOC", "MISC"])
}

pub fn wnut_labels() -> Vec<String> {
    labels(&["corporation", "creative-work", "group", "location", "person", "product"])
}

/// Context examples from every sentence but the last; the last is the input.
fn split_fixture(raw: &str) -> (Vec<ContextExample>, Sentence) {
    let mut sentences = parse_conll(raw, 1, TagScheme::Bio).expect("fixture parses");
    let input = sentences.pop().expect("fixture has an input sentence");
    let context = sentences
        .iter()
        .map(|s| ContextExample {
            sentence_id: s.id,
            text: serialize_example(s, &extract_entities(s)),
        })
        .collect();
    (context, input)
}

/// (name, rendered, golden) for every pinned prompt.
pub fn golden_pairs() -> Vec<(&'static str, String, &'static str)> {
    let (conll_ctx, conll_input) = split_fixture(PROMPT_CONLL);
    let (wnut_ctx, wnut_input) = split_fixture(PROMPT_WNUT);
    let render = |mode, labels: &[String], ctx: &[ContextExample], input: &Sentence| {
        render_prompt(mode, labels, ctx, input.id, &input.text())
            .expect("prompt renders")
            .text
    };
    vec![
        (
            "baseline_conll",
            render(PromptMode::Baseline, &conll_labels(), &[], &conll_input),
            GOLDEN_BASELINE_CONLL,
        ),
        (
            "rag_conll",
            render(PromptMode::Rag, &conll_labels(), &conll_ctx, &conll_input),
            GOLDEN_RAG_CONLL,
        ),
        (
            "icl_wnut",
            render(PromptMode::Icl, &wnut_labels(), &wnut_ctx, &wnut_input),
            GOLDEN_ICL_WNUT,
        ),
    ]
}
