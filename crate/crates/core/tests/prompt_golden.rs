mod common;

use annotator::llm::parse_entity_output;
use annotator::promptkit::{render_prompt, PromptMode};

#[test]
fn rendered_prompts_match_goldens_bytewise() {
    for (name, rendered, golden) in common::golden_pairs() {
        assert_eq!(rendered, golden, "{name} differs from its golden file");
    }
}

#[test]
fn header_is_verbatim() {
    for (name, rendered, _) in common::golden_pairs() {
        assert!(
            rendered.contains("You are an advanced Named-Entity Recognition (NER) system"),
            "{name}"
        );
    }
}

#[test]
fn context_examples_parse_back_as_entity_lists() {
    let (_, rendered, _) = &common::golden_pairs()[1];
    let block = rendered
        .split("Examples\n\n")
        .nth(1)
        .unwrap()
        .split("\n\nInput")
        .next()
        .unwrap();
    for example in block.split("\n\n") {
        let entities = example.find(", [").map(|i| &example[i + 2..example.len() - 1]).unwrap();
        parse_entity_output(entities).expect("context entity list is accepted by the parser");
    }
}

#[test]
fn rendering_is_pure() {
    let labels = common::conll_labels();
    let a = render_prompt(PromptMode::Baseline, &labels, &[], 0, "EU rejects").unwrap();
    let b = render_prompt(PromptMode::Baseline, &labels, &[], 0, "EU rejects").unwrap();
    assert_eq!(a.sha256(), b.sha256());
}
