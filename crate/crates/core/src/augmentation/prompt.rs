use super::lexicon::SentimentLexicon;
use crate::synth_data::{MultimodalSample, Sentiment};

pub const PROMPT_VERSION: u32 = 1;
pub const PROMPT_TEMPLATE_V1: &str = include_str!("../../assets/prompt_v1.txt");

fn words(lexicon: &SentimentLexicon, ids: &[usize]) -> String {
    ids.iter()
        .map(|&id| lexicon.word(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Fills `{name}` slots of `template` in one pass; unknown slots are kept
/// verbatim.
fn render(template: &str, lookup: impl Fn(&str) -> Option<String>) -> String {
    let mut out = String::with_capacity(template.len() + 128);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let name = &after[..close];
                match lookup(name) {
                    Some(v) => out.push_str(&v),
                    None => {
                        out.push('{');
                        out.push_str(name);
                        out.push('}');
                    }
                }
                rest = &after[close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// Request text for an external rewriting model: sentence, target, image
/// description, current and requested labels, and the reply format.
pub fn build_prompt(
    sample: &MultimodalSample,
    lexicon: &SentimentLexicon,
    image_description: &str,
    target_label: Sentiment,
) -> String {
    let description = image_description.trim();
    render(PROMPT_TEMPLATE_V1, |name| match name {
        "sentence" => Some(words(lexicon, sample.tokens())),
        "target" => Some(words(lexicon, &sample.tokens()[sample.target_range()])),
        "description" => Some(if description.is_empty() {
            "(no description)".to_string()
        } else {
            description.to_string()
        }),
        "label" => Some(sample.label.to_string()),
        "target_label" => Some(target_label.to_string()),
        _ => None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_data::{generate_corpus, CorpusSpec};

    #[test]
    fn empty_description_slot_and_determinism() {
        let bundle = generate_corpus(&CorpusSpec {
            train: 2,
            validation: 1,
            test_biased: 1,
            test_anti_biased: 1,
            ..CorpusSpec::default()
        })
        .unwrap();
        let s = &bundle.train[0];
        let a = build_prompt(s, &bundle.lexicon, "  ", Sentiment::Neutral);
        assert!(a.contains("Image description: (no description)\n"));
        assert_eq!(a, build_prompt(s, &bundle.lexicon, "", Sentiment::Neutral));
        assert!(!a.contains("{sentence}"));
        assert!(a.starts_with("# counterfactual-prompt v1\n"));
    }

    #[test]
    fn render_keeps_unknown_slots() {
        assert_eq!(render("a {x} {y} {", |n| (n == "x").then(|| "1".into())), "a 1 {y} {");
    }
}
