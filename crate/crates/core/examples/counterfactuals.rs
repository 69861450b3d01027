//! Builds the counterfactual records of one training sample: a
//! sentiment-reversed copy for each other label, with the image moved to
//! the new label's signal, and one sentiment-invariant edit of the biased
//! words. Also prints the request an external rewriting model would get.

use ced::augmentation::{augment_sample, build_prompt, AugmentConfig, CounterfactualKind};
use ced::synth_data::{generate_corpus, CorpusSpec, Sentiment};
use ced::tensor_math::euclidean_distance;

fn main() -> ced::Result<()> {
    let spec = CorpusSpec {
        train: 20,
        validation: 5,
        test_biased: 5,
        test_anti_biased: 5,
        ..CorpusSpec::default()
    };
    let bundle = generate_corpus(&spec)?;
    let lex = &bundle.lexicon;
    let cfg = AugmentConfig::default();
    let mut backend = cfg.rule_based_backend(&spec);
    let sample = &bundle.train[0];
    let text = |ids: &[usize]| ids.iter().map(|&t| lex.word(t)).collect::<Vec<_>>().join(" ");
    // distance of the mean patch from each label's signal
    let nearest_signal = |m: &ced::tensor_math::Matrix| {
        let mean: Vec<f64> = (0..m.cols()).map(|c| (0..m.rows()).map(|r| m.get(r, c)).sum::<f64>() / m.rows() as f64).collect();
        Sentiment::ALL
            .into_iter()
            .min_by(|a, b| {
                euclidean_distance(&mean, &spec.signals[a.index()])
                    .total_cmp(&euclidean_distance(&mean, &spec.signals[b.index()]))
            })
            .unwrap()
    };

    println!("original   [{}] {}", sample.label, text(sample.tokens()));
    for r in augment_sample(sample, lex, &cfg, spec.seed, &mut backend)? {
        let s = &r.new_sample;
        let what = match r.kind {
            CounterfactualKind::SentiReversed => "reversed ".to_string(),
            CounterfactualKind::SentiInvariant => format!("{:<9}", r.op.map(|o| o.as_str()).unwrap_or("identity")),
        };
        println!(
            "{what}  [{}] {}  edits at {:?}; image nearest to {} signal",
            s.label,
            text(s.tokens()),
            r.edited_token_positions,
            nearest_signal(s.image.matrix())
        );
    }

    println!("\n{}", build_prompt(sample, lex, "two people smiling at a concert", Sentiment::Neutral));
    Ok(())
}
