//! Runs an untrained fusion classifier on one sample and prints its
//! parameter layout, class probabilities and the representations used by
//! the contrastive loss.

use ced::fusion_model::{describe, Model, ModelConfig};
use ced::synth_data::{generate_corpus, CorpusSpec};

fn main() -> ced::Result<()> {
    let bundle = generate_corpus(&CorpusSpec {
        train: 4,
        validation: 1,
        test_biased: 1,
        test_anti_biased: 1,
        ..CorpusSpec::default()
    })?;
    let cfg = ModelConfig {
        vocab_size: bundle.lexicon.vocab_size(),
        ..ModelConfig::default()
    };
    let model = Model::init(cfg, 42);
    describe(&model, &mut std::io::stdout()).expect("stdout");

    let sample = &bundle.train[0];
    let out = model.forward(sample)?;
    println!("\nlabel {}; probabilities {:.4?}", sample.label, out.probs);
    println!("|h| = {}, |z| = {}", out.h.len(), out.z.len());
    println!("‖z‖ = {:.6}", out.z.iter().map(|v| v * v).sum::<f64>().sqrt());
    Ok(())
}
