//! Trains the full model and its four ablations over three seeds on a
//! reduced corpus and prints the summary table with sign tests against
//! the full model.
//!
//! `cargo run --release --example ablation_study`

use ced::augmentation::{augment_corpus, AugmentConfig};
use ced::synth_data::{generate_corpus, CorpusSpec};
use ced::training::{run_ablation, Experiment, TrainConfig};

fn main() -> ced::Result<()> {
    let spec = CorpusSpec {
        train: 300,
        validation: 150,
        test_biased: 150,
        test_anti_biased: 150,
        ..CorpusSpec::default()
    };
    let bundle = generate_corpus(&spec)?;
    let aug = AugmentConfig::default();
    let mut backend = aug.rule_based_backend(&spec);
    let records = augment_corpus(&bundle.train, &bundle.lexicon, &aug, spec.seed, &mut backend)?;
    let base = TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    };
    let mut exp = Experiment::new(&bundle, &records);
    exp.jobs = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let report = run_ablation(&mut exp, &base, &[1, 2, 3])?;
    print!("{}", report.to_text());
    Ok(())
}
