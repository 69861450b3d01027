//! Sweeps the contrastive weight λ on a reduced corpus and prints the
//! anti-biased accuracy curve.
//!
//! `cargo run --release --example lambda_sweep`

use ced::augmentation::{augment_corpus, AugmentConfig};
use ced::synth_data::{generate_corpus, CorpusSpec};
use ced::training::{parse_grid, sweep_lambda, Experiment, TrainConfig};

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
    let curve = sweep_lambda(&mut exp, &base, &parse_grid("0:1.2:0.4")?, &[1, 2, 3])?;
    for p in &curve.points {
        let bar = "#".repeat((p.anti_acc.mean * 40.0).round() as usize);
        println!("λ={:<4} {}  {bar}", p.lambda, p.anti_acc);
    }
    Ok(())
}
