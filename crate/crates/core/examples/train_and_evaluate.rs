//! Trains the full model and a plain cross-entropy baseline on a reduced
//! corpus, compares them on the biased and anti-biased test splits, and
//! round-trips the full model through a checkpoint file.
//!
//! `cargo run --release --example train_and_evaluate`

use ced::augmentation::{augment_corpus, AugmentConfig};
use ced::fusion_model::{load_checkpoint, save_checkpoint};
use ced::kv::KvConfig;
use ced::synth_data::{generate_corpus, CorpusSpec};
use ced::training::{evaluate, train, TrainConfig, Variant};

fn main() -> ced::Result<()> {
    let spec = CorpusSpec {
        train: 600,
        validation: 200,
        test_biased: 200,
        test_anti_biased: 200,
        ..CorpusSpec::default()
    };
    let bundle = generate_corpus(&spec)?;
    let aug = AugmentConfig::default();
    let mut backend = aug.rule_based_backend(&spec);
    let records = augment_corpus(&bundle.train, &bundle.lexicon, &aug, spec.seed, &mut backend)?;
    let base = TrainConfig {
        epochs: 6,
        ..TrainConfig::default()
    };

    let dir = std::env::temp_dir().join("ced-train-example");
    for variant in [Variant::Baseline, Variant::Full] {
        let cfg = variant.apply(&base);
        let result = train(&cfg, &bundle, &records)?;
        let biased = evaluate(&result.model, &bundle.test_biased)?;
        let anti = evaluate(&result.model, &bundle.test_anti_biased)?;
        println!(
            "{:<9} best epoch {}  biased acc {:.3} f1 {:.3}  anti-biased acc {:.3} f1 {:.3}",
            variant.as_str(),
            result.best_epoch,
            biased.accuracy,
            biased.macro_f1,
            anti.accuracy,
            anti.macro_f1
        );
        if variant == Variant::Full {
            std::fs::create_dir_all(&dir).map_err(|e| ced::CedError::io(&dir, e))?;
            let path = dir.join("checkpoint.ced");
            save_checkpoint(&path, &result.model, &cfg.to_kv_string())?;
            let (restored, _) = load_checkpoint(&path)?;
            println!("checkpoint {} restores exactly: {}", path.display(), restored == result.model);
        }
    }
    Ok(())
}
