//! Checks the analytic gradient of the training objective (cross-entropy
//! plus the weighted contrastive term) against central differences on a
//! small model.

use ced::augmentation::{augment_corpus, AugmentConfig};
use ced::fusion_model::{Model, ModelConfig, ModelParams};
use ced::synth_data::{generate_corpus, CorpusSpec, MultimodalSample};
use ced::tensor_math::{grad_check, Matrix};
use ced::training::{batch_objective, TrainConfig};

fn main() -> ced::Result<()> {
    let bundle = generate_corpus(&CorpusSpec {
        train: 2,
        validation: 1,
        test_biased: 1,
        test_anti_biased: 1,
        ..CorpusSpec::default()
    })?;
    let aug = AugmentConfig::default();
    let mut backend = aug.rule_based_backend(&bundle.spec);
    let records = augment_corpus(&bundle.train, &bundle.lexicon, &aug, bundle.spec.seed, &mut backend)?;
    let mut batch: Vec<&MultimodalSample> = bundle.train.iter().collect();
    batch.extend(records.iter().take(2).map(|r| &r.new_sample));

    let model_cfg = ModelConfig {
        vocab_size: bundle.lexicon.vocab_size(),
        d_model: 8,
        heads: 2,
        d_ff: 16,
        d_proj: 8,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        model: model_cfg.clone(),
        ..TrainConfig::default()
    };
    let model = Model::init(model_cfg.clone(), 5);
    let rebuild = |ps: &[Matrix]| -> ModelParams {
        let mut i = 0;
        model.params.map("", &mut |_, _| {
            i += 1;
            ps[i - 1].clone()
        })
    };
    let flat: Vec<Matrix> = model.params.leaves().into_iter().cloned().collect();
    let reports = grad_check(
        &model.params.names(),
        &flat,
        |ps| {
            let obj = batch_objective(&rebuild(ps), &model_cfg, &batch, &cfg)?;
            Ok((obj.loss.l_total, obj.grads.leaves().into_iter().cloned().collect()))
        },
        1e-5,
        4,
        1,
    )?;
    for r in &reports {
        println!("{:<40} {:>3} probes  max rel err {:.2e}", r.param_name, r.probe_count, r.max_rel_err);
    }
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    println!("worst relative error {worst:.2e}");
    Ok(())
}
