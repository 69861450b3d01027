use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::batches::{make_batches, TrainingPool};
use super::config::TrainConfig;
use super::metrics::evaluate;
use super::optim::{adamw_step_model, lr_schedule, AdamHyper, OptimizerState, StepOutcome};
use crate::augmentation::CounterfactualRecord;
use crate::error::{CedError, Result};
use crate::fusion_model::{forward_on, Model, ModelConfig, ModelParams, NUM_CLASSES};
use crate::kv::KvConfig;
use crate::losses::{
    adaptive_contrastive_loss_with_grad, softmax_cross_entropy_with_grad, ContrastiveAnchor,
    ContrastiveBatchView, LossBreakdown,
};
use crate::params::Bind;
use crate::rng::{derive_seed, tag};
use crate::synth_data::{DatasetBundle, MultimodalSample};
use crate::tensor_math::{Matrix, Tape};

/// Loss terms of one batch and the gradient of `L_s + λ·L_c` with respect
/// to every parameter.
#[derive(Clone, Debug)]
pub struct BatchObjective {
    pub loss: LossBreakdown,
    pub grads: ModelParams,
}

/// Evaluates the training objective on `batch`. The contrastive term is
/// computed whenever `use_contrastive` is set, but only reaches the
/// gradient when `lambda > 0`.
pub fn batch_objective(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    batch: &[&MultimodalSample],
    cfg: &TrainConfig,
) -> Result<BatchObjective> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut outputs = Vec::with_capacity(batch.len());
    for s in batch {
        outputs.push(forward_on(&mut tape, &bound, model_cfg, s)?);
    }

    let logits: Vec<[f64; NUM_CLASSES]> = outputs
        .iter()
        .map(|o| {
            let v = tape.value(o.logits).as_slice();
            [v[0], v[1], v[2]]
        })
        .collect();
    let labels: Vec<_> = batch.iter().map(|s| s.label).collect();
    let (l_s, ce_grads) = softmax_cross_entropy_with_grad(&logits, &labels)?;
    let mut partials: Vec<_> = outputs
        .iter()
        .zip(&ce_grads)
        .map(|(o, g)| (o.logits, Matrix::row_vector(g)))
        .collect();

    let (mut l_c, mut skipped) = (0.0, 0);
    if cfg.use_contrastive {
        let anchors = outputs
            .iter()
            .zip(batch)
            .map(|(o, s)| ContrastiveAnchor {
                h: tape.value(o.h).as_slice().to_vec(),
                z: tape.value(o.z).as_slice().to_vec(),
                label: s.label,
                sample_id: s.id,
            })
            .collect();
        let view = ContrastiveBatchView {
            anchors,
            temperature: cfg.temperature,
            denominator_includes_positive: cfg.denominator_includes_positive,
            uniform_weights: !cfg.use_adaptive_weights,
        };
        let out = adaptive_contrastive_loss_with_grad(&view)?;
        l_c = out.loss;
        skipped = out.skipped;
        if cfg.lambda > 0.0 {
            for (o, (gz, gh)) in outputs.iter().zip(out.grad_z.iter().zip(&out.grad_h)) {
                partials.push((o.z, Matrix::row_vector(gz).scale(cfg.lambda)));
                partials.push((o.h, Matrix::row_vector(gh).scale(cfg.lambda)));
            }
        }
    }

    let loss = LossBreakdown::new(l_s, l_c, cfg.lambda, skipped)?;
    let root = tape.scalar(loss.l_total, partials)?;
    let raw = tape.backward(root)?;
    let grads = bound.map("", &mut |_, v| {
        raw[v.index()].clone().unwrap_or_else(|| {
            let (r, c) = tape.value(*v).shape();
            Matrix::zeros(r, c)
        })
    });
    Ok(BatchObjective { loss, grads })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub epoch: usize,
    pub l_s: f64,
    pub l_c: f64,
    pub l_total: f64,
    pub lr: f64,
    pub skipped_anchors: usize,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("step,epoch,l_s,l_c,l_total,lr,skipped_anchors\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:?},{:?},{:?},{:?},{}\n",
            r.step, r.epoch, r.l_s, r.l_c, r.l_total, r.lr, r.skipped_anchors
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    /// Parameters from the epoch with the best validation accuracy.
    pub model: Model,
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub val_acc_per_epoch: Vec<f64>,
    /// Step at which a non-finite loss or gradient stopped training.
    pub diverged_at: Option<usize>,
}

/// Model dimensions taken from `cfg`, with the vocabulary size replaced
/// by the corpus lexicon's. Patch count and width must match the corpus.
pub fn model_config_for(cfg: &TrainConfig, bundle: &DatasetBundle) -> Result<ModelConfig> {
    let mut m = cfg.model.clone();
    m.vocab_size = bundle.lexicon.vocab_size();
    if m.num_patches != bundle.spec.num_patches {
        return Err(CedError::config(
            "model.num_patches",
            format!("corpus has {} patches per image", bundle.spec.num_patches),
        ));
    }
    if m.d_img != bundle.spec.d_img {
        return Err(CedError::config(
            "model.d_img",
            format!("corpus has {}-dimensional patches", bundle.spec.d_img),
        ));
    }
    m.validate()?;
    Ok(m)
}

pub fn train(cfg: &TrainConfig, bundle: &DatasetBundle, records: &[CounterfactualRecord]) -> Result<TrainResult> {
    cfg.validate()?;
    let model_cfg = model_config_for(cfg, bundle)?;
    let pool = TrainingPool::build(&bundle.train, records, cfg.use_senti_rev, cfg.use_senti_inv)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        epochs.push(make_batches(&pool, cfg.batch_size, cfg.seed, e)?);
    }
    let total_steps: usize = epochs.iter().map(Vec::len).sum();

    let mut model = Model::init(model_cfg, derive_seed(cfg.seed, &[tag("init")]));
    let hyper = AdamHyper {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    };
    let mut state = OptimizerState::for_model(&model.params, hyper);
    let mut history = Vec::with_capacity(total_steps);
    let mut best: Option<(Model, usize, f64)> = None;
    let mut val_acc_per_epoch = Vec::with_capacity(cfg.epochs);
    let mut diverged_at = None;
    let mut step = 0;

    'epochs: for (epoch, batches) in epochs.iter().enumerate() {
        for batch in batches {
            let samples: Vec<&MultimodalSample> = batch.iter().map(|&i| &pool.samples[i]).collect();
            let obj = batch_objective(&model.params, &model.config, &samples, cfg)?;
            let lr = lr_schedule(step + 1, total_steps, cfg.lr, cfg.warmup_frac)?;
            if !obj.loss.l_total.is_finite()
                || adamw_step_model(&mut model.params, &obj.grads, &mut state, lr)?
                    == StepOutcome::RejectedNonFinite
            {
                warn!("non-finite loss or gradient at step {step}; stopping");
                diverged_at = Some(step);
                break 'epochs;
            }
            history.push(HistoryRow {
                step,
                epoch,
                l_s: obj.loss.l_s,
                l_c: obj.loss.l_c,
                l_total: obj.loss.l_total,
                lr,
                skipped_anchors: obj.loss.skipped_anchors,
            });
            step += 1;
        }
        let acc = evaluate(&model, &bundle.validation)?.accuracy;
        val_acc_per_epoch.push(acc);
        info!("epoch {epoch}: validation accuracy {acc:.4}");
        if best.as_ref().map_or(true, |(_, _, b)| acc > *b) {
            best = Some((model.clone(), epoch, acc));
        }
    }

    let (model, best_epoch, best_val_acc) = match best {
        Some(b) => b,
        None => {
            let acc = evaluate(&model, &bundle.validation)?.accuracy;
            (model, 0, acc)
        }
    };
    Ok(TrainResult {
        model,
        history,
        best_epoch,
        best_val_acc,
        val_acc_per_epoch,
        diverged_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_data::{generate_corpus, CorpusSpec};

    fn tiny() -> (TrainConfig, DatasetBundle) {
        let spec = CorpusSpec {
            train: 32,
            validation: 8,
            test_biased: 4,
            test_anti_biased: 4,
            ..CorpusSpec::default()
        };
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            model: ModelConfig {
                d_model: 8,
                heads: 2,
                d_ff: 16,
                d_proj: 4,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        (cfg, generate_corpus(&spec).unwrap())
    }

    #[test]
    fn plain_classifier_has_zero_contrastive_history() {
        let (mut cfg, bundle) = tiny();
        cfg.lambda = 0.0;
        cfg.use_contrastive = false;
        let r = train(&cfg, &bundle, &[]).unwrap();
        assert_eq!(r.history.len(), 4);
        for row in &r.history {
            assert_eq!(row.l_c, 0.0);
            assert_eq!(row.l_total, row.l_s);
        }
    }

    #[test]
    fn one_epoch_is_bit_reproducible() {
        let (cfg, bundle) = tiny();
        let a = train(&cfg, &bundle, &[]).unwrap();
        let b = train(&cfg, &bundle, &[]).unwrap();
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn mismatched_patch_width_is_rejected() {
        let (mut cfg, bundle) = tiny();
        cfg.model.d_img = 5;
        assert!(matches!(train(&cfg, &bundle, &[]), Err(CedError::Config { field, .. }) if field == "model.d_img"));
    }
}
