//! Batch composition. Each original travels with its counterfactuals, so a
//! batch always holds the near-duplicate pairs the contrastive term needs.

use std::collections::HashMap;

use rand::seq::SliceRandom;

use crate::augmentation::{CounterfactualKind, CounterfactualRecord};
use crate::error::{CedError, Result};
use crate::rng::{derived_rng, tag};
use crate::synth_data::MultimodalSample;

/// Training samples in fixed order plus the index groups batching keeps
/// together. Group `g` starts with original `g`.
#[derive(Clone, Debug)]
pub struct TrainingPool {
    pub samples: Vec<MultimodalSample>,
    pub groups: Vec<Vec<usize>>,
}

impl TrainingPool {
    /// Identity records (invariant edits that found nothing to change) are
    /// left out: they would duplicate their source.
    pub fn build(
        originals: &[MultimodalSample],
        records: &[CounterfactualRecord],
        use_senti_rev: bool,
        use_senti_inv: bool,
    ) -> Result<Self> {
        let mut samples: Vec<MultimodalSample> = originals.to_vec();
        let mut groups: Vec<Vec<usize>> = (0..originals.len()).map(|i| vec![i]).collect();
        let index: HashMap<u64, usize> = originals.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
        for r in records {
            let wanted = match r.kind {
                CounterfactualKind::SentiReversed => use_senti_rev,
                CounterfactualKind::SentiInvariant => use_senti_inv,
            };
            if !wanted || r.identity {
                continue;
            }
            let &g = index.get(&r.source_id).ok_or_else(|| {
                CedError::Data(format!("record {} has unknown source {}", r.new_sample.id, r.source_id))
            })?;
            groups[g].push(samples.len());
            samples.push(r.new_sample.clone());
        }
        Ok(TrainingPool { samples, groups })
    }

    pub fn largest_group(&self) -> usize {
        self.groups.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Batches for one epoch: groups are shuffled under `(seed, epoch)` and
/// packed greedily; a batch is closed when the next group would overflow
/// `batch_size`.
pub fn make_batches(pool: &TrainingPool, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if pool.largest_group() > batch_size {
        return Err(CedError::config(
            "batch_size",
            format!(
                "a group of {} samples does not fit batches of {batch_size}",
                pool.largest_group()
            ),
        ));
    }
    let mut order: Vec<usize> = (0..pool.groups.len()).collect();
    order.shuffle(&mut derived_rng(seed, &[tag("batches"), epoch as u64]));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::with_capacity(batch_size);
    for g in order {
        let group = &pool.groups[g];
        if current.len() + group.len() > batch_size {
            batches.push(std::mem::take(&mut current));
        }
        current.extend_from_slice(group);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::{augment_corpus, AugmentConfig};
    use crate::synth_data::{generate_corpus, CorpusSpec, Provenance};

    fn fixture() -> (Vec<MultimodalSample>, Vec<CounterfactualRecord>) {
        let spec = CorpusSpec {
            train: 40,
            validation: 1,
            test_biased: 1,
            test_anti_biased: 1,
            ..CorpusSpec::default()
        };
        let bundle = generate_corpus(&spec).unwrap();
        let cfg = AugmentConfig::default();
        let mut backend = cfg.rule_based_backend(&spec);
        let records = augment_corpus(&bundle.train, &bundle.lexicon, &cfg, spec.seed, &mut backend).unwrap();
        (bundle.train, records)
    }

    #[test]
    fn flags_off_gives_originals_only() {
        let (train, records) = fixture();
        let pool = TrainingPool::build(&train, &records, false, false).unwrap();
        let batches = make_batches(&pool, 8, 3, 0).unwrap();
        let all: Vec<usize> = batches.iter().flatten().copied().collect();
        assert_eq!(all.len(), 40);
        assert!(all.iter().all(|&i| pool.samples[i].provenance == Provenance::Original));
        assert!(batches.iter().all(|b| b.len() <= 8));
    }

    #[test]
    fn reversals_share_a_batch_with_their_source() {
        let (train, records) = fixture();
        let pool = TrainingPool::build(&train, &records, true, true).unwrap();
        for b in make_batches(&pool, 32, 3, 1).unwrap() {
            for &i in &b {
                let s = &pool.samples[i];
                if s.provenance == Provenance::Original {
                    assert!(b.iter().any(|&j| pool.samples[j].label != s.label));
                }
            }
        }
    }

    #[test]
    fn fixed_seed_is_reproducible_and_epochs_differ() {
        let (train, records) = fixture();
        let pool = TrainingPool::build(&train, &records, true, false).unwrap();
        let a = make_batches(&pool, 9, 5, 2).unwrap();
        assert_eq!(a, make_batches(&pool, 9, 5, 2).unwrap());
        assert_ne!(a, make_batches(&pool, 9, 5, 3).unwrap());
    }

    #[test]
    fn oversized_group_is_a_config_error() {
        let (train, records) = fixture();
        let pool = TrainingPool::build(&train, &records, true, true).unwrap();
        assert!(matches!(
            make_batches(&pool, 3, 0, 0),
            Err(CedError::Config { field, .. }) if field == "batch_size"
        ));
    }
}
