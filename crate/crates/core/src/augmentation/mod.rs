//! Counterfactual data augmentation.
//!
//! Every original sample yields one sentiment-reversed record for each of
//! the two other labels and `invariant_per_sample` sentiment-invariant
//! records. Each record draws from its own seed, derived from the corpus
//! seed, the source id and the record slot.

mod backend;
mod counterfactual;
mod lexicon;
mod prompt;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use backend::{
    format_instruction, parse_instruction, run_mock_backend, BackendRequest, BackendResponse,
    CounterfactualBackend, ExternalBackend, RuleBasedBackend, BACKEND_ENV, PROTOCOL_VERSION,
};
pub use counterfactual::{
    counterfactual_id, edit_image_features, invariant_augment, record_seed,
    reverse_sentiment_rule_based, reverse_tokens, signal_delta, CounterfactualKind,
    CounterfactualRecord, EditInstruction, InvariantChoice, InvariantOp,
};
pub use lexicon::{SentimentLexicon, WordClass};
pub use prompt::{build_prompt, PROMPT_TEMPLATE_V1, PROMPT_VERSION};

use crate::error::{CedError, Result};
use crate::io_util::{read_to_string, write_atomic};
use crate::synth_data::{validate_sample, CorpusSpec, MultimodalSample, Provenance, Sentiment};
use crate::tensor_math::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub invariant_per_sample: usize,
    pub invariant_op: InvariantChoice,
    /// Share of biased words touched per operation; per-word deletion
    /// probability for `random_delete`.
    pub invariant_rate: f64,
    pub image_edit_noise: f64,
    pub edit_images: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            invariant_per_sample: 1,
            invariant_op: InvariantChoice::Random,
            invariant_rate: 0.1,
            image_edit_noise: 0.01,
            edit_images: true,
        }
    }
}

impl AugmentConfig {
    pub fn rule_based_backend(&self, spec: &CorpusSpec) -> RuleBasedBackend {
        RuleBasedBackend {
            signals: spec.signals.clone(),
            image_edit_noise: self.image_edit_noise,
            edit_images: self.edit_images,
        }
    }
}

/// Sentiment-reversal of `sample` to `target_label` through `backend`.
pub fn reverse_sentiment(
    sample: &MultimodalSample,
    lexicon: &SentimentLexicon,
    target_label: Sentiment,
    backend: &mut dyn CounterfactualBackend,
    seed: u64,
) -> Result<CounterfactualRecord> {
    if target_label == sample.label {
        return Err(CedError::Data(format!(
            "sample {}: reversal target equals its label",
            sample.id
        )));
    }
    backend.reverse(sample, lexicon, target_label, seed)
}

/// All counterfactual records for one original sample.
pub fn augment_sample(
    sample: &MultimodalSample,
    lexicon: &SentimentLexicon,
    cfg: &AugmentConfig,
    corpus_seed: u64,
    backend: &mut dyn CounterfactualBackend,
) -> Result<Vec<CounterfactualRecord>> {
    let mut out = Vec::with_capacity(2 + cfg.invariant_per_sample);
    for target in sample.label.others() {
        let slot = target.index() as u64;
        let seed = record_seed(corpus_seed, CounterfactualKind::SentiReversed, sample.id, slot);
        out.push(reverse_sentiment(sample, lexicon, target, backend, seed)?);
    }
    for k in 0..cfg.invariant_per_sample {
        let slot = 4 + k as u64;
        let seed = record_seed(corpus_seed, CounterfactualKind::SentiInvariant, sample.id, slot);
        out.push(invariant_augment(
            sample,
            lexicon,
            cfg.invariant_op,
            cfg.invariant_rate,
            slot,
            seed,
        )?);
    }
    Ok(out)
}

pub fn augment_corpus(
    samples: &[MultimodalSample],
    lexicon: &SentimentLexicon,
    cfg: &AugmentConfig,
    corpus_seed: u64,
    backend: &mut dyn CounterfactualBackend,
) -> Result<Vec<CounterfactualRecord>> {
    if cfg.invariant_per_sample > 12 {
        return Err(CedError::config("invariant_per_sample", "at most 12 per sample"));
    }
    let mut out = Vec::new();
    for s in samples {
        out.extend(augment_sample(s, lexicon, cfg, corpus_seed, backend)?);
    }
    Ok(out)
}

pub const AUGMENT_FORMAT: &str = "ced-augmentation";
pub const AUGMENT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentManifest {
    pub format: String,
    pub version: u32,
    pub backend: String,
    pub config: AugmentConfig,
    pub corpus_seed: u64,
    pub senti_reversed: usize,
    pub senti_invariant: usize,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    source_id: u64,
    kind: CounterfactualKind,
    new_label: Sentiment,
    edited_token_positions: Vec<usize>,
    instruction: EditInstruction,
    op: Option<InvariantOp>,
    injected: bool,
    identity: bool,
    id: u64,
    tokens: Vec<usize>,
    target_start: usize,
    target_len: usize,
    label: Sentiment,
    patches: Vec<f64>,
    provenance: Provenance,
}

pub fn record_file(kind: CounterfactualKind) -> String {
    format!("{}.jsonl", kind.as_str())
}

pub fn encode_records<'a>(records: impl IntoIterator<Item = &'a CounterfactualRecord>) -> String {
    let mut out = String::new();
    for r in records {
        let s = &r.new_sample;
        let line = RecordLine {
            source_id: r.source_id,
            kind: r.kind,
            new_label: r.new_label,
            edited_token_positions: r.edited_token_positions.clone(),
            instruction: r.instruction,
            op: r.op,
            injected: r.injected,
            identity: r.identity,
            id: s.id,
            tokens: s.tokens().to_vec(),
            target_start: s.target_start,
            target_len: s.target_len,
            label: s.label,
            patches: s.image.matrix().as_slice().to_vec(),
            provenance: s.provenance,
        };
        out.push_str(&serde_json::to_string(&line).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn decode_records(text: &str, path: &Path, spec: &CorpusSpec, vocab_size: usize) -> Result<Vec<CounterfactualRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| CedError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let r: RecordLine = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let image = Matrix::from_vec(spec.num_patches, spec.d_img, r.patches).map_err(|e| err(e.to_string()))?;
        let sample = MultimodalSample::new(
            r.id,
            r.tokens,
            r.target_start,
            r.target_len,
            image,
            r.label,
            r.provenance,
        )
        .map_err(|e| err(e.to_string()))?;
        validate_sample(&sample, spec, vocab_size).map_err(|e| err(e.to_string()))?;
        out.push(CounterfactualRecord {
            source_id: r.source_id,
            new_sample: sample,
            new_label: r.new_label,
            edited_token_positions: r.edited_token_positions,
            instruction: r.instruction,
            kind: r.kind,
            op: r.op,
            injected: r.injected,
            identity: r.identity,
        });
    }
    Ok(out)
}

/// Writes one JSONL file per record kind plus a manifest into `dir`.
pub fn write_records(
    dir: &Path,
    records: &[CounterfactualRecord],
    backend: &str,
    cfg: &AugmentConfig,
    corpus_seed: u64,
) -> Result<AugmentManifest> {
    let of = |k| records.iter().filter(move |r: &&CounterfactualRecord| r.kind == k);
    let reversed = encode_records(of(CounterfactualKind::SentiReversed));
    let invariant = encode_records(of(CounterfactualKind::SentiInvariant));
    let manifest = AugmentManifest {
        format: AUGMENT_FORMAT.to_string(),
        version: AUGMENT_VERSION,
        backend: backend.to_string(),
        config: cfg.clone(),
        corpus_seed,
        senti_reversed: of(CounterfactualKind::SentiReversed).count(),
        senti_invariant: of(CounterfactualKind::SentiInvariant).count(),
    };
    write_atomic(&dir.join(record_file(CounterfactualKind::SentiReversed)), reversed.as_bytes())?;
    write_atomic(&dir.join(record_file(CounterfactualKind::SentiInvariant)), invariant.as_bytes())?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

pub fn read_records(dir: &Path, spec: &CorpusSpec, vocab_size: usize) -> Result<(AugmentManifest, Vec<CounterfactualRecord>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: AugmentManifest = serde_json::from_str(&read_to_string(&manifest_path)?).map_err(|e| {
        CedError::Parse {
            path: manifest_path.clone(),
            line: e.line(),
            message: e.to_string(),
        }
    })?;
    if manifest.format != AUGMENT_FORMAT {
        return Err(CedError::Data(format!("{} is not an augmentation manifest", manifest_path.display())));
    }
    if manifest.version != AUGMENT_VERSION {
        return Err(CedError::Version {
            found: manifest.version,
            expected: AUGMENT_VERSION,
        });
    }
    let mut records = Vec::new();
    for kind in [CounterfactualKind::SentiReversed, CounterfactualKind::SentiInvariant] {
        let path = dir.join(record_file(kind));
        let part = decode_records(&read_to_string(&path)?, &path, spec, vocab_size)?;
        if part.iter().any(|r| r.kind != kind) {
            return Err(CedError::Data(format!("{} mixes record kinds", path.display())));
        }
        records.extend(part);
    }
    Ok((manifest, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_data::{generate_corpus, CorpusSpec};

    #[test]
    fn two_reversals_and_one_invariant_per_sample() {
        let spec = CorpusSpec {
            train: 30,
            validation: 1,
            test_biased: 1,
            test_anti_biased: 1,
            ..CorpusSpec::default()
        };
        let bundle = generate_corpus(&spec).unwrap();
        let cfg = AugmentConfig::default();
        let mut backend = cfg.rule_based_backend(&spec);
        let records = augment_corpus(&bundle.train, &bundle.lexicon, &cfg, spec.seed, &mut backend).unwrap();
        assert_eq!(records.len(), 90);
        for s in &bundle.train {
            let mine: Vec<_> = records.iter().filter(|r| r.source_id == s.id).collect();
            let labels: Vec<_> = mine
                .iter()
                .filter(|r| r.kind == CounterfactualKind::SentiReversed)
                .map(|r| r.new_label)
                .collect();
            assert_eq!(labels, s.label.others().to_vec());
            assert_eq!(mine.iter().filter(|r| r.kind == CounterfactualKind::SentiInvariant).count(), 1);
        }
        let text = encode_records(&records);
        let back = decode_records(&text, Path::new("r.jsonl"), &spec, bundle.lexicon.vocab_size()).unwrap();
        assert_eq!(back, records);
    }
}
