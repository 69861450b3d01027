use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::lexicon::SentimentLexicon;
use crate::encoders::PatchFeatures;
use crate::error::{CedError, Result};
use crate::rng::{derived_rng, tag};
use crate::synth_data::{MultimodalSample, Provenance, Sentiment};
#[cfg(test)]
use crate::tensor_math::Matrix;

/// Instruction for the image side of a counterfactual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditInstruction {
    None,
    ReplaceSignal { polarity: Sentiment },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterfactualKind {
    SentiReversed,
    SentiInvariant,
}

impl CounterfactualKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CounterfactualKind::SentiReversed => "senti_reversed",
            CounterfactualKind::SentiInvariant => "senti_invariant",
        }
    }

    pub fn provenance(self) -> Provenance {
        match self {
            CounterfactualKind::SentiReversed => Provenance::SentiReversed,
            CounterfactualKind::SentiInvariant => Provenance::SentiInvariant,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvariantOp {
    SynonymReplace,
    RandomInsert,
    RandomSwap,
    RandomDelete,
}

impl InvariantOp {
    pub const ALL: [InvariantOp; 4] = [
        InvariantOp::SynonymReplace,
        InvariantOp::RandomInsert,
        InvariantOp::RandomSwap,
        InvariantOp::RandomDelete,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InvariantOp::SynonymReplace => "synonym_replace",
            InvariantOp::RandomInsert => "random_insert",
            InvariantOp::RandomSwap => "random_swap",
            InvariantOp::RandomDelete => "random_delete",
        }
    }
}

/// Which invariant operation to apply: a fixed one, or one drawn per record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvariantChoice {
    Fixed(InvariantOp),
    Random,
}

impl std::str::FromStr for InvariantChoice {
    type Err = CedError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "random" {
            return Ok(InvariantChoice::Random);
        }
        InvariantOp::ALL
            .into_iter()
            .find(|op| op.as_str() == s)
            .map(InvariantChoice::Fixed)
            .ok_or_else(|| CedError::config("invariant_op", format!("unknown operation `{s}`")))
    }
}

impl std::fmt::Display for InvariantChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InvariantChoice::Fixed(op) => f.write_str(op.as_str()),
            InvariantChoice::Random => f.write_str("random"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualRecord {
    pub source_id: u64,
    pub new_sample: MultimodalSample,
    pub new_label: Sentiment,
    /// For replacements, swaps and deletions: positions in the source
    /// sentence. For insertions and injected causal words: positions in the
    /// new sentence.
    pub edited_token_positions: Vec<usize>,
    pub instruction: EditInstruction,
    pub kind: CounterfactualKind,
    /// Invariant operation actually applied, after any fallback.
    pub op: Option<InvariantOp>,
    /// A causal word was inserted because the source had none.
    pub injected: bool,
    /// No edit was possible; the new sample equals the source.
    pub identity: bool,
}

/// Id of a counterfactual derived from `source_id`. Slots 0..3 hold the
/// reversal to each label, slots from 4 the invariant records.
pub fn counterfactual_id(source_id: u64, slot: u64) -> u64 {
    (1u64 << 40) + source_id * 16 + slot
}

pub fn record_seed(base: u64, kind: CounterfactualKind, source_id: u64, slot: u64) -> u64 {
    crate::rng::derive_seed(base, &[tag(kind.as_str()), source_id, slot])
}

/// Moves the image from the source label's signal to the requested one:
/// `out = in - s_y + s_ỹ + noise_scale·N(0, 1)` per entry.
pub fn edit_image_features(
    patches: &PatchFeatures,
    source_label: Sentiment,
    instruction: EditInstruction,
    signals: &[Vec<f64>; 3],
    noise_scale: f64,
    seed: u64,
) -> Result<PatchFeatures> {
    let polarity = match instruction {
        EditInstruction::None => return Ok(patches.clone()),
        EditInstruction::ReplaceSignal { polarity } => polarity,
    };
    let d = patches.dim();
    if signals.iter().any(|s| s.len() != d) {
        return Err(CedError::shape(format!(
            "signal bank width does not match patch dimension {d}"
        )));
    }
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(CedError::config("image_edit_noise", "must be finite and non-negative"));
    }
    let (from, to) = (&signals[source_label.index()], &signals[polarity.index()]);
    let mut rng = derived_rng(seed, &[tag("image-edit")]);
    let mut out = patches.matrix().clone();
    for r in 0..out.rows() {
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            *v += to[c] - from[c];
            if noise_scale > 0.0 {
                let n: f64 = rng.sample(StandardNormal);
                *v += noise_scale * n;
            }
        }
    }
    Ok(PatchFeatures::new(out))
}

fn pick(rng: &mut ChaCha8Rng, words: &[usize]) -> Result<usize> {
    words
        .choose(rng)
        .copied()
        .ok_or_else(|| CedError::Data("lexicon has no word of the required class".into()))
}

/// Rule-based sentiment reversal of the sentence: causal words are swapped
/// for causal words of the requested polarity, or for fillers when the
/// request is neutral. When the source has no causal word, one is inserted
/// directly after the target span. Returns the new tokens, the edited
/// positions and whether a word was injected.
pub fn reverse_tokens(
    sample: &MultimodalSample,
    lexicon: &SentimentLexicon,
    target_label: Sentiment,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>, bool)> {
    let mut tokens = sample.tokens().to_vec();
    let target = sample.target_range();
    let causal_positions: Vec<usize> = (0..tokens.len())
        .filter(|i| !target.contains(i) && lexicon.is_causal(tokens[*i]))
        .collect();
    let replacements = if target_label == Sentiment::Neutral {
        lexicon.fillers()
    } else {
        lexicon.causal_words(target_label)
    };
    if causal_positions.is_empty() {
        if target_label == Sentiment::Neutral {
            return Ok((tokens, Vec::new(), false));
        }
        let at = target.end;
        tokens.insert(at, pick(rng, &replacements)?);
        return Ok((tokens, vec![at], true));
    }
    for &i in &causal_positions {
        tokens[i] = pick(rng, &replacements)?;
    }
    Ok((tokens, causal_positions, false))
}

pub fn reverse_sentiment_rule_based(
    sample: &MultimodalSample,
    lexicon: &SentimentLexicon,
    target_label: Sentiment,
    signals: &[Vec<f64>; 3],
    image_edit_noise: f64,
    edit_images: bool,
    seed: u64,
) -> Result<CounterfactualRecord> {
    if target_label == sample.label {
        return Err(CedError::Data(format!(
            "sample {}: reversal target equals its label `{}`",
            sample.id, target_label
        )));
    }
    let mut rng = derived_rng(seed, &[tag("reverse-text")]);
    let (tokens, edited, injected) = reverse_tokens(sample, lexicon, target_label, &mut rng)?;
    let instruction = if edit_images {
        EditInstruction::ReplaceSignal {
            polarity: target_label,
        }
    } else {
        EditInstruction::None
    };
    let image = edit_image_features(
        &sample.image,
        sample.label,
        instruction,
        signals,
        image_edit_noise,
        seed,
    )?;
    let new_sample = MultimodalSample::new(
        counterfactual_id(sample.id, target_label.index() as u64),
        tokens,
        sample.target_start,
        sample.target_len,
        image.into_matrix(),
        target_label,
        Provenance::SentiReversed,
    )?;
    Ok(CounterfactualRecord {
        source_id: sample.id,
        new_sample,
        new_label: target_label,
        edited_token_positions: edited,
        instruction,
        kind: CounterfactualKind::SentiReversed,
        op: None,
        injected,
        identity: false,
    })
}

fn synonym_of(lexicon: &SentimentLexicon, word: usize, rng: &mut ChaCha8Rng) -> Option<usize> {
    let others: Vec<usize> = lexicon
        .synonym_group(word)?
        .iter()
        .copied()
        .filter(|&w| w != word)
        .collect();
    others.choose(rng).copied()
}

/// Label-preserving edit of the biased words only. `rate` sets how many
/// biased words an operation touches, `max(1, round(rate·#biased))`, and
/// is the per-word removal probability for deletion. Swap falls back to
/// synonym replacement when fewer than two biased words exist; with no
/// biased word at all the record is an identity copy flagged as such.
pub fn invariant_augment(
    sample: &MultimodalSample,
    lexicon: &SentimentLexicon,
    choice: InvariantChoice,
    rate: f64,
    slot: u64,
    seed: u64,
) -> Result<CounterfactualRecord> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(CedError::config("invariant_rate", "must lie in [0, 1]"));
    }
    let mut rng = derived_rng(seed, &[tag("invariant")]);
    let source = sample.tokens();
    let target = sample.target_range();
    let biased: Vec<usize> = (0..source.len())
        .filter(|i| !target.contains(i) && lexicon.is_biased(source[*i]))
        .collect();

    let mut op = match choice {
        InvariantChoice::Fixed(op) => op,
        InvariantChoice::Random => InvariantOp::ALL[rng.gen_range(0..InvariantOp::ALL.len())],
    };
    if op == InvariantOp::RandomSwap && biased.len() < 2 {
        op = InvariantOp::SynonymReplace;
    }
    let identity = biased.is_empty();
    let n = ((rate * biased.len() as f64).round() as usize).max(1);

    // Tokens tagged with whether they belong to the target span, so the
    // span can be relocated after insertions and deletions.
    let mut tagged: Vec<(usize, bool)> = source
        .iter()
        .enumerate()
        .map(|(i, &w)| (w, target.contains(&i)))
        .collect();
    let mut edited = Vec::new();

    if !identity {
        match op {
            InvariantOp::SynonymReplace => {
                let mut order = biased.clone();
                order.shuffle(&mut rng);
                for &i in order.iter().take(n) {
                    if let Some(w) = synonym_of(lexicon, source[i], &mut rng) {
                        tagged[i].0 = w;
                        edited.push(i);
                    }
                }
            }
            InvariantOp::RandomInsert => {
                for _ in 0..n {
                    let from = source[*biased.choose(&mut rng).expect("non-empty")];
                    let word = synonym_of(lexicon, from, &mut rng).unwrap_or(from);
                    // Any slot outside the interior of the target span.
                    let start = tagged.iter().position(|t| t.1);
                    let slots: Vec<usize> = (0..=tagged.len())
                        .filter(|&k| match start {
                            Some(s) => k <= s || k >= s + sample.target_len,
                            None => true,
                        })
                        .collect();
                    let at = *slots.choose(&mut rng).expect("at least one slot");
                    tagged.insert(at, (word, false));
                    for e in edited.iter_mut() {
                        if *e >= at {
                            *e += 1;
                        }
                    }
                    edited.push(at);
                }
            }
            InvariantOp::RandomSwap => {
                for _ in 0..n {
                    let mut order = biased.clone();
                    order.shuffle(&mut rng);
                    let (a, b) = (order[0], order[1]);
                    tagged.swap(a, b);
                    edited.extend([a, b]);
                }
                edited.sort_unstable();
                edited.dedup();
            }
            InvariantOp::RandomDelete => {
                let drop: Vec<usize> = biased.iter().copied().filter(|_| rng.gen_bool(rate)).collect();
                for &i in drop.iter().rev() {
                    tagged.remove(i);
                }
                edited = drop;
            }
        }
    }

    let target_start = tagged
        .iter()
        .position(|t| t.1)
        .unwrap_or(sample.target_start.min(tagged.len()));
    let tokens: Vec<usize> = tagged.into_iter().map(|t| t.0).collect();
    let new_sample = MultimodalSample::new(
        counterfactual_id(sample.id, slot),
        tokens,
        target_start,
        sample.target_len,
        sample.image.matrix().clone(),
        sample.label,
        Provenance::SentiInvariant,
    )?;
    Ok(CounterfactualRecord {
        source_id: sample.id,
        new_sample,
        new_label: sample.label,
        edited_token_positions: edited,
        instruction: EditInstruction::None,
        kind: CounterfactualKind::SentiInvariant,
        op: if identity { None } else { Some(op) },
        injected: false,
        identity,
    })
}

/// Zero-noise image edit used by tests and the external backend when the
/// caller asks for an exact signal swap.
pub fn signal_delta(signals: &[Vec<f64>; 3], from: Sentiment, to: Sentiment) -> Vec<f64> {
    signals[to.index()]
        .iter()
        .zip(&signals[from.index()])
        .map(|(t, f)| t - f)
        .collect()
}

#[cfg(test)]
fn broadcast_rows(row: &[f64], rows: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, row.len());
    for r in 0..rows {
        m.row_mut(r).copy_from_slice(row);
    }
    m
}
