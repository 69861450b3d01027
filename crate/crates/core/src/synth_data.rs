//! Synthetic biased multimodal corpus.
//!
//! Each sample's label decides three things: which causal words appear
//! (none for neutral), the image signal added to every patch, and, through
//! a per-word Bernoulli draw, which biased context words appear. A biased
//! word associated with label `a` is included with probability `ρ` when the
//! sample's association label is `a` and `(1-ρ)/2` otherwise. The
//! association label equals the true label except in the anti-biased split,
//! where it is the opposite label (negative and positive swap, neutral maps
//! to negative or positive with equal chance).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augmentation::SentimentLexicon;
use crate::encoders::{PatchFeatures, TokenSequence, CLS_ID};
use crate::error::{CedError, Result};
use crate::io_util::{read_to_string, write_atomic};
use crate::kv::{fmt_f64, fmt_list, parse_list, parse_value, KvConfig};
use crate::rng::{derived_rng, tag};
use crate::tensor_math::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Negative,
    Neutral,
    Positive,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Negative, Sentiment::Neutral, Sentiment::Positive];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Negative => "negative",
            Sentiment::Neutral => "neutral",
            Sentiment::Positive => "positive",
        }
    }

    pub fn short(self) -> &'static str {
        &self.as_str()[..3]
    }

    /// The other two labels, in index order.
    pub fn others(self) -> [Sentiment; 2] {
        match self {
            Sentiment::Negative => [Sentiment::Neutral, Sentiment::Positive],
            Sentiment::Neutral => [Sentiment::Negative, Sentiment::Positive],
            Sentiment::Positive => [Sentiment::Negative, Sentiment::Neutral],
        }
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sentiment {
    type Err = CedError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| CedError::Data(format!("unknown sentiment label `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    SentiReversed,
    SentiInvariant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub id: u64,
    pub sentence: TokenSequence,
    pub target_start: usize,
    pub target_len: usize,
    /// CLS followed by the target span.
    pub target_tokens: TokenSequence,
    pub image: PatchFeatures,
    pub label: Sentiment,
    pub provenance: Provenance,
}

impl MultimodalSample {
    pub fn new(
        id: u64,
        sentence: Vec<usize>,
        target_start: usize,
        target_len: usize,
        image: Matrix,
        label: Sentiment,
        provenance: Provenance,
    ) -> Result<Self> {
        if sentence.is_empty() {
            return Err(CedError::Data(format!("sample {id} has an empty sentence")));
        }
        let end = target_start
            .checked_add(target_len)
            .filter(|&e| e <= sentence.len())
            .ok_or_else(|| {
                CedError::Data(format!(
                    "sample {id}: target span {target_start}+{target_len} exceeds sentence length {}",
                    sentence.len()
                ))
            })?;
        let mut target = vec![CLS_ID];
        target.extend_from_slice(&sentence[target_start..end]);
        Ok(MultimodalSample {
            id,
            sentence: TokenSequence::new(sentence),
            target_start,
            target_len,
            target_tokens: TokenSequence::new(target),
            image: PatchFeatures::new(image),
            label,
            provenance,
        })
    }

    pub fn target_range(&self) -> std::ops::Range<usize> {
        self.target_start..self.target_start + self.target_len
    }

    pub fn tokens(&self) -> &[usize] {
        self.sentence.ids()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub causal_per_polarity: usize,
    pub biased_per_label: usize,
    pub filler_words: usize,
    pub sentence_len_min: usize,
    pub sentence_len_max: usize,
    pub causal_min: usize,
    pub causal_max: usize,
    pub target_len_min: usize,
    pub target_len_max: usize,
    /// ρ: inclusion probability of a biased word under its associated label.
    pub bias_strength: f64,
    pub label_distribution: [f64; 3],
    pub num_patches: usize,
    pub d_img: usize,
    /// Per-label image signal vectors, indexed like [`Sentiment::ALL`].
    pub signals: [Vec<f64>; 3],
    pub image_noise: f64,
    pub train: usize,
    pub validation: usize,
    pub test_biased: usize,
    pub test_anti_biased: usize,
    pub seed: u64,
}

const SIGNAL_SEED: u64 = 0x5151_6e61_6c73;

/// Fixed pseudo-random unit-scale signal vectors, one per label.
pub fn default_signals(d_img: usize) -> [Vec<f64>; 3] {
    let mut rng = derived_rng(SIGNAL_SEED, &[tag("image-signals"), d_img as u64]);
    let scale = 1.0 / (d_img.max(1) as f64).sqrt();
    let mut draw = || -> Vec<f64> {
        (0..d_img)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect()
    };
    [draw(), draw(), draw()]
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            causal_per_polarity: 15,
            biased_per_label: 10,
            filler_words: 59,
            sentence_len_min: 8,
            sentence_len_max: 14,
            causal_min: 1,
            causal_max: 2,
            target_len_min: 1,
            target_len_max: 2,
            bias_strength: 0.9,
            label_distribution: [1.0 / 3.0; 3],
            num_patches: 16,
            d_img: 16,
            signals: default_signals(16),
            image_noise: 3.0,
            train: 3000,
            validation: 500,
            test_biased: 500,
            test_anti_biased: 500,
            seed: 1,
        }
    }
}

impl CorpusSpec {
    pub fn vocab_size(&self) -> usize {
        1 + 2 * self.causal_per_polarity + 3 * self.biased_per_label + self.filler_words
    }

    /// Expected label shares `[neg, neu, pos]` among samples containing a
    /// biased word associated with `assoc`, under the training process.
    pub fn designed_label_shares(&self, assoc: Sentiment) -> [f64; 3] {
        let rho = self.bias_strength;
        let mut shares = [0.0; 3];
        for y in Sentiment::ALL {
            let p = if y == assoc { rho } else { (1.0 - rho) / 2.0 };
            shares[y.index()] = self.label_distribution[y.index()] * p;
        }
        let total: f64 = shares.iter().sum();
        if total > 0.0 {
            shares.iter_mut().for_each(|s| *s /= total);
        }
        shares
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::TestBiased => self.test_biased,
            Split::TestAntiBiased => self.test_anti_biased,
        }
    }
}

impl KvConfig for CorpusSpec {
    fn write_pairs(&self, out: &mut Vec<(String, String)>) {
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("causal_per_polarity", self.causal_per_polarity.to_string());
        put("biased_per_label", self.biased_per_label.to_string());
        put("filler_words", self.filler_words.to_string());
        put("sentence_len_min", self.sentence_len_min.to_string());
        put("sentence_len_max", self.sentence_len_max.to_string());
        put("causal_min", self.causal_min.to_string());
        put("causal_max", self.causal_max.to_string());
        put("target_len_min", self.target_len_min.to_string());
        put("target_len_max", self.target_len_max.to_string());
        put("bias_strength", fmt_f64(self.bias_strength));
        put("label_distribution", fmt_list(&self.label_distribution));
        put("num_patches", self.num_patches.to_string());
        put("d_img", self.d_img.to_string());
        for label in Sentiment::ALL {
            put(
                &format!("signal_{}", label.as_str()),
                fmt_list(&self.signals[label.index()]),
            );
        }
        put("image_noise", fmt_f64(self.image_noise));
        put("train", self.train.to_string());
        put("validation", self.validation.to_string());
        put("test_biased", self.test_biased.to_string());
        put("test_anti_biased", self.test_anti_biased.to_string());
        put("seed", self.seed.to_string());
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "causal_per_polarity" => self.causal_per_polarity = parse_value(key, value)?,
            "biased_per_label" => self.biased_per_label = parse_value(key, value)?,
            "filler_words" => self.filler_words = parse_value(key, value)?,
            "sentence_len_min" => self.sentence_len_min = parse_value(key, value)?,
            "sentence_len_max" => self.sentence_len_max = parse_value(key, value)?,
            "causal_min" => self.causal_min = parse_value(key, value)?,
            "causal_max" => self.causal_max = parse_value(key, value)?,
            "target_len_min" => self.target_len_min = parse_value(key, value)?,
            "target_len_max" => self.target_len_max = parse_value(key, value)?,
            "bias_strength" => self.bias_strength = parse_value(key, value)?,
            "label_distribution" => {
                let v = parse_list(key, value)?;
                self.label_distribution = v
                    .try_into()
                    .map_err(|_| CedError::config(key, "expected three values"))?;
            }
            "num_patches" => self.num_patches = parse_value(key, value)?,
            "d_img" => {
                // Signals follow the dimension unless given explicitly later.
                self.d_img = parse_value(key, value)?;
                self.signals = default_signals(self.d_img);
            }
            "signal_negative" => self.signals[0] = parse_list(key, value)?,
            "signal_neutral" => self.signals[1] = parse_list(key, value)?,
            "signal_positive" => self.signals[2] = parse_list(key, value)?,
            "image_noise" => self.image_noise = parse_value(key, value)?,
            "train" => self.train = parse_value(key, value)?,
            "validation" => self.validation = parse_value(key, value)?,
            "test_biased" => self.test_biased = parse_value(key, value)?,
            "test_anti_biased" => self.test_anti_biased = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(CedError::config(key, "unknown key")),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let err = |f: &str, m: &str| Err(CedError::config(f, m));
        if !(0.5..=1.0).contains(&self.bias_strength) {
            return err("bias_strength", "must lie in [0.5, 1]");
        }
        let dist = &self.label_distribution;
        if dist.iter().any(|p| !(*p >= 0.0)) || (dist.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return err("label_distribution", "must be non-negative and sum to 1");
        }
        for split in Split::ALL {
            if self.split_size(split) == 0 {
                return err(split.as_str(), "sample count must be positive");
            }
        }
        if self.sentence_len_min == 0 || self.sentence_len_min > self.sentence_len_max {
            return err("sentence_len_min", "need 1 <= sentence_len_min <= sentence_len_max");
        }
        if self.causal_min == 0 || self.causal_min > self.causal_max {
            return err("causal_min", "need 1 <= causal_min <= causal_max");
        }
        if self.target_len_min == 0 || self.target_len_min > self.target_len_max {
            return err("target_len_min", "need 1 <= target_len_min <= target_len_max");
        }
        if self.causal_per_polarity < self.causal_max {
            return err("causal_per_polarity", "vocabulary too small for causal_max");
        }
        if self.biased_per_label == 0 {
            return err("biased_per_label", "vocabulary needs at least one biased word per label");
        }
        if self.filler_words == 0 {
            return err("filler_words", "vocabulary needs filler words for targets and padding");
        }
        if self.num_patches == 0 || self.d_img == 0 {
            return err("num_patches", "image shape must be positive");
        }
        if !(self.image_noise >= 0.0 && self.image_noise.is_finite()) {
            return err("image_noise", "must be finite and non-negative");
        }
        for (i, s) in self.signals.iter().enumerate() {
            let field = format!("signal_{}", Sentiment::ALL[i].as_str());
            if s.len() != self.d_img {
                return Err(CedError::config(field, format!("expected {} values", self.d_img)));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(CedError::config(field, "values must be finite"));
            }
        }
        let [a, b, c] = &self.signals;
        if a == b || b == c || a == c {
            return err("signals", "signal vectors must be pairwise distinct");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    TestBiased,
    TestAntiBiased,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::Train,
        Split::Validation,
        Split::TestBiased,
        Split::TestAntiBiased,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::TestBiased => "test_biased",
            Split::TestAntiBiased => "test_anti_biased",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.as_str())
    }

    fn id_base(self) -> u64 {
        (self as u64 + 1) * 1_000_000
    }
}

impl FromStr for Split {
    type Err = CedError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| CedError::Data(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub spec: CorpusSpec,
    pub lexicon: SentimentLexicon,
    pub train: Vec<MultimodalSample>,
    pub validation: Vec<MultimodalSample>,
    pub test_biased: Vec<MultimodalSample>,
    pub test_anti_biased: Vec<MultimodalSample>,
}

impl DatasetBundle {
    pub fn split(&self, split: Split) -> &[MultimodalSample] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::TestBiased => &self.test_biased,
            Split::TestAntiBiased => &self.test_anti_biased,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<MultimodalSample> {
        match split {
            Split::Train => &mut self.train,
            Split::Validation => &mut self.validation,
            Split::TestBiased => &mut self.test_biased,
            Split::TestAntiBiased => &mut self.test_anti_biased,
        }
    }

    /// Checks id uniqueness across splits and that every sample fits the
    /// lexicon and image shape.
    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        for split in Split::ALL {
            for s in self.split(split) {
                if !ids.insert(s.id) {
                    return Err(CedError::Data(format!("duplicate sample id {}", s.id)));
                }
                validate_sample(s, &self.spec, self.lexicon.vocab_size())?;
            }
        }
        Ok(())
    }
}

pub fn validate_sample(s: &MultimodalSample, spec: &CorpusSpec, vocab_size: usize) -> Result<()> {
    s.sentence.validate(vocab_size)?;
    if s.target_start + s.target_len > s.sentence.len() {
        return Err(CedError::Data(format!("sample {}: target span out of bounds", s.id)));
    }
    let m = s.image.matrix();
    if m.shape() != (spec.num_patches, spec.d_img) || !m.is_finite() {
        return Err(CedError::Data(format!(
            "sample {}: image {:?}, expected finite {}x{}",
            s.id,
            m.shape(),
            spec.num_patches,
            spec.d_img
        )));
    }
    Ok(())
}

/// The label whose biased words an anti-biased sample receives.
fn opposite(label: Sentiment, rng: &mut impl Rng) -> Sentiment {
    match label {
        Sentiment::Negative => Sentiment::Positive,
        Sentiment::Positive => Sentiment::Negative,
        Sentiment::Neutral => {
            if rng.gen_bool(0.5) {
                Sentiment::Negative
            } else {
                Sentiment::Positive
            }
        }
    }
}

fn draw_label(dist: &[f64; 3], rng: &mut impl Rng) -> Sentiment {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for label in Sentiment::ALL {
        acc += dist[label.index()];
        if u < acc {
            return label;
        }
    }
    // Rounding in the cumulative sum: fall back to the last label with mass.
    *Sentiment::ALL
        .iter()
        .rev()
        .find(|l| dist[l.index()] > 0.0)
        .unwrap_or(&Sentiment::Positive)
}

/// `q x d_img` patches: the label's signal on every row plus isotropic
/// Gaussian noise.
pub fn sample_image(spec: &CorpusSpec, label: Sentiment, rng: &mut impl Rng) -> Matrix {
    let signal = &spec.signals[label.index()];
    let mut m = Matrix::zeros(spec.num_patches, spec.d_img);
    for r in 0..spec.num_patches {
        for (c, v) in m.row_mut(r).iter_mut().enumerate() {
            let n: f64 = rng.sample(StandardNormal);
            *v = signal[c] + spec.image_noise * n;
        }
    }
    m
}

fn generate_sample(
    spec: &CorpusSpec,
    lexicon: &SentimentLexicon,
    split: Split,
    index: usize,
) -> Result<MultimodalSample> {
    let id = split.id_base() + index as u64;
    let mut rng = derived_rng(spec.seed, &[tag("sample"), id]);
    let label = draw_label(&spec.label_distribution, &mut rng);
    let assoc = if split == Split::TestAntiBiased {
        opposite(label, &mut rng)
    } else {
        label
    };

    let causal = if label == Sentiment::Neutral {
        Vec::new()
    } else {
        let k = rng.gen_range(spec.causal_min..=spec.causal_max);
        let pool = lexicon.causal_words(label);
        pool.choose_multiple(&mut rng, k).copied().collect()
    };

    let rho = spec.bias_strength;
    let mut body: Vec<usize> = causal.clone();
    for b_label in Sentiment::ALL {
        let p = if b_label == assoc { rho } else { (1.0 - rho) / 2.0 };
        for w in lexicon.biased_words(b_label) {
            if rng.gen_bool(p) {
                body.push(w);
            }
        }
    }

    let fillers = lexicon.fillers();
    let target_len = rng.gen_range(spec.target_len_min..=spec.target_len_max);
    let target: Vec<usize> = (0..target_len)
        .map(|_| *fillers.choose(&mut rng).expect("validated non-empty"))
        .collect();
    let length = rng.gen_range(spec.sentence_len_min..=spec.sentence_len_max);
    let pad = length.saturating_sub(body.len() + target_len);
    body.extend((0..pad).map(|_| *fillers.choose(&mut rng).expect("validated non-empty")));
    body.shuffle(&mut rng);

    // The target goes immediately before a causal word when there is one.
    let target_start = match causal.first() {
        Some(&anchor) => body.iter().position(|&w| w == anchor).unwrap_or(0),
        None => rng.gen_range(0..=body.len()),
    };
    let mut sentence = body;
    sentence.splice(target_start..target_start, target);

    let image = sample_image(spec, label, &mut rng);
    MultimodalSample::new(
        id,
        sentence,
        target_start,
        target_len,
        image,
        label,
        Provenance::Original,
    )
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let lexicon = SentimentLexicon::build(spec);
    lexicon.validate()?;
    let mut bundle = DatasetBundle {
        spec: spec.clone(),
        lexicon,
        train: Vec::new(),
        validation: Vec::new(),
        test_biased: Vec::new(),
        test_anti_biased: Vec::new(),
    };
    for split in Split::ALL {
        let samples = (0..spec.split_size(split))
            .map(|i| generate_sample(spec, &bundle.lexicon, split, i))
            .collect::<Result<Vec<_>>>()?;
        *bundle.split_mut(split) = samples;
    }
    Ok(bundle)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasRow {
    pub word: usize,
    /// Occurrences in samples of each label, indexed like [`Sentiment::ALL`].
    pub counts: [u64; 3],
    /// Largest label share of this word's occurrences.
    pub skew: f64,
}

impl BiasRow {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn dominant(&self) -> Sentiment {
        let mut best = 0;
        for i in 1..3 {
            if self.counts[i] > self.counts[best] {
                best = i;
            }
        }
        Sentiment::ALL[best]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasReport {
    pub rows: Vec<BiasRow>,
}

impl BiasReport {
    pub fn total_occurrences(&self) -> u64 {
        self.rows.iter().map(BiasRow::total).sum()
    }

    pub fn row(&self, word: usize) -> Option<&BiasRow> {
        self.rows.iter().find(|r| r.word == word)
    }

    pub fn to_csv(&self, lexicon: &SentimentLexicon) -> String {
        let mut out = String::from("word,class,negative,neutral,positive,skew\n");
        for r in &self.rows {
            let class = match lexicon.class_of(r.word) {
                Some(crate::augmentation::WordClass::Causal(l)) => format!("causal_{}", l.short()),
                Some(crate::augmentation::WordClass::Biased(l)) => format!("biased_{}", l.short()),
                Some(crate::augmentation::WordClass::Filler) => "filler".to_string(),
                Some(crate::augmentation::WordClass::Cls) => "cls".to_string(),
                None => "unknown".to_string(),
            };
            out.push_str(&format!(
                "{},{class},{},{},{},{:.6}\n",
                lexicon.word(r.word),
                r.counts[0],
                r.counts[1],
                r.counts[2],
                r.skew
            ));
        }
        out
    }
}

/// Word/label co-occurrence counts over every token occurrence in the
/// samples, sorted by skew (descending) then word id.
pub fn bias_cooccurrence_report(samples: &[MultimodalSample]) -> Result<BiasReport> {
    if samples.is_empty() {
        return Err(CedError::Data("bias report over an empty sample set".into()));
    }
    let mut counts: std::collections::BTreeMap<usize, [u64; 3]> = Default::default();
    for s in samples {
        for &w in s.tokens() {
            counts.entry(w).or_default()[s.label.index()] += 1;
        }
    }
    let mut rows: Vec<BiasRow> = counts
        .into_iter()
        .map(|(word, counts)| {
            let total: u64 = counts.iter().sum();
            let max = *counts.iter().max().unwrap_or(&0);
            BiasRow {
                word,
                counts,
                skew: max as f64 / total as f64,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.skew.total_cmp(&a.skew).then(a.word.cmp(&b.word)));
    Ok(BiasReport { rows })
}

pub const DATASET_FORMAT: &str = "ced-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    /// Present when the file holds a single split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub spec: CorpusSpec,
    pub lexicon: SentimentLexicon,
}

impl DatasetHeader {
    pub fn new(spec: &CorpusSpec, lexicon: &SentimentLexicon, split: Option<Split>) -> Self {
        DatasetHeader {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            split,
            spec: spec.clone(),
            lexicon: lexicon.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: u64,
    split: Split,
    tokens: Vec<usize>,
    target_start: usize,
    target_len: usize,
    label: Sentiment,
    patches: Vec<f64>,
    provenance: Provenance,
}

pub(crate) fn sample_to_json(s: &MultimodalSample, split: Split) -> String {
    let record = SampleRecord {
        id: s.id,
        split,
        tokens: s.tokens().to_vec(),
        target_start: s.target_start,
        target_len: s.target_len,
        label: s.label,
        patches: s.image.matrix().as_slice().to_vec(),
        provenance: s.provenance,
    };
    serde_json::to_string(&record).expect("plain record serializes")
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> CedError {
    CedError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn header_to_json(header: &DatasetHeader) -> String {
    serde_json::to_string(header).expect("header serializes")
}

fn parse_header(text: &str, path: &Path) -> Result<DatasetHeader> {
    #[derive(Deserialize)]
    struct Probe {
        format: String,
        version: u32,
    }
    let probe: Probe = serde_json::from_str(text).map_err(|e| parse_error(path, 1, e.to_string()))?;
    if probe.format != DATASET_FORMAT {
        return Err(parse_error(path, 1, format!("unexpected format `{}`", probe.format)));
    }
    if probe.version != DATASET_VERSION {
        return Err(CedError::Version {
            found: probe.version,
            expected: DATASET_VERSION,
        });
    }
    let header: DatasetHeader =
        serde_json::from_str(text).map_err(|e| parse_error(path, 1, e.to_string()))?;
    header.spec.validate()?;
    header.lexicon.validate()?;
    Ok(header)
}

/// Renders a header line followed by one line per sample.
pub fn encode_jsonl(header: &DatasetHeader, samples: &[(Split, &MultimodalSample)]) -> String {
    let mut out = header_to_json(header);
    out.push('\n');
    for (split, s) in samples {
        out.push_str(&sample_to_json(s, *split));
        out.push('\n');
    }
    out
}

/// Parses text produced by [`encode_jsonl`].
pub fn decode_jsonl(text: &str, path: &Path) -> Result<(DatasetHeader, Vec<(Split, MultimodalSample)>)> {
    let mut lines = text.lines();
    let first = lines
        .next()
        .ok_or_else(|| parse_error(path, 1, "missing header line"))?;
    let header = parse_header(first, path)?;
    let (q, d) = (header.spec.num_patches, header.spec.d_img);
    let vocab = header.lexicon.vocab_size();
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let r: SampleRecord =
            serde_json::from_str(line).map_err(|e| parse_error(path, line_no, e.to_string()))?;
        let image = Matrix::from_vec(q, d, r.patches)
            .map_err(|e| parse_error(path, line_no, e.to_string()))?;
        let s = MultimodalSample::new(
            r.id,
            r.tokens,
            r.target_start,
            r.target_len,
            image,
            r.label,
            r.provenance,
        )
        .map_err(|e| parse_error(path, line_no, e.to_string()))?;
        validate_sample(&s, &header.spec, vocab).map_err(|e| parse_error(path, line_no, e.to_string()))?;
        samples.push((r.split, s));
    }
    Ok((header, samples))
}

pub fn encode_bundle(bundle: &DatasetBundle) -> String {
    let header = DatasetHeader::new(&bundle.spec, &bundle.lexicon, None);
    let samples: Vec<(Split, &MultimodalSample)> = Split::ALL
        .into_iter()
        .flat_map(|split| bundle.split(split).iter().map(move |s| (split, s)))
        .collect();
    encode_jsonl(&header, &samples)
}

/// Writes the whole bundle as one JSONL file.
pub fn write_jsonl(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    write_atomic(path, encode_bundle(bundle).as_bytes())
}

pub fn read_jsonl(path: &Path) -> Result<DatasetBundle> {
    let text = read_to_string(path)?;
    let (header, samples) = decode_jsonl(&text, path)?;
    let mut bundle = DatasetBundle {
        spec: header.spec,
        lexicon: header.lexicon,
        train: Vec::new(),
        validation: Vec::new(),
        test_biased: Vec::new(),
        test_anti_biased: Vec::new(),
    };
    for (split, s) in samples {
        bundle.split_mut(split).push(s);
    }
    bundle.validate()?;
    Ok(bundle)
}

/// Writes one file per split into `dir`.
pub fn write_split_files(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    for split in Split::ALL {
        let header = DatasetHeader::new(&bundle.spec, &bundle.lexicon, Some(split));
        let samples: Vec<_> = bundle.split(split).iter().map(|s| (split, s)).collect();
        write_atomic(&dir.join(split.file_name()), encode_jsonl(&header, &samples).as_bytes())?;
    }
    Ok(())
}

/// Reads the four per-split files written by [`write_split_files`].
pub fn read_split_files(dir: &Path) -> Result<DatasetBundle> {
    let mut bundle: Option<DatasetBundle> = None;
    for split in Split::ALL {
        let path = dir.join(split.file_name());
        let (header, samples) = decode_jsonl(&read_to_string(&path)?, &path)?;
        if header.split != Some(split) {
            return Err(parse_error(&path, 1, format!("header does not name split `{}`", split.as_str())));
        }
        let b = bundle.get_or_insert_with(|| DatasetBundle {
            spec: header.spec.clone(),
            lexicon: header.lexicon.clone(),
            train: Vec::new(),
            validation: Vec::new(),
            test_biased: Vec::new(),
            test_anti_biased: Vec::new(),
        });
        if b.spec != header.spec || b.lexicon != header.lexicon {
            return Err(parse_error(&path, 1, "spec or lexicon differs from the other splits"));
        }
        for (s_split, s) in samples {
            if s_split != split {
                return Err(CedError::Data(format!(
                    "{}: sample {} belongs to split `{}`",
                    path.display(),
                    s.id,
                    s_split.as_str()
                )));
            }
            b.split_mut(split).push(s);
        }
    }
    let bundle = bundle.expect("four splits read");
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::WordClass;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            train: 300,
            validation: 20,
            test_biased: 20,
            test_anti_biased: 200,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn samples_are_well_formed() {
        let spec = small_spec();
        let bundle = generate_corpus(&spec).unwrap();
        bundle.validate().unwrap();
        let lex = &bundle.lexicon;
        for s in bundle.train.iter().chain(&bundle.test_anti_biased) {
            assert!(s.tokens().len() >= spec.sentence_len_min);
            let causal: Vec<_> = s.tokens().iter().filter(|&&w| lex.is_causal(w)).collect();
            match s.label {
                Sentiment::Neutral => assert!(causal.is_empty()),
                l => {
                    assert!((spec.causal_min..=spec.causal_max).contains(&causal.len()));
                    assert!(causal.iter().all(|&&w| lex.class_of(w) == Some(WordClass::Causal(l))));
                    // Target sits right before a causal word.
                    let next = s.tokens()[s.target_range().end];
                    assert!(lex.is_causal(next));
                }
            }
            assert_eq!(&s.target_tokens.ids()[1..], &s.tokens()[s.target_range()]);
            assert_eq!(s.target_tokens.ids()[0], CLS_ID);
        }
    }

    #[test]
    fn anti_biased_split_inverts_association() {
        let bundle = generate_corpus(&small_spec()).unwrap();
        let lex = &bundle.lexicon;
        let share = |samples: &[MultimodalSample]| {
            let (mut hit, mut total) = (0usize, 0usize);
            for s in samples {
                for &w in s.tokens() {
                    if let Some(WordClass::Biased(a)) = lex.class_of(w) {
                        total += 1;
                        hit += usize::from(a == s.label);
                    }
                }
            }
            hit as f64 / total as f64
        };
        assert!(share(&bundle.train) > 0.8);
        assert!(share(&bundle.test_anti_biased) < 0.2);
    }

    #[test]
    fn report_counts_are_conserved() {
        let bundle = generate_corpus(&small_spec()).unwrap();
        let report = bias_cooccurrence_report(&bundle.train).unwrap();
        let tokens: usize = bundle.train.iter().map(|s| s.tokens().len()).sum();
        assert_eq!(report.total_occurrences(), tokens as u64);
        for pair in report.rows.windows(2) {
            assert!(pair[0].skew >= pair[1].skew);
        }
    }

    #[test]
    fn word_seen_with_one_label_has_full_skew() {
        let img = Matrix::zeros(1, 1);
        let s = |id, label| {
            MultimodalSample::new(id, vec![5, 6], 0, 1, img.clone(), label, Provenance::Original).unwrap()
        };
        let report =
            bias_cooccurrence_report(&[s(1, Sentiment::Positive), s(2, Sentiment::Positive)]).unwrap();
        assert_eq!(report.row(5).unwrap().skew, 1.0);
        assert!(bias_cooccurrence_report(&[]).is_err());
    }

    #[test]
    fn spec_validation_names_the_field() {
        let spec = CorpusSpec {
            bias_strength: 1.3,
            ..CorpusSpec::default()
        };
        match spec.validate() {
            Err(CedError::Config { field, .. }) => assert_eq!(field, "bias_strength"),
            other => panic!("unexpected {other:?}"),
        }
        let tiny = CorpusSpec {
            causal_per_polarity: 1,
            ..CorpusSpec::default()
        };
        assert!(generate_corpus(&tiny).is_err());
        let same = CorpusSpec {
            signals: [vec![0.0; 16], vec![0.0; 16], vec![1.0; 16]],
            ..CorpusSpec::default()
        };
        assert!(same.validate().is_err());
    }

    #[test]
    fn spec_kv_round_trip() {
        let spec = CorpusSpec {
            bias_strength: 0.75,
            seed: 99,
            ..CorpusSpec::default()
        };
        let text = spec.to_kv_string();
        let back = CorpusSpec::from_kv_str(&text, Path::new("spec.txt")).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn jsonl_errors_carry_line_numbers() {
        let bundle = generate_corpus(&CorpusSpec {
            train: 3,
            validation: 1,
            test_biased: 1,
            test_anti_biased: 1,
            ..CorpusSpec::default()
        })
        .unwrap();
        let text = encode_bundle(&bundle);
        let mut lines: Vec<&str> = text.lines().collect();
        lines[3] = "{not json";
        let broken = lines.join("\n");
        match decode_jsonl(&broken, Path::new("x.jsonl")) {
            Err(CedError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        let bumped = text.replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(
            decode_jsonl(&bumped, Path::new("x.jsonl")),
            Err(CedError::Version { found: 9, .. })
        ));
    }
}
