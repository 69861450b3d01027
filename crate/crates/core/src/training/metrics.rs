use serde::{Deserialize, Serialize};

use crate::error::{CedError, Result};
use crate::fusion_model::{Model, NUM_CLASSES};
use crate::synth_data::{MultimodalSample, Sentiment};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: [ClassScores; NUM_CLASSES],
    /// `confusion[true][predicted]`.
    pub confusion: [[u64; NUM_CLASSES]; NUM_CLASSES],
    pub count: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_predictions(labels: &[Sentiment], predicted: &[Sentiment]) -> Result<Self> {
        if labels.len() != predicted.len() {
            return Err(CedError::shape(format!(
                "{} labels for {} predictions",
                labels.len(),
                predicted.len()
            )));
        }
        if labels.is_empty() {
            return Err(CedError::Data("metrics over an empty sample set".into()));
        }
        let mut confusion = [[0u64; NUM_CLASSES]; NUM_CLASSES];
        for (y, p) in labels.iter().zip(predicted) {
            confusion[y.index()][p.index()] += 1;
        }
        Ok(Metrics::from_confusion(confusion))
    }

    pub fn from_confusion(confusion: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        let count: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
        let mut per_class = [ClassScores::default(); NUM_CLASSES];
        let mut f1_fractions = [(0u64, 1u64); NUM_CLASSES];
        for (c, scores) in per_class.iter_mut().enumerate() {
            let tp = confusion[c][c];
            let predicted: u64 = (0..NUM_CLASSES).map(|r| confusion[r][c]).sum();
            let actual: u64 = confusion[c].iter().sum();
            // 2PR/(P+R) == 2TP/(predicted + actual); zero when the class
            // never occurs on either side.
            let f1 = (2 * tp, (predicted + actual).max(1));
            f1_fractions[c] = f1;
            *scores = ClassScores {
                precision: ratio(tp, predicted),
                recall: ratio(tp, actual),
                f1: ratio(f1.0, f1.1),
            };
        }
        Metrics {
            accuracy: ratio(correct, count),
            macro_f1: mean_of_fractions(&f1_fractions)
                .unwrap_or_else(|| per_class.iter().map(|s| s.f1).sum::<f64>() / NUM_CLASSES as f64),
            per_class,
            confusion,
            count,
        }
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of `num/den` fractions as one correctly rounded division, when the
/// reduced result fits in 53 bits.
fn mean_of_fractions(parts: &[(u64, u64)]) -> Option<f64> {
    let (mut num, mut den) = (0u128, 1u128);
    for &(n, d) in parts {
        let (n, d) = (n as u128, d as u128);
        num = num.checked_mul(d)?.checked_add(n.checked_mul(den)?)?;
        den = den.checked_mul(d)?;
        let g = gcd(num, den).max(1);
        (num, den) = (num / g, den / g);
    }
    den = den.checked_mul(parts.len() as u128)?;
    let g = gcd(num, den).max(1);
    (num, den) = (num / g, den / g);
    const EXACT: u128 = 1 << 53;
    (num <= EXACT && den <= EXACT).then(|| num as f64 / den as f64)
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(probs: &[f64; NUM_CLASSES]) -> Sentiment {
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if probs[c] > probs[best] {
            best = c;
        }
    }
    Sentiment::from_index(best).expect("class index in range")
}

pub fn evaluate(model: &Model, samples: &[MultimodalSample]) -> Result<Metrics> {
    let predicted: Vec<Sentiment> = model.predict(samples)?.iter().map(argmax).collect();
    let labels: Vec<Sentiment> = samples.iter().map(|s| s.label).collect();
    Metrics::from_predictions(&labels, &predicted)
}

/// One-sided exact sign test that `a` tends to exceed `b` over paired
/// observations. Ties are dropped. Returns `(wins, losses, p_value)`.
pub fn sign_test(a: &[f64], b: &[f64]) -> Result<(usize, usize, f64)> {
    if a.len() != b.len() {
        return Err(CedError::shape("sign test needs paired observations"));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let n = wins + losses;
    // P(X >= wins) for X ~ Binomial(n, 1/2)
    let mut p = 0.0;
    for k in wins..=n {
        p += binomial(n, k) * 0.5f64.powi(n as i32);
    }
    Ok((wins, losses, if n == 0 { 1.0 } else { p }))
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Sentiment::*;

    #[test]
    fn worked_example() {
        let m = Metrics::from_predictions(&[Negative, Neutral, Positive], &[Negative, Neutral, Neutral]).unwrap();
        assert_eq!(m.accuracy, 2.0 / 3.0);
        assert_eq!(m.per_class[0].f1, 1.0);
        assert!((m.per_class[1].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.per_class[2].f1, 0.0);
        assert!((m.macro_f1 - 0.5555555555555556).abs() < 1e-15);
    }

    #[test]
    fn constant_predictions_score_the_class_share() {
        let labels = [Negative, Positive, Positive, Neutral, Positive];
        let m = Metrics::from_predictions(&labels, &[Positive; 5]).unwrap();
        assert_eq!(m.accuracy, 0.6);
        assert!(Metrics::from_predictions(&[], &[]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), Negative);
        assert_eq!(argmax(&[0.1, 0.3, 0.6]), Positive);
    }

    #[test]
    fn sign_test_values() {
        let (w, l, p) = sign_test(&[2.0, 3.0, 4.0, 5.0, 6.0], &[1.0; 5]).unwrap();
        assert_eq!((w, l), (5, 0));
        assert_eq!(p, 1.0 / 32.0);
        let (_, _, p) = sign_test(&[1.0, 2.0, 0.0, 3.0], &[0.0, 2.0, 1.0, 1.0]).unwrap();
        // two wins, one loss, one tie: P(X >= 2 | n = 3) = 4/8
        assert_eq!(p, 0.5);
        assert_eq!(sign_test(&[1.0], &[1.0]).unwrap().2, 1.0);
    }

    fn label() -> impl Strategy<Value = Sentiment> {
        (0usize..3).prop_map(|i| Sentiment::from_index(i).unwrap())
    }

    proptest! {
        #[test]
        fn scores_are_bounded_and_confusion_sums_to_count(
            pairs in prop::collection::vec((label(), label()), 1..60)
        ) {
            let (y, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let m = Metrics::from_predictions(&y, &p).unwrap();
            prop_assert_eq!(m.confusion.iter().flatten().sum::<u64>(), y.len() as u64);
            prop_assert!((0.0..=1.0).contains(&m.accuracy));
            prop_assert!((0.0..=1.0).contains(&m.macro_f1));
        }
    }
}
