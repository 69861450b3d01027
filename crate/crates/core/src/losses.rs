//! Classification and contrastive objectives.
//!
//! The contrastive loss works on plain vectors rather than tape nodes: it
//! returns its value together with gradients for every `h` and `z` in the
//! batch, and the trainer attaches those to the tape as one scalar node.
//!
//! For an anchor `i` with positives `P` (same label, excluding `i`) and
//! negatives `N` (different label):
//!
//! ```text
//! L_i = -1/|P| Σ_p log( exp(z_i·z_p/τ) / Σ_n w_in exp(z_i·z_n/τ) )
//! w_in = exp(-‖h_i - h_n‖)
//! ```
//!
//! The denominator covers negatives only unless
//! `denominator_includes_positive` is set, in which case the positive's own
//! term `exp(z_i·z_p/τ)` joins the sum with weight one.

use log::debug;

use crate::error::{CedError, Result};
use crate::fusion_model::NUM_CLASSES;
use crate::synth_data::Sentiment;
use crate::tensor_math::{dot, euclidean_distance};

/// Adaptive weight of a negative: `exp(-‖a - b‖₂)`.
pub fn pair_weight(h_anchor: &[f64], h_neg: &[f64]) -> Result<f64> {
    if h_anchor.len() != h_neg.len() {
        return Err(CedError::shape(format!(
            "pair weight over lengths {} and {}",
            h_anchor.len(),
            h_neg.len()
        )));
    }
    Ok((-euclidean_distance(h_anchor, h_neg)).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveAnchor {
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub label: Sentiment,
    pub sample_id: u64,
}

#[derive(Clone, Debug)]
pub struct ContrastiveBatchView {
    pub anchors: Vec<ContrastiveAnchor>,
    pub temperature: f64,
    pub denominator_includes_positive: bool,
    /// Forces every pair weight to one.
    pub uniform_weights: bool,
}

impl ContrastiveBatchView {
    pub fn new(anchors: Vec<ContrastiveAnchor>, temperature: f64) -> Self {
        ContrastiveBatchView {
            anchors,
            temperature,
            denominator_includes_positive: false,
            uniform_weights: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(CedError::config("temperature", "must be positive and finite"));
        }
        let Some(first) = self.anchors.first() else {
            return Ok(());
        };
        let (dz, dh) = (first.z.len(), first.h.len());
        for a in &self.anchors {
            if a.z.len() != dz || a.h.len() != dh {
                return Err(CedError::shape(format!(
                    "anchor {} has z/h lengths {}/{}, expected {dz}/{dh}",
                    a.sample_id,
                    a.z.len(),
                    a.h.len()
                )));
            }
        }
        Ok(())
    }

    fn log_weight(&self, i: usize, n: usize) -> Result<(f64, f64)> {
        if self.uniform_weights {
            return Ok((0.0, 0.0));
        }
        let d = euclidean_distance(&self.anchors[i].h, &self.anchors[n].h);
        Ok((-d, d))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// Anchors with no positive or no negative in the batch.
    pub skipped: usize,
    pub grad_z: Vec<Vec<f64>>,
    pub grad_h: Vec<Vec<f64>>,
}

/// Batch contrastive loss and the number of skipped anchors.
pub fn adaptive_contrastive_loss(view: &ContrastiveBatchView) -> Result<(f64, usize)> {
    let out = adaptive_contrastive_loss_with_grad(view)?;
    Ok((out.loss, out.skipped))
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn adaptive_contrastive_loss_with_grad(view: &ContrastiveBatchView) -> Result<ContrastiveOutput> {
    view.validate()?;
    let b = view.anchors.len();
    let tau = view.temperature;
    let dz = view.anchors.first().map_or(0, |a| a.z.len());
    let dh = view.anchors.first().map_or(0, |a| a.h.len());
    let mut grad_z = vec![vec![0.0; dz]; b];
    let mut grad_h = vec![vec![0.0; dh]; b];

    // Coefficients dL_i/ds_ij and dL_i/dd_ij, scaled by 1/|A| at the end.
    let mut coef_s = vec![vec![0.0; b]; b];
    let mut coef_d = vec![vec![0.0; b]; b];
    let mut distances = vec![vec![0.0; b]; b];
    let mut total = 0.0;
    let mut active = 0usize;

    for i in 0..b {
        let anchor = &view.anchors[i];
        let positives: Vec<usize> = (0..b)
            .filter(|&j| j != i && view.anchors[j].label == anchor.label)
            .collect();
        let negatives: Vec<usize> = (0..b)
            .filter(|&j| view.anchors[j].label != anchor.label)
            .collect();
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        active += 1;
        let inv_p = 1.0 / positives.len() as f64;

        // Exponents of the weighted negative terms: s_in/τ + ln w_in.
        let mut neg_exp = Vec::with_capacity(negatives.len());
        for &n in &negatives {
            let (log_w, d) = view.log_weight(i, n)?;
            distances[i][n] = d;
            neg_exp.push(dot(&anchor.z, &view.anchors[n].z) / tau + log_w);
        }

        let mut loss_i = 0.0;
        if view.denominator_includes_positive {
            let mut terms = neg_exp.clone();
            terms.push(0.0);
            for &p in &positives {
                let sp = dot(&anchor.z, &view.anchors[p].z) / tau;
                *terms.last_mut().unwrap() = sp;
                let lse = log_sum_exp(&terms);
                loss_i += inv_p * (lse - sp);
                // Softmax over {negatives, this positive}.
                let alpha_p = (sp - lse).exp();
                coef_s[i][p] += inv_p * (alpha_p - 1.0) / tau;
                for (k, &n) in negatives.iter().enumerate() {
                    let alpha = (neg_exp[k] - lse).exp();
                    coef_s[i][n] += inv_p * alpha / tau;
                    coef_d[i][n] -= inv_p * alpha;
                }
            }
        } else {
            let lse = log_sum_exp(&neg_exp);
            for &p in &positives {
                let sp = dot(&anchor.z, &view.anchors[p].z) / tau;
                loss_i += inv_p * (lse - sp);
                coef_s[i][p] -= inv_p / tau;
            }
            for (k, &n) in negatives.iter().enumerate() {
                let alpha = (neg_exp[k] - lse).exp();
                coef_s[i][n] += alpha / tau;
                coef_d[i][n] -= alpha;
            }
        }
        total += loss_i;
    }

    let skipped = b - active;
    if active == 0 {
        debug!("contrastive batch of {b} anchors has no usable anchor");
        return Ok(ContrastiveOutput {
            loss: 0.0,
            skipped,
            grad_z,
            grad_h,
        });
    }
    let scale = 1.0 / active as f64;
    for i in 0..b {
        for j in 0..b {
            let cs = coef_s[i][j] * scale;
            if cs != 0.0 {
                for k in 0..dz {
                    grad_z[i][k] += cs * view.anchors[j].z[k];
                    grad_z[j][k] += cs * view.anchors[i].z[k];
                }
            }
            let cd = coef_d[i][j] * scale;
            let d = distances[i][j];
            if cd != 0.0 && d > 0.0 {
                for k in 0..dh {
                    let u = (view.anchors[i].h[k] - view.anchors[j].h[k]) / d;
                    grad_h[i][k] += cd * u;
                    grad_h[j][k] -= cd * u;
                }
            }
        }
    }
    Ok(ContrastiveOutput {
        loss: total * scale,
        skipped,
        grad_z,
        grad_h,
    })
}

/// Weighted denominator terms `w_in·exp(z_i·z_n/τ)` of one anchor, keyed by
/// the negative's sample id.
pub fn denominator_terms(view: &ContrastiveBatchView, anchor: usize) -> Result<Vec<(u64, f64)>> {
    view.validate()?;
    let a = view
        .anchors
        .get(anchor)
        .ok_or_else(|| CedError::shape(format!("anchor index {anchor} out of range")))?;
    let mut out = Vec::new();
    for (n, other) in view.anchors.iter().enumerate() {
        if other.label != a.label {
            let (log_w, _) = view.log_weight(anchor, n)?;
            out.push((other.sample_id, (dot(&a.z, &other.z) / view.temperature + log_w).exp()));
        }
    }
    Ok(out)
}

pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    /// Samples whose true-class probability was clamped to the floor.
    pub clamped: usize,
}

/// Mean negative log-likelihood of the true labels.
pub fn cross_entropy(probs: &[[f64; NUM_CLASSES]], labels: &[Sentiment]) -> Result<CrossEntropy> {
    if probs.len() != labels.len() {
        return Err(CedError::shape(format!(
            "{} predictions for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(CedError::shape("cross-entropy over an empty batch"));
    }
    let mut sum = 0.0;
    let mut clamped = 0;
    for (p, y) in probs.iter().zip(labels) {
        let total: f64 = p.iter().sum();
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (total - 1.0).abs() > 1e-9 {
            return Err(CedError::Data(format!("not a probability vector: {p:?}")));
        }
        let mut q = p[y.index()];
        if q < PROB_FLOOR {
            q = PROB_FLOOR;
            clamped += 1;
        }
        sum -= q.ln();
    }
    Ok(CrossEntropy {
        value: sum / probs.len() as f64,
        clamped,
    })
}

/// Cross-entropy computed from logits with a stable log-softmax, and its
/// gradient `(softmax - onehot)/B` per row.
pub fn softmax_cross_entropy_with_grad(
    logits: &[[f64; NUM_CLASSES]],
    labels: &[Sentiment],
) -> Result<(f64, Vec<[f64; NUM_CLASSES]>)> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(CedError::shape(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let inv_b = 1.0 / logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (row, y) in logits.iter().zip(labels) {
        let lse = log_sum_exp(row);
        loss -= row[y.index()] - lse;
        let mut g = [0.0; NUM_CLASSES];
        for (c, gc) in g.iter_mut().enumerate() {
            let p = (row[c] - lse).exp();
            *gc = (p - f64::from(c == y.index())) * inv_b;
        }
        grads.push(g);
    }
    Ok((loss * inv_b, grads))
}

pub fn total_loss(l_s: f64, l_c: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(CedError::config("lambda", "must be non-negative"));
    }
    Ok(l_s + lambda * l_c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_c: f64,
    pub l_total: f64,
    pub lambda: f64,
    pub skipped_anchors: usize,
}

impl LossBreakdown {
    pub fn new(l_s: f64, l_c: f64, lambda: f64, skipped_anchors: usize) -> Result<Self> {
        Ok(LossBreakdown {
            l_s,
            l_c,
            l_total: total_loss(l_s, l_c, lambda)?,
            lambda,
            skipped_anchors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Sentiment::*;

    fn anchor(id: u64, label: Sentiment, z: &[f64], h: &[f64]) -> ContrastiveAnchor {
        ContrastiveAnchor {
            h: h.to_vec(),
            z: z.to_vec(),
            label,
            sample_id: id,
        }
    }

    #[test]
    fn pair_weight_examples() {
        assert_eq!(pair_weight(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        let w = pair_weight(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((w - 0.006_737_946_999_085_467).abs() < 1e-15);
        let (a, b) = ([0.3, -0.2], [1.0, 0.4]);
        let w1 = pair_weight(&a, &b).unwrap();
        let w2 = pair_weight(&[0.6, -0.4], &[2.0, 0.8]).unwrap();
        assert!(w2 < w1);
        assert!(pair_weight(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn same_label_pair_is_skipped() {
        let view = ContrastiveBatchView::new(
            vec![anchor(1, Positive, &[1.0, 0.0], &[0.0]), anchor(2, Positive, &[0.0, 1.0], &[1.0])],
            0.07,
        );
        assert_eq!(adaptive_contrastive_loss(&view).unwrap(), (0.0, 2));
    }

    #[test]
    fn three_anchor_hand_value() {
        // Anchors 0 and 1 share a label; anchor 2 has no positive.
        let z = [[0.6, 0.8], [1.0, 0.0], [0.0, 1.0]];
        let h = [[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]];
        let tau = 0.5;
        let view = ContrastiveBatchView::new(
            vec![
                anchor(0, Positive, &z[0], &h[0]),
                anchor(1, Positive, &z[1], &h[1]),
                anchor(2, Negative, &z[2], &h[2]),
            ],
            tau,
        );
        let (loss, skipped) = adaptive_contrastive_loss(&view).unwrap();
        assert_eq!(skipped, 1);
        // L_0 = -s01/τ + s02/τ - d02, L_1 = -s10/τ + s12/τ - d12.
        let l0 = -0.6 / tau + 0.8 / tau - 2.0;
        let l1 = -0.6 / tau + 0.0 / tau - 5f64.sqrt();
        assert!((loss - (l0 + l1) / 2.0).abs() < 1e-12);
        assert!(loss < 0.0, "literal form is not clamped");
    }

    #[test]
    fn farther_negative_contributes_less() {
        let mk = |far: f64| {
            ContrastiveBatchView::new(
                vec![
                    anchor(0, Neutral, &[1.0, 0.0], &[0.0, 0.0]),
                    anchor(1, Neutral, &[0.8, 0.6], &[0.1, 0.0]),
                    anchor(2, Negative, &[0.0, 1.0], &[far, 0.0]),
                ],
                0.07,
            )
        };
        let near = denominator_terms(&mk(0.5), 0).unwrap()[0].1;
        let far = denominator_terms(&mk(1.5), 0).unwrap()[0].1;
        assert!(far < near);
    }

    fn random_view(seed: u64, includes_positive: bool) -> ContrastiveBatchView {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let anchors = (0..5)
            .map(|i| {
                let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let h: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                anchor(i, Sentiment::ALL[rng.gen_range(0..2)], &z, &h)
            })
            .collect();
        ContrastiveBatchView {
            denominator_includes_positive: includes_positive,
            ..ContrastiveBatchView::new(anchors, 0.3)
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for includes_positive in [false, true] {
            let view = random_view(11, includes_positive);
            let out = adaptive_contrastive_loss_with_grad(&view).unwrap();
            let eps = 1e-6;
            for i in 0..view.anchors.len() {
                for k in 0..3 {
                    let mut v = view.clone();
                    v.anchors[i].z[k] += eps;
                    let up = adaptive_contrastive_loss(&v).unwrap().0;
                    v.anchors[i].z[k] -= 2.0 * eps;
                    let down = adaptive_contrastive_loss(&v).unwrap().0;
                    let fd = (up - down) / (2.0 * eps);
                    assert!((fd - out.grad_z[i][k]).abs() < 1e-7, "z[{i}][{k}]");
                }
                for k in 0..4 {
                    let mut v = view.clone();
                    v.anchors[i].h[k] += eps;
                    let up = adaptive_contrastive_loss(&v).unwrap().0;
                    v.anchors[i].h[k] -= 2.0 * eps;
                    let down = adaptive_contrastive_loss(&v).unwrap().0;
                    let fd = (up - down) / (2.0 * eps);
                    assert!((fd - out.grad_h[i][k]).abs() < 1e-7, "h[{i}][{k}]");
                }
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let third = 1.0 / 3.0;
        let ce = cross_entropy(&[[1.0, 0.0, 0.0]], &[Negative]).unwrap();
        assert_eq!(ce.value, 0.0);
        let ce = cross_entropy(&[[third, third, third]], &[Positive]).unwrap();
        assert!((ce.value - 1.098_612_288_668_109_8).abs() < 1e-12);
        let ce = cross_entropy(&[[0.5, 0.25, 0.25], [0.5, 0.25, 0.25]], &[Negative, Neutral]).unwrap();
        assert!((ce.value - 1.039_720_770_839_917_9).abs() < 1e-12);
        let ce = cross_entropy(&[[0.0, 1.0, 0.0]], &[Negative]).unwrap();
        assert_eq!(ce.clamped, 1);
        assert!(ce.value.is_finite());
        assert!(cross_entropy(&[[0.5, 0.6, 0.0]], &[Negative]).is_err());
    }

    #[test]
    fn logit_cross_entropy_agrees_with_probabilities() {
        let logits = [[0.3, -1.0, 2.0], [5.0, 0.0, 0.1]];
        let labels = [Positive, Neutral];
        let (loss, grads) = softmax_cross_entropy_with_grad(&logits, &labels).unwrap();
        let probs: Vec<[f64; 3]> = logits
            .iter()
            .map(|l| crate::fusion_model::probabilities(l).unwrap())
            .collect();
        assert!((loss - cross_entropy(&probs, &labels).unwrap().value).abs() < 1e-12);
        assert!((grads[1][1] - (probs[1][1] - 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.7, 123.0, 0.0).unwrap(), 0.7);
        assert!((total_loss(1.0, 0.5, 0.8).unwrap() - 1.4).abs() < 1e-15);
        assert!(total_loss(1.0, 0.5, -0.1).is_err());
        let b = LossBreakdown::new(1.0, 0.5, 0.8, 0).unwrap();
        assert_eq!(b.l_total, b.l_s + b.lambda * b.l_c);
    }

    proptest! {
        #[test]
        fn pair_weight_bounded_and_symmetric(
            a in prop::collection::vec(-50.0f64..50.0, 4),
            b in prop::collection::vec(-50.0f64..50.0, 4),
        ) {
            let w = pair_weight(&a, &b).unwrap();
            prop_assert!(w >= 0.0 && w <= 1.0);
            prop_assert_eq!(w, pair_weight(&b, &a).unwrap());
        }

        #[test]
        fn loss_is_permutation_invariant(seed in 0u64..500, rot in 1usize..5) {
            let view = random_view(seed, false);
            let mut rotated = view.clone();
            rotated.anchors.rotate_left(rot);
            let a = adaptive_contrastive_loss(&view).unwrap();
            let b = adaptive_contrastive_loss(&rotated).unwrap();
            prop_assert!((a.0 - b.0).abs() < 1e-12);
            prop_assert_eq!(a.1, b.1);
        }
    }
}
