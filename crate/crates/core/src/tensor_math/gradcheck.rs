use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{CedError, Result};

/// Gradient magnitudes below this are compared in absolute terms: the
/// relative error of a coordinate is `|a - n| / max(|a|, |n|, floor)`.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub param_name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub probe_count: usize,
    /// Probes where the loss was not finite at `θ ± eps`; excluded from the
    /// error maxima.
    pub non_finite: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.non_finite == 0 && self.max_rel_err < rel_tol
    }
}

pub fn central_difference(f_plus: f64, f_minus: f64, eps: f64) -> f64 {
    (f_plus - f_minus) / (2.0 * eps)
}

/// Compares analytic gradients against central finite differences.
///
/// `loss_fn` evaluates the loss and its analytic gradient (one matrix per
/// parameter, same order and shapes as `params`). The analytic gradient is
/// taken once at `params`; each probe then perturbs a single coordinate by
/// `±eps`. Probe coordinates are drawn per tensor from a generator seeded
/// with `seed` and the tensor index, so reports are reproducible.
pub fn grad_check<F>(
    names: &[String],
    params: &[Matrix],
    mut loss_fn: F,
    eps: f64,
    probes: usize,
    seed: u64,
) -> Result<Vec<GradCheckReport>>
where
    F: FnMut(&[Matrix]) -> Result<(f64, Vec<Matrix>)>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(CedError::config("eps", "must lie in [1e-7, 1e-3]"));
    }
    if probes == 0 {
        return Err(CedError::config("probes", "must be at least 1"));
    }
    if names.len() != params.len() {
        return Err(CedError::shape("one name per parameter tensor"));
    }

    let (_, analytic) = loss_fn(params)?;
    if analytic.len() != params.len()
        || analytic.iter().zip(params).any(|(g, p)| g.shape() != p.shape())
    {
        return Err(CedError::shape("analytic gradient does not match parameters"));
    }

    let mut work: Vec<Matrix> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (t, name) in names.iter().enumerate() {
        let n = params[t].len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let coords = sample(&mut rng, n, probes.min(n)).into_vec();

        let mut report = GradCheckReport {
            param_name: name.clone(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            probe_count: coords.len(),
            non_finite: 0,
        };
        for idx in coords {
            let original = work[t].as_slice()[idx];
            work[t].as_mut_slice()[idx] = original + eps;
            let (f_plus, _) = loss_fn(&work)?;
            work[t].as_mut_slice()[idx] = original - eps;
            let (f_minus, _) = loss_fn(&work)?;
            work[t].as_mut_slice()[idx] = original;

            if !f_plus.is_finite() || !f_minus.is_finite() {
                report.non_finite += 1;
                continue;
            }
            let numeric = central_difference(f_plus, f_minus, eps);
            let a = analytic[t].as_slice()[idx];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
        }
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn half_squared_norm() {
        let params = vec![
            Matrix::from_vec(2, 3, vec![0.3, -1.2, 2.0, 0.7, -0.1, 4.5]).unwrap(),
            Matrix::row_vector(&[1.0, -2.0]),
        ];
        let reports = grad_check(
            &names(2),
            &params,
            |ps| {
                let v = ps
                    .iter()
                    .flat_map(|m| m.as_slice())
                    .map(|x| 0.5 * x * x)
                    .sum();
                Ok((v, ps.to_vec()))
            },
            1e-5,
            4,
            7,
        )
        .unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].probe_count, 4);
        assert_eq!(reports[1].probe_count, 2);
        for r in &reports {
            assert!(r.max_rel_err < 1e-8, "{r:?}");
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let params = vec![Matrix::filled(3, 3, 0.5)];
        let reports = grad_check(
            &names(1),
            &params,
            |ps| Ok((42.0, vec![Matrix::zeros(3, 3); ps.len()])),
            1e-4,
            9,
            1,
        )
        .unwrap();
        assert!(reports[0].max_abs_err < 1e-9);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let params = vec![Matrix::row_vector(&[1.0, 2.0])];
        let reports = grad_check(
            &names(1),
            &params,
            |ps| {
                let x = ps[0].as_slice();
                // true gradient is (2 x0, 1)
                let g = Matrix::row_vector(&[x[0], 1.0]);
                Ok((x[0] * x[0] + x[1], vec![g]))
            },
            1e-5,
            2,
            3,
        )
        .unwrap();
        assert!(reports[0].max_rel_err > 0.4);
    }

    #[test]
    fn non_finite_probes_are_reported() {
        let params = vec![Matrix::row_vector(&[0.0])];
        let reports = grad_check(
            &names(1),
            &params,
            |ps| {
                let x = ps[0].get(0, 0);
                let v = if x > 0.0 { f64::NAN } else { x };
                Ok((v, vec![Matrix::row_vector(&[1.0])]))
            },
            1e-5,
            1,
            0,
        )
        .unwrap();
        assert_eq!(reports[0].non_finite, 1);
        assert!(!reports[0].passes(1e-4));
    }

    #[test]
    fn deterministic_given_seed() {
        let params = vec![Matrix::from_vec(4, 4, (0..16).map(|i| i as f64 * 0.1).collect()).unwrap()];
        let f = |ps: &[Matrix]| {
            let v: f64 = ps[0].as_slice().iter().map(|x| x.sin()).sum();
            Ok((v, vec![ps[0].map(f64::cos)]))
        };
        let a = grad_check(&names(1), &params, f, 1e-5, 5, 11).unwrap();
        let b = grad_check(&names(1), &params, f, 1e-5, 5, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_arguments() {
        let params = vec![Matrix::row_vector(&[0.0])];
        let f = |ps: &[Matrix]| Ok((0.0, ps.to_vec()));
        assert!(grad_check(&names(1), &params, f, 1e-2, 1, 0).is_err());
        assert!(grad_check(&names(1), &params, f, 1e-5, 0, 0).is_err());
    }
}
