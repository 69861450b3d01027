//! AdamW with a linear warmup / linear decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{CedError, Result};
use crate::fusion_model::ModelParams;
use crate::tensor_math::Matrix;

/// Learning rate at `step` of `total_steps`: linear ramp from 0 to `peak`
/// over the first `warmup_frac · total_steps` steps, then linear decay to 0.
pub fn lr_schedule(step: usize, total_steps: usize, peak: f64, warmup_frac: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(CedError::config("total_steps", "must be positive"));
    }
    if step > total_steps {
        return Err(CedError::config(
            "step",
            format!("step {step} beyond total {total_steps}"),
        ));
    }
    if !(0.0..1.0).contains(&warmup_frac) {
        return Err(CedError::config("warmup_frac", "must lie in [0, 1)"));
    }
    let (step, total) = (step as f64, total_steps as f64);
    let warmup = warmup_frac * total;
    Ok(if step < warmup {
        peak * step / warmup
    } else {
        peak * (1.0 - (step - warmup) / (total - warmup))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments, one matrix per parameter tensor in visiting
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl OptimizerState {
    pub fn new(params: &[&Matrix], hyper: AdamHyper) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            hyper,
        }
    }

    pub fn for_model(params: &ModelParams, hyper: AdamHyper) -> Self {
        OptimizerState::new(&params.leaves(), hyper)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held NaN or infinity; nothing was changed.
    RejectedNonFinite,
}

fn check_shapes(params: &[&Matrix], grads: &[&Matrix], state: &OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(CedError::shape(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(CedError::shape(format!(
                "parameter {:?} with gradient {:?} and moment {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }
    Ok(())
}

struct Corrections {
    lr: f64,
    bc1: f64,
    bc2: f64,
}

fn update_tensor(theta: &mut Matrix, g: &Matrix, m: &mut Matrix, v: &mut Matrix, h: &AdamHyper, c: &Corrections) {
    let (g, m, v) = (g.as_slice(), m.as_mut_slice(), v.as_mut_slice());
    for (j, t) in theta.as_mut_slice().iter_mut().enumerate() {
        *t -= c.lr * h.weight_decay * *t;
        m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
        v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
        let m_hat = m[j] / c.bc1;
        let v_hat = v[j] / c.bc2;
        *t -= c.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
}

fn begin_step(state: &mut OptimizerState, lr: f64) -> Corrections {
    state.step += 1;
    let t = state.step as i32;
    Corrections {
        lr,
        bc1: 1.0 - state.hyper.beta1.powi(t),
        bc2: 1.0 - state.hyper.beta2.powi(t),
    }
}

/// One decoupled-weight-decay Adam update over parallel slices of
/// parameters and gradients.
pub fn adamw_step(
    params: &mut [Matrix],
    grads: &[Matrix],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<StepOutcome> {
    let p_refs: Vec<&Matrix> = params.iter().collect();
    let g_refs: Vec<&Matrix> = grads.iter().collect();
    check_shapes(&p_refs, &g_refs, state)?;
    if grads.iter().any(|g| !g.is_finite()) {
        return Ok(StepOutcome::RejectedNonFinite);
    }
    let c = begin_step(state, lr);
    let hyper = state.hyper;
    for (i, p) in params.iter_mut().enumerate() {
        update_tensor(p, &grads[i], &mut state.m[i], &mut state.v[i], &hyper, &c);
    }
    Ok(StepOutcome::Applied)
}

/// [`adamw_step`] over every tensor of a model.
pub fn adamw_step_model(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<StepOutcome> {
    let g = grads.leaves();
    check_shapes(&params.leaves(), &g, state)?;
    if g.iter().any(|m| !m.is_finite()) {
        return Ok(StepOutcome::RejectedNonFinite);
    }
    let c = begin_step(state, lr);
    let hyper = state.hyper;
    let mut i = 0;
    params.visit_mut("", &mut |_, p| {
        update_tensor(p, g[i], &mut state.m[i], &mut state.v[i], &hyper, &c);
        i += 1;
    });
    Ok(StepOutcome::Applied)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(0, 1000, 2e-5, 0.1).unwrap(), 0.0);
        assert_eq!(lr_schedule(100, 1000, 2e-5, 0.1).unwrap(), 2e-5);
        assert!((lr_schedule(550, 1000, 2e-5, 0.1).unwrap() - 1e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(1000, 1000, 2e-5, 0.1).unwrap(), 0.0);
        assert!(lr_schedule(0, 0, 1.0, 0.1).is_err());
        assert!(lr_schedule(11, 10, 1.0, 0.1).is_err());
        // no warmup starts at the peak
        assert_eq!(lr_schedule(0, 10, 1.0, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn schedule_peaks_at_warmup_boundary() {
        let total = 37;
        let values: Vec<f64> = (0..=total).map(|s| lr_schedule(s, total, 1.0, 0.2).unwrap()).collect();
        let argmax = values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!(argmax == 7 || argmax == 8, "{argmax}");
        assert!(values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    fn scalar(v: f64) -> Matrix {
        Matrix::row_vector(&[v])
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap()];
        let before = p.clone();
        let hyper = AdamHyper {
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        let mut st = OptimizerState::new(&[&p[0]], hyper);
        adamw_step(&mut p, &[Matrix::zeros(2, 2)], &mut st, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks() {
        let mut p = vec![scalar(2.0)];
        let mut st = OptimizerState::new(&[&p[0]], AdamHyper::default());
        adamw_step(&mut p, &[scalar(0.0)], &mut st, 0.1).unwrap();
        assert_eq!(p[0].get(0, 0), 2.0 * (1.0 - 0.1 * 0.01));
    }

    #[test]
    fn three_steps_match_scripted_reference() {
        // Reference computed by a standalone script transcribing the AdamW
        // update with β1=0.9, β2=0.999, ε=1e-8, wd=0.1, lr=0.05.
        let hyper = AdamHyper {
            weight_decay: 0.1,
            ..AdamHyper::default()
        };
        let grads = [0.5, -1.5, 0.25];
        let mut p = vec![scalar(1.0)];
        let mut st = OptimizerState::new(&[&p[0]], hyper);
        for g in grads {
            adamw_step(&mut p, &[scalar(g)], &mut st, 0.05).unwrap();
        }
        assert!((p[0].get(0, 0) - 0.9740344795133461).abs() < 1e-12, "{}", p[0].get(0, 0));
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = vec![scalar(1.0)];
        let mut st = OptimizerState::new(&[&p[0]], AdamHyper::default());
        let out = adamw_step(&mut p, &[scalar(f64::NAN)], &mut st, 0.1).unwrap();
        assert_eq!(out, StepOutcome::RejectedNonFinite);
        assert_eq!(p[0].get(0, 0), 1.0);
        assert_eq!(st.step, 0);
        assert!(adamw_step(&mut p, &[Matrix::zeros(1, 2)], &mut st, 0.1).is_err());
    }
}
