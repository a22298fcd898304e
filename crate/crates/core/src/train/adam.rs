use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autodiff::{ParamId, ParamSet};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Bias-corrected Adam moments, one accumulator pair per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Completed optimizer steps.
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            beta1: BETA1,
            beta2: BETA2,
            epsilon: EPSILON,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn first_moment(&self, id: ParamId) -> &[f64] {
        &self.first[id.0]
    }

    pub fn second_moment(&self, id: ParamId) -> &[f64] {
        &self.second[id.0]
    }
}

/// Euclidean norm over every accumulated gradient.
pub fn global_grad_norm(params: &ParamSet) -> f64 {
    params
        .iter()
        .filter_map(|(_, _, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// One Adam update from the gradients accumulated in `params`, which are
/// cleared afterwards. When `clip_norm` is set and the global gradient
/// norm exceeds it, all gradients are scaled down to that norm first.
/// Returns the pre-clipping norm. Parameters without a gradient are
/// treated as having a zero gradient.
pub fn adam_step(
    params: &mut ParamSet,
    state: &mut AdamState,
    learning_rate: f64,
    clip_norm: Option<f64>,
) -> Result<f64, TrainError> {
    assert_eq!(state.first.len(), params.len(), "optimizer state does not match parameters");
    for (_, name, t) in params.iter() {
        if let Some(g) = t.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient(name.to_string()));
            }
        }
    }
    let norm = global_grad_norm(params);
    let scale = match clip_norm {
        Some(max) if norm > max => max / norm,
        _ => 1.0,
    };

    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let correction1 = 1.0 - b1.powi(state.step as i32);
    let correction2 = 1.0 - b2.powi(state.step as i32);
    for (i, t) in params.tensors_mut().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let Some(g) = t.take_grad() else {
            // zero gradient: moments decay, parameter moves only if the
            // moments were already nonzero
            let (m, v) = (&mut state.first[i], &mut state.second[i]);
            for ((p, m), v) in t.values_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                *m *= b1;
                *v *= b2;
                if *m != 0.0 {
                    *p -= learning_rate * (*m / correction1) / ((*v / correction2).sqrt() + eps);
                }
            }
            continue;
        };
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (((p, &g), m), v) in t.values_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g * scale;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(norm)
}
