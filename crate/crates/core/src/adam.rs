//! Adam with bias correction.

use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

/// One Adam update of a scalar. `step` counts from 1.
#[inline]
pub fn adam_update(param: &mut f64, grad: f64, m: &mut f64, v: &mut f64, lr: f64, step: u64) {
    *m = BETA1 * *m + (1.0 - BETA1) * grad;
    *v = BETA2 * *v + (1.0 - BETA2) * grad * grad;
    let bc1 = 1.0 - BETA1.powi(step as i32);
    let bc2 = 1.0 - BETA2.powi(step as i32);
    let m_hat = *m / bc1;
    let v_hat = *v / bc2;
    *param -= lr * m_hat / (v_hat.sqrt() + EPSILON);
}

pub fn adam_step(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, step: u64) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
    for i in 0..params.len() {
        adam_update(&mut params[i], grads[i], &mut m[i], &mut v[i], lr, step);
    }
}

/// Moments for a list of parameter slices (e.g. the layers of a network).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    /// Advances the step counter and updates every slice.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) {
        assert_eq!(params.len(), self.m.len(), "slice count differs from optimizer state");
        self.step += 1;
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            adam_step(p, g, &mut self.m[k], &mut self.v[k], lr, self.step);
        }
    }
}
