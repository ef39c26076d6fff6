use ndarray::{Array2, Zip};

use super::Real;
use crate::error::{Error, Result};

/// Adam moment estimates for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    /// Zeroed moments shaped like `shapes`, with beta1 0.9, beta2 0.999, eps 1e-8.
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>, lr: f64) -> Self {
        let m: Vec<Array2<T>> = shapes.into_iter().map(Array2::zeros).collect();
        Self {
            v: m.clone(),
            m,
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Real>(params: Vec<&mut Array2<T>>, grads: &[Array2<T>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.dim() != g.dim() || p.dim() != m.dim() {
            return Err(Error::shape("adam: parameter/gradient shape mismatch"));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (b1t, b2t) = (T::of(b1), T::of(b2));
    let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
    let step = T::of(state.lr / bc1);
    let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
    let eps = T::of(state.eps);
    for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1t * *m + one_b1 * g;
            *v = b2t * *v + one_b2 * g * g;
            *p -= step * *m / (v.sqrt() * inv_sqrt_bc2 + eps);
        });
    }
    Ok(())
}

/// `base_lr * rate^floor(epoch / every)`.
pub fn step_decay(epoch: usize, base_lr: f64, rate: f64, every: usize) -> f64 {
    base_lr * rate.powi((epoch / every.max(1)) as i32)
}

/// The training schedule: decay by 0.7 every 23 epochs.
pub fn lr_schedule(epoch: usize, base_lr: f64) -> f64 {
    step_decay(epoch, base_lr, 0.7, 23)
}
