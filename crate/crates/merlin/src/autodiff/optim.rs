//! Gradient clipping and the Adam update.

use super::graph::AutodiffError;
use super::tensor::Real;

/// Scale all gradients by `c / norm` when the global L2 norm exceeds `c`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Real>(grads: &mut [&mut [T]], max_norm: T) -> T {
    let mut sq = T::ZERO;
    for g in grads.iter() {
        for &v in g.iter() {
            sq = sq + v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter tensor plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T: Real> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&s| vec![T::ZERO; s]).collect(),
            v: sizes.iter().map(|&s| vec![T::ZERO; s]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam step over aligned parameter/gradient slices.
pub fn adam_step<T: Real>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut AdamState<T>,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<(), AutodiffError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(AutodiffError::ShapeMismatch {
            node: 0,
            detail: format!(
                "adam tensors mismatch: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (i, p) in params.iter().enumerate() {
        if p.len() != grads[i].len() || p.len() != state.m[i].len() {
            return Err(AutodiffError::ShapeMismatch {
                node: i,
                detail: format!("adam tensor {i} length mismatch"),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(hyper.beta1);
    let b2 = T::from_f64(hyper.beta2);
    let eps = T::from_f64(hyper.eps);
    let one = T::ONE;
    let corr1 = T::from_f64(1.0 - hyper.beta1.powi(t));
    let corr2 = T::from_f64(1.0 - hyper.beta2.powi(t));
    let lr_t = T::from_f64(lr);

    for i in 0..params.len() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let g = grads[i];
        let p = &mut params[i];
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            p[j] = p[j] - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
