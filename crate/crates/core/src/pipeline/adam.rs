use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParameterStore};
use crate::tensor::Real;

/// Moment estimates of every learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: IndexMap<String, Vec<T>>,
    pub v: IndexMap<String, Vec<T>>,
}

impl<T: Real> AdamState<T> {
    /// Zero moments shaped like the learnable tensors of `params`.
    pub fn new(params: &ParameterStore<T>) -> Self {
        let zeros: IndexMap<String, Vec<T>> =
            params.learnable().map(|(k, t)| (k.to_string(), vec![T::zero(); t.numel()])).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update. Arithmetic runs in `f64` and is rounded
/// back to `T` per element.
pub fn adam_step<T: Real>(
    params: &mut ParameterStore<T>,
    grads: &IndexMap<String, Vec<T>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (name, entry) in params.iter_mut() {
        if entry.kind != ParamKind::Learnable {
            continue;
        }
        let g = grads.get(name).ok_or_else(|| Error::Shape(format!("no gradient for `{name}`")))?;
        let m = state.m.get_mut(name).ok_or_else(|| Error::Shape(format!("no first moment for `{name}`")))?;
        let v = state.v.get_mut(name).ok_or_else(|| Error::Shape(format!("no second moment for `{name}`")))?;
        let p = entry.tensor.data_mut();
        if g.len() != p.len() || m.len() != p.len() || v.len() != p.len() {
            return Err(Error::Shape(format!("optimizer buffers of `{name}` do not match {} elements", p.len())));
        }
        for i in 0..p.len() {
            let gi = g[i].as_f64();
            let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            p[i] = T::of(p[i].as_f64() - update);
        }
    }
    Ok(())
}
