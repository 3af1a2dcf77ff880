use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Named trainable array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

/// Adam with bias correction, following the PyTorch update order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Param<T>>, lr: T, beta1: T, beta2: T, eps: T) -> Self {
        let zeros: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn first_moment(&self) -> &[Tensor<T>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor<T>] {
        &self.second_moment
    }
}

/// Global L2 norm over all gradients.
pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> T {
    grads.iter().map(Tensor::squared_norm).sum::<T>().sqrt()
}

/// Scales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: T) -> T {
    let norm = global_norm(grads);
    let coef = max_norm / (norm + T::lit(1e-6));
    if coef < T::one() {
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= coef);
        }
    }
    norm
}

/// One clipped Adam update over `params` (same order the state was built with).
pub fn adam_step<T: Real>(
    params: &mut [&mut Param<T>],
    mut grads: Vec<Tensor<T>>,
    state: &mut AdamState<T>,
    max_grad_norm: T,
) -> Result<T> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Invalid(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    if !(max_grad_norm > T::zero()) {
        return Err(Error::Invalid("adam_step: max_grad_norm must be positive".into()));
    }
    for (p, g) in params.iter().zip(&grads) {
        if g.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if g.has_nan() {
            return Err(Error::NanGradient(p.name.clone()));
        }
    }
    let norm = clip_grad_norm(&mut grads, max_grad_norm);

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bias1 = T::one() - b1.powi(t);
    let bias2_sqrt = (T::one() - b2.powi(t)).sqrt();
    let step_size = state.lr / bias1;
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(&grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        for (((w, &gi), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = *mi * b1 + (T::one() - b1) * gi;
            *vi = *vi * b2 + (T::one() - b2) * gi * gi;
            let denom = vi.sqrt() / bias2_sqrt + state.eps;
            *w -= step_size * *mi / denom;
        }
    }
    Ok(norm)
}
