use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Orthogonal matrix of `shape = [rows, cols]` scaled by `gain`.
///
/// Built from the QR factorisation of a standard normal matrix with the
/// signs of `Q` fixed by the diagonal of `R`, so the result is uniquely
/// determined by the RNG stream.
pub fn orthogonal_init<T: Real, R: Rng + ?Sized>(shape: &[usize], gain: T, rng: &mut R) -> Result<Tensor<T>> {
    let [rows, cols] = *shape else {
        return Err(Error::InvalidShape {
            op: "orthogonal_init",
            shape: shape.to_vec(),
            reason: "needs a 2-D shape",
        });
    };
    if rows == 0 || cols == 0 {
        return Ok(Tensor::zeros(shape));
    }
    // factor the tall orientation so Q has orthonormal columns
    let (tall, wide) = (rows.max(cols), rows.min(cols));
    let mut draws = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        draws.push(rng.sample::<f64, _>(StandardNormal));
    }
    let g = DMatrix::from_row_slice(tall, wide, &draws);
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..wide {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let q = if rows >= cols { q } else { q.transpose() };
    let gain = gain.to_f64_lossy();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.push(T::lit(q[(i, j)] * gain));
        }
    }
    Tensor::new(shape.to_vec(), data)
}

pub fn constant_init<T: Real>(shape: &[usize], value: T) -> Tensor<T> {
    Tensor::full(shape, value)
}
