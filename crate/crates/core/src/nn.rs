//! Row-wise building blocks shared by the encoder's forward and backward passes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, RngCore};
use std::f64::consts::{FRAC_2_SQRT_PI, SQRT_2};

pub const LN_EPS: f64 = 1e-12;

pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * gain + bias;
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns dx and accumulates the gain/bias gradients.
pub fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LayerNormCache,
    gain: &Array1<f64>,
    d_gain: &mut Array1<f64>,
    d_bias: &mut Array1<f64>,
) -> Array2<f64> {
    *d_gain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *d_bias += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = dy * gain;
    for ((mut row, xhat), &inv) in dx
        .axis_iter_mut(Axis(0))
        .zip(cache.xhat.axis_iter(Axis(0)))
        .zip(cache.inv_std.iter())
    {
        let mean_dxhat = row.sum() / d;
        let mean_dxhat_xhat = row.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d;
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|g, &xh| *g = inv * (*g - mean_dxhat - xh * mean_dxhat_xhat));
    }
    dx
}

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    let pdf = 0.5 * FRAC_2_SQRT_PI / SQRT_2 * (-0.5 * x * x).exp();
    cdf + x * pdf
}

/// In-place row softmax with max subtraction. `-inf` entries get probability 0.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Gradient through a row softmax: dS = P ⊙ (dP − rowsum(dP ⊙ P)).
pub fn softmax_rows_backward(probs: &Array2<f64>, d_probs: &Array2<f64>) -> Array2<f64> {
    let mut ds = d_probs * probs;
    for (mut row, p) in ds.axis_iter_mut(Axis(0)).zip(probs.axis_iter(Axis(0))) {
        let dot = row.sum();
        Zip::from(&mut row).and(&p).for_each(|g, &pv| *g -= pv * dot);
    }
    ds
}

/// Inverted-dropout mask: entries are 0 or 1/(1-p).
pub fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut dyn RngCore) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn((rows, cols), || if rng.gen::<f64>() < p { 0.0 } else { keep })
}

pub fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// Accumulates dW += xᵀ·dy and db += Σ dy, returning dx = dy·Wᵀ.
pub fn linear_backward(
    x: ArrayView2<'_, f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    ndarray::linalg::general_mat_mul(1.0, &x.t(), dy, 1.0, dw);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

pub fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.dot(&b)
}
