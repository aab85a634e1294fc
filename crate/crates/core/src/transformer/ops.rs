//! Primitive tensor operations and their local gradients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, RngCore};

use crate::scalar::{lit, Scalar};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Fixed sinusoidal table: `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(..)`.
pub fn positional_encoding<F: Scalar>(len: usize, d_model: usize) -> Array2<F> {
    Array2::from_shape_fn((len, d_model), |(t, j)| {
        let pair = (j / 2 * 2) as f64;
        let angle = t as f64 / 10000f64.powf(pair / d_model as f64);
        lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Scalar>(logits: &mut Array2<F>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// `softmax(Q Kᵀ / sqrt(d_head))`.
pub fn attention_weights<F: Scalar>(q: ArrayView2<'_, F>, k: ArrayView2<'_, F>) -> Array2<F> {
    let scale = F::one() / lit::<F>(q.ncols() as f64).sqrt();
    let mut scores = q.dot(&k.t()) * scale;
    softmax_rows(&mut scores);
    scores
}

/// Scaled dot-product attention for one head.
pub fn attention<F: Scalar>(
    q: ArrayView2<'_, F>,
    k: ArrayView2<'_, F>,
    v: ArrayView2<'_, F>,
) -> Array2<F> {
    attention_weights(q, k).dot(&v)
}

/// Gradients of one attention head given the upstream `d_out`.
/// Returns `(dQ, dK, dV)`.
pub fn attention_backward<F: Scalar>(
    q: ArrayView2<'_, F>,
    k: ArrayView2<'_, F>,
    v: ArrayView2<'_, F>,
    probs: ArrayView2<'_, F>,
    d_out: ArrayView2<'_, F>,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let scale = F::one() / lit::<F>(q.ncols() as f64).sqrt();
    let dv = probs.t().dot(&d_out);
    let dp = d_out.dot(&v.t());
    let mut ds = Array2::zeros(probs.raw_dim());
    for ((mut ds_row, p_row), dp_row) in ds.rows_mut().into_iter().zip(probs.rows()).zip(dp.rows()) {
        let inner = p_row.dot(&dp_row);
        Zip::from(&mut ds_row)
            .and(&p_row)
            .and(&dp_row)
            .for_each(|s, &p, &g| *s = p * (g - inner));
    }
    let dq = ds.dot(&k) * scale;
    let dk = ds.t().dot(&q) * scale;
    (dq, dk, dv)
}

/// Cached values from a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<F> {
    pub normed: Array2<F>,
    pub inv_std: Array1<F>,
}

pub fn layer_norm<F: Scalar>(
    x: ArrayView2<'_, F>,
    gamma: ArrayView1<'_, F>,
    beta: ArrayView1<'_, F>,
) -> (Array2<F>, LayerNormCache<F>) {
    let n = lit::<F>(x.ncols() as f64);
    let eps = lit::<F>(LAYER_NORM_EPS);
    let mut normed = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in normed.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(F::zero(), |acc, &v| acc + v * v) / n;
        *s = F::one() / (var + eps).sqrt();
        let scale = *s;
        row.mapv_inplace(|v| v * scale);
    }
    let out = &normed * &gamma + &beta;
    (out, LayerNormCache { normed, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<F: Scalar>(
    cache: &LayerNormCache<F>,
    gamma: ArrayView1<'_, F>,
    d_out: ArrayView2<'_, F>,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let n = lit::<F>(d_out.ncols() as f64);
    let dgamma = (&d_out * &cache.normed).sum_axis(Axis(0));
    let dbeta = d_out.sum_axis(Axis(0));
    let dnormed = &d_out * &gamma;
    let mut dx = Array2::zeros(d_out.raw_dim());
    for (((mut dx_row, dn_row), xh_row), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(dnormed.rows())
        .zip(cache.normed.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_dn = dn_row.sum() / n;
        let mean_dn_xh = dn_row.dot(&xh_row) / n;
        Zip::from(&mut dx_row)
            .and(&dn_row)
            .and(&xh_row)
            .for_each(|d, &g, &xh| *d = inv * (g - mean_dn - xh * mean_dn_xh));
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044715;

/// Tanh-approximated GELU.
pub fn gelu<F: Scalar>(u: F) -> F {
    let half = lit::<F>(0.5);
    let inner = lit::<F>(GELU_C) * (u + lit::<F>(GELU_K) * u * u * u);
    half * u * (F::one() + inner.tanh())
}

pub fn gelu_grad<F: Scalar>(u: F) -> F {
    let half = lit::<F>(0.5);
    let inner = lit::<F>(GELU_C) * (u + lit::<F>(GELU_K) * u * u * u);
    let t = inner.tanh();
    let d_inner = lit::<F>(GELU_C) * (F::one() + lit::<F>(3.0 * GELU_K) * u * u);
    half * (F::one() + t) + half * u * (F::one() - t * t) * d_inner
}

/// Inverted-dropout multipliers: 0 with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask<F: Scalar>(shape: (usize, usize), rate: f64, rng: &mut dyn RngCore) -> Array2<F> {
    let keep = lit::<F>(1.0 / (1.0 - rate));
    Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < rate {
            F::zero()
        } else {
            keep
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pe_values() {
        let pe = positional_encoding::<f64>(100, 16);
        assert_eq!(pe[[0, 0]], 0.0);
        assert_eq!(pe[[0, 1]], 1.0);
        assert!((pe[[1, 0]] - 0.841_470_984_807_896_5).abs() < 1e-15);
        assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
        // Second pair uses frequency 10000^(-2/16).
        assert!((pe[[3, 2]] - (3.0 / 10000f64.powf(2.0 / 16.0)).sin()).abs() < 1e-15);
    }

    #[test]
    fn single_frame_attention_returns_value() {
        let q = array![[0.3, -1.2]];
        let k = array![[2.0, 0.5]];
        let v = array![[7.0, -3.0]];
        assert_eq!(attention(q.view(), k.view(), v.view()), v);
    }

    #[test]
    fn identical_keys_average_values() {
        let k = array![[0.4f64, 0.1, -0.2], [0.4, 0.1, -0.2]];
        let v = array![[1.0, 2.0, 3.0], [3.0, -2.0, 5.0]];
        for scale in [1.0, 10.0, -250.0] {
            let q = array![[0.5, -1.0, 2.0], [1.5, 0.0, 0.25]] * scale;
            let w = attention_weights(q.view(), k.view());
            assert!(w.iter().all(|p| (p - 0.5).abs() < 1e-15));
            let out = attention(q.view(), k.view(), v.view());
            for row in out.rows() {
                assert!((row[0] - 2.0).abs() < 1e-12);
                assert!((row[1] - 0.0).abs() < 1e-12);
                assert!((row[2] - 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut x = array![[1000.0f32, 1001.0, 999.0], [-1e30, 0.0, 0.0]];
        softmax_rows(&mut x);
        assert!(x.iter().all(|v| v.is_finite()));
        for row in x.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for u in [-3.0f64, -0.7, 0.0, 0.2, 1.9] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8, "u={u}");
        }
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let x = array![[1.0f64, 2.0, 3.0, 4.0], [-5.0, 0.0, 5.0, 10.0]];
        let gamma = Array1::ones(4);
        let beta = Array1::zeros(4);
        let (y, _) = layer_norm(x.view(), gamma.view(), beta.view());
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
