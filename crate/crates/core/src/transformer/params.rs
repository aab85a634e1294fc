use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_gamma: Array1<F>,
    pub ln1_beta: Array1<F>,
    pub wq: Array2<F>,
    pub bq: Array1<F>,
    pub wk: Array2<F>,
    pub bk: Array1<F>,
    pub wv: Array2<F>,
    pub bv: Array1<F>,
    pub wo: Array2<F>,
    pub bo: Array1<F>,
    pub ln2_gamma: Array1<F>,
    pub ln2_beta: Array1<F>,
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
}

/// All trainable tensors of the encoder and its task head.
///
/// Weight matrices are stored `(in, out)` so a linear layer is `x.dot(w) + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub input_w: Array2<F>,
    pub input_b: Array1<F>,
    pub mask_token: Array1<F>,
    pub layers: Vec<LayerParams<F>>,
    pub head_w: Array2<F>,
    pub head_b: Array1<F>,
}

pub struct ParamView<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [F],
}

pub struct ParamViewMut<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [F],
}

impl<F> ParamViewMut<'_, F> {
    /// Norm scales/offsets and biases are not weight-decayed.
    pub fn decays(&self) -> bool {
        is_decayed(&self.name)
    }
}

pub fn is_decayed(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    !(leaf.starts_with('b') || leaf == "gamma" || leaf == "beta" || name.contains(".ln"))
}

macro_rules! tensor_walk {
    ($fn_name:ident, $view:ident, $slice:ident $(, $m:tt)?) => {
        /// Every tensor in checkpoint order.
        pub fn $fn_name(& $($m)? self) -> Vec<$view<'_, F>> {
            fn add<'a, F, D: ndarray::Dimension>(
                out: &mut Vec<$view<'a, F>>,
                name: String,
                a: &'a $($m)? ndarray::Array<F, D>,
            ) {
                let shape = a.shape().to_vec();
                out.push($view {
                    name,
                    shape,
                    data: a.$slice().expect("parameters are stored in standard layout"),
                });
            }
            let mut out = Vec::new();
            add(&mut out, "input.w".into(), & $($m)? self.input_w);
            add(&mut out, "input.b".into(), & $($m)? self.input_b);
            add(&mut out, "mask_token".into(), & $($m)? self.mask_token);
            for (i, l) in (& $($m)? self.layers).into_iter().enumerate() {
                add(&mut out, format!("layers.{i}.ln1.gamma"), & $($m)? l.ln1_gamma);
                add(&mut out, format!("layers.{i}.ln1.beta"), & $($m)? l.ln1_beta);
                add(&mut out, format!("layers.{i}.attn.wq"), & $($m)? l.wq);
                add(&mut out, format!("layers.{i}.attn.bq"), & $($m)? l.bq);
                add(&mut out, format!("layers.{i}.attn.wk"), & $($m)? l.wk);
                add(&mut out, format!("layers.{i}.attn.bk"), & $($m)? l.bk);
                add(&mut out, format!("layers.{i}.attn.wv"), & $($m)? l.wv);
                add(&mut out, format!("layers.{i}.attn.bv"), & $($m)? l.bv);
                add(&mut out, format!("layers.{i}.attn.wo"), & $($m)? l.wo);
                add(&mut out, format!("layers.{i}.attn.bo"), & $($m)? l.bo);
                add(&mut out, format!("layers.{i}.ln2.gamma"), & $($m)? l.ln2_gamma);
                add(&mut out, format!("layers.{i}.ln2.beta"), & $($m)? l.ln2_beta);
                add(&mut out, format!("layers.{i}.ffn.w1"), & $($m)? l.w1);
                add(&mut out, format!("layers.{i}.ffn.b1"), & $($m)? l.b1);
                add(&mut out, format!("layers.{i}.ffn.w2"), & $($m)? l.w2);
                add(&mut out, format!("layers.{i}.ffn.b2"), & $($m)? l.b2);
            }
            add(&mut out, "head.w".into(), & $($m)? self.head_w);
            add(&mut out, "head.b".into(), & $($m)? self.head_b);
            out
        }
    };
}

impl<F: Scalar> ModelParams<F> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layer = || LayerParams {
            ln1_gamma: Array1::zeros(d),
            ln1_beta: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln2_gamma: Array1::zeros(d),
            ln2_beta: Array1::zeros(d),
            w1: Array2::zeros((d, cfg.d_ff)),
            b1: Array1::zeros(cfg.d_ff),
            w2: Array2::zeros((cfg.d_ff, d)),
            b2: Array1::zeros(d),
        };
        ModelParams {
            input_w: Array2::zeros((cfg.dim_in, d)),
            input_b: Array1::zeros(d),
            mask_token: Array1::zeros(cfg.dim_in),
            layers: (0..cfg.n_layers).map(|_| layer()).collect(),
            head_w: Array2::zeros((d, cfg.head_out())),
            head_b: Array1::zeros(cfg.head_out()),
        }
    }

    /// Xavier-normal weights, zero biases, unit norm scales, small-normal mask token.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut params = Self::zeros(cfg);
        for view in params.tensors_mut() {
            let leaf = view.name.rsplit('.').next().unwrap_or("").to_string();
            if leaf == "gamma" {
                view.data.fill(F::one());
            } else if view.name == "mask_token" {
                let normal = Normal::new(0.0, 0.02).unwrap();
                view.data.iter_mut().for_each(|x| *x = lit(normal.sample(rng)));
            } else if view.shape.len() == 2 {
                let std = (2.0 / (view.shape[0] + view.shape[1]) as f64).sqrt();
                let normal = Normal::new(0.0, std).unwrap();
                view.data.iter_mut().for_each(|x| *x = lit(normal.sample(rng)));
            }
        }
        params
    }

    tensor_walk!(tensors, ParamView, as_slice);
    tensor_walk!(tensors_mut, ParamViewMut, as_slice_mut, mut);

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = Self::zeros(cfg);
        let a = self.tensors();
        let b = reference.tensors();
        if a.len() != b.len() {
            return Err(Error::Validation(format!(
                "parameter count {} does not match config ({})",
                a.len(),
                b.len()
            )));
        }
        for (x, y) in a.iter().zip(&b) {
            if x.name != y.name || x.shape != y.shape {
                return Err(Error::Validation(format!(
                    "parameter {} has shape {:?}, config expects {} {:?}",
                    x.name, x.shape, y.name, y.shape
                )));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.data.iter_mut().zip(b.data).for_each(|(x, y)| *x = *x + *y);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let c1 = |a: &Array1<F>| a.mapv(|v| G::from_f64_lossy(v.to_f64_lossy()));
        let c2 = |a: &Array2<F>| a.mapv(|v| G::from_f64_lossy(v.to_f64_lossy()));
        ModelParams {
            input_w: c2(&self.input_w),
            input_b: c1(&self.input_b),
            mask_token: c1(&self.mask_token),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gamma: c1(&l.ln1_gamma),
                    ln1_beta: c1(&l.ln1_beta),
                    wq: c2(&l.wq),
                    bq: c1(&l.bq),
                    wk: c2(&l.wk),
                    bk: c1(&l.bk),
                    wv: c2(&l.wv),
                    bv: c1(&l.bv),
                    wo: c2(&l.wo),
                    bo: c1(&l.bo),
                    ln2_gamma: c1(&l.ln2_gamma),
                    ln2_beta: c1(&l.ln2_beta),
                    w1: c2(&l.w1),
                    b1: c1(&l.b1),
                    w2: c2(&l.w2),
                    b2: c1(&l.b2),
                })
                .collect(),
            head_w: c2(&self.head_w),
            head_b: c1(&self.head_b),
        }
    }
}
