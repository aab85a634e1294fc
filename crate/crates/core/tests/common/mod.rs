#![allow(dead_code)]

use affect_core::masking::{MaskPlan, Replacement};
use affect_core::rng::{stream, Purpose};
use affect_core::transformer::{backward, forward, ModelConfig, ModelParams, Mode};
use affect_core::Task;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gradcheck_config(task: Task) -> ModelConfig {
    ModelConfig {
        dim_in: 6,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        dropout: 0.2,
        max_len: 4,
        task,
        positional_encoding: true,
    }
}

pub const GRAD_NORM_FLOOR: f64 = 1e-6;

/// Per-tensor outcome of a finite-difference comparison.
pub struct TensorCheck {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Scalar probe loss `sum(r * y)` with a fixed random `r`.
fn probe_loss(y: &Array2<f64>, r: &Array2<f64>) -> f64 {
    (y * r).sum()
}

/// Compares analytic gradients with central differences (step `eps`) for
/// every tensor, replaying the same mask and dropout realisation each time.
pub fn finite_difference_check(cfg: &ModelConfig, seed: u64, eps: f64) -> Vec<TensorCheck> {
    let mut rng = stream(seed, 0, 0, Purpose::Init, 0);
    let mut params = ModelParams::<f64>::init(cfg, &mut rng);
    // Move biases and norm parameters off their trivial init values.
    for t in params.tensors_mut() {
        for v in t.data.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += 0.3 * n;
        }
    }
    let len = cfg.max_len;
    let x = Array2::from_shape_simple_fn((len, cfg.dim_in), || StandardNormal.sample(&mut rng));
    let r = Array2::from_shape_simple_fn((len, cfg.head_out()), || StandardNormal.sample(&mut rng));
    let plan = MaskPlan::new((0..len).map(|i| i % 3 == 1 || rng.random_bool(0.1)).collect());
    let mask = Some((&plan, Replacement::LearnedToken));

    let run = |p: &ModelParams<f64>| {
        let mut drop = stream(seed, 0, 0, Purpose::Dropout, 0);
        forward(p, cfg, x.view(), mask, Mode::Train(&mut drop)).unwrap()
    };
    let out = run(&params);
    let grads = backward(out.trace.as_ref().unwrap(), &params, cfg, r.view()).unwrap();

    let names: Vec<String> = params.tensors().iter().map(|t| t.name.clone()).collect();
    let mut report = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        let analytic: Vec<f64> = grads.tensors()[ti].data.to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].data[j] += eps;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].data[j] -= eps;
            let lp = probe_loss(&run(&plus).output, &r);
            let lm = probe_loss(&run(&minus).output, &r);
            *slot = (lp - lm) / (2.0 * eps);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        // Floor keeps structurally-zero gradients (e.g. the key bias, which
        // softmax cancels) from dividing FD round-off by ~0.
        let rel_error = diff / na.max(nn).max(GRAD_NORM_FLOOR);
        report.push(TensorCheck {
            name: name.clone(),
            rel_error,
            analytic_norm: na,
        });
    }
    report
}
