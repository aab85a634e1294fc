//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::transformer::{ModelConfig, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moments, shaped like the model, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<F> {
    pub m: ModelParams<F>,
    pub v: ModelParams<F>,
    pub step: u64,
}

impl<F: Scalar> OptState<F> {
    pub fn new(cfg: &ModelConfig) -> Self {
        OptState {
            m: ModelParams::zeros(cfg),
            v: ModelParams::zeros(cfg),
            step: 0,
        }
    }
}

/// One AdamW update, in place. Biases and norm parameters are not decayed.
pub fn step<F: Scalar>(
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
    state: &mut OptState<F>,
    cfg: &AdamWConfig,
) -> Result<()> {
    let grad_views = grads.tensors();
    {
        let names: Vec<_> = params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        if names.len() != grad_views.len()
            || names.iter().zip(&grad_views).any(|((n, s), g)| *n != g.name || *s != g.shape)
        {
            return Err(Error::Validation("gradient shapes do not match parameters".into()));
        }
    }
    if let Some(bad) = grad_views.iter().find(|g| g.data.iter().any(|v| !v.is_finite())) {
        return Err(Error::numeric(bad.name.clone(), "non-finite gradient"));
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = lit::<F>(cfg.beta1);
    let b2 = lit::<F>(cfg.beta2);
    let one = F::one();
    let bias1 = lit::<F>(1.0 - cfg.beta1.powi(t));
    let bias2 = lit::<F>(1.0 - cfg.beta2.powi(t));
    let lr = lit::<F>(cfg.lr);
    let eps = lit::<F>(cfg.eps);
    let wd = lit::<F>(cfg.weight_decay);

    let params_views = params.tensors_mut();
    let m_views = state.m.tensors_mut();
    let v_views = state.v.tensors_mut();
    for (((p, g), m), v) in params_views.into_iter().zip(&grad_views).zip(m_views).zip(v_views) {
        let decay = if p.decays() { wd } else { F::zero() };
        for (((theta, &grad), m), v) in p.data.iter_mut().zip(g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
            *m = b1 * *m + (one - b1) * grad;
            *v = b2 * *v + (one - b2) * grad * grad;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *theta = *theta - lr * (m_hat / (v_hat.sqrt() + eps) + decay * *theta);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::Task;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny() -> ModelConfig {
        ModelConfig {
            dim_in: 2,
            d_model: 2,
            n_heads: 1,
            n_layers: 1,
            d_ff: 2,
            dropout: 0.0,
            max_len: 4,
            task: Task::Va,
            positional_encoding: true,
        }
    }

    #[test]
    fn pure_decay_step() {
        let cfg = tiny();
        let mut params = ModelParams::<f64>::zeros(&cfg);
        params.input_w.fill(1.0);
        params.input_b.fill(1.0);
        let grads = ModelParams::zeros(&cfg);
        let mut state = OptState::new(&cfg);
        step(&mut params, &grads, &mut state, &AdamWConfig::default()).unwrap();
        assert!(params.input_w.iter().all(|v| (*v - 0.9999999).abs() < 1e-15));
        // Biases are excluded from decay.
        assert!(params.input_b.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let cfg = tiny();
        let mut params = ModelParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let before = params.clone();
        let mut state = OptState::new(&cfg);
        let opt = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        step(&mut params, &ModelParams::zeros(&cfg), &mut state, &opt).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let cfg = tiny();
        let mut params = ModelParams::<f64>::zeros(&cfg);
        let mut grads = ModelParams::<f64>::zeros(&cfg);
        grads.head_w.fill(0.37);
        let mut state = OptState::new(&cfg);
        let opt = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut prev = 0.0;
        let mut last = 0.0;
        for _ in 0..5000 {
            step(&mut params, &grads, &mut state, &opt).unwrap();
            last = prev - params.head_w[[0, 0]];
            prev = params.head_w[[0, 0]];
        }
        assert!((last - opt.lr).abs() / opt.lr < 1e-6, "step {last}");
    }

    // Straight-line Adam on a flat vector, written independently of `step`.
    fn reference_adam(theta: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: i32, c: &AdamWConfig) {
        for i in 0..theta.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - c.beta1.powi(t));
            let vh = v[i] / (1.0 - c.beta2.powi(t));
            theta[i] -= c.lr * mh / (vh.sqrt() + c.eps);
        }
    }

    #[test]
    fn matches_plain_adam_without_decay() {
        let cfg = ModelConfig {
            dim_in: 4,
            d_model: 2,
            ..tiny()
        };
        let opt = AdamWConfig {
            weight_decay: 0.0,
            lr: 3e-3,
            ..AdamWConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ModelParams::<f64>::init(&cfg, &mut rng);
        let mut state = OptState::new(&cfg);
        // input.w is 4 x 2 = 8 elements.
        let mut theta: Vec<f64> = params.input_w.iter().copied().collect();
        let (mut m, mut v) = (vec![0.0; 8], vec![0.0; 8]);
        for t in 1..=50 {
            let mut grads = ModelParams::<f64>::zeros(&cfg);
            grads.input_w.mapv_inplace(|_| StandardNormal.sample(&mut rng));
            let g: Vec<f64> = grads.input_w.iter().copied().collect();
            step(&mut params, &grads, &mut state, &opt).unwrap();
            reference_adam(&mut theta, &g, &mut m, &mut v, t, &opt);
        }
        for (a, b) in params.input_w.iter().zip(&theta) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let cfg = tiny();
        let mut params = ModelParams::<f32>::zeros(&cfg);
        let mut grads = ModelParams::<f32>::zeros(&cfg);
        grads.layers[0].w1[[0, 1]] = f32::NAN;
        let mut state = OptState::new(&cfg);
        match step(&mut params, &grads, &mut state, &AdamWConfig::default()) {
            Err(Error::Numeric { location, .. }) => assert_eq!(location, "layers.0.ffn.w1"),
            other => panic!("{other:?}"),
        }
        assert_eq!(state.step, 0);
    }

    #[test]
    fn deterministic() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = ModelParams::<f32>::init(&cfg, &mut rng);
        let grads = ModelParams::<f32>::init(&cfg, &mut rng);
        let run = || {
            let mut p = params.clone();
            let mut s = OptState::new(&cfg);
            for _ in 0..3 {
                step(&mut p, &grads, &mut s, &AdamWConfig::default()).unwrap();
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }
}
