use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::RngCore;

use super::ops::{
    attention_backward, attention_weights, dropout_mask, gelu, gelu_grad, layer_norm,
    layer_norm_backward, positional_encoding, LayerNormCache,
};
use super::{LayerParams, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, MaskFill, MaskPlan, Replacement};
use crate::scalar::Scalar;
use crate::task::Task;

pub enum Mode<'r> {
    /// Dropout active; masks drawn from the given stream and recorded in the trace.
    Train(&'r mut dyn RngCore),
    Eval,
}

#[derive(Clone, Debug)]
struct LayerTrace<F> {
    ln1: LayerNormCache<F>,
    attn_in: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    context: Array2<F>,
    drop_attn: Option<Array2<F>>,
    ln2: LayerNormCache<F>,
    ffn_in: Array2<F>,
    pre_act: Array2<F>,
    hidden: Array2<F>,
    drop_hidden: Option<Array2<F>>,
    drop_out: Option<Array2<F>>,
}

/// Activations recorded by a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<F> {
    len: usize,
    input: Array2<F>,
    mask: Option<(MaskPlan, Replacement)>,
    drop_in: Option<Array2<F>>,
    layers: Vec<LayerTrace<F>>,
    final_hidden: Array2<F>,
    output: Array2<F>,
}

impl<F: Scalar> ForwardTrace<F> {
    /// Attention probabilities of one head in one layer (`T x T`).
    pub fn attention(&self, layer: usize, head: usize) -> &Array2<F> {
        &self.layers[layer].probs[head]
    }

    pub fn output(&self) -> &Array2<F> {
        &self.output
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug)]
pub struct ForwardOutput<F> {
    /// Per-frame predictions, `T x head_out`.
    pub output: Array2<F>,
    pub trace: Option<ForwardTrace<F>>,
}

fn linear<F: Scalar>(x: ArrayView2<'_, F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    x.dot(w) + b
}

fn check_finite<F: Scalar>(x: ArrayView2<'_, F>, location: impl FnOnce() -> String) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(location(), "non-finite activation"))
    }
}

fn maybe_dropout<F: Scalar>(
    x: &mut Array2<F>,
    rate: f64,
    rng: &mut Option<&mut dyn RngCore>,
) -> Option<Array2<F>> {
    let rng = rng.as_deref_mut()?;
    if rate <= 0.0 {
        return None;
    }
    let mask = dropout_mask(x.dim(), rate, rng);
    *x *= &mask;
    Some(mask)
}

/// Runs the encoder over one clip.
///
/// `mask` replaces the flagged frames before the input projection; it is
/// rejected in eval mode.
pub fn forward<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    features: ArrayView2<'_, F>,
    mask: Option<(&MaskPlan, Replacement)>,
    mode: Mode<'_>,
) -> Result<ForwardOutput<F>> {
    let len = features.nrows();
    if len == 0 || len > cfg.max_len {
        return Err(Error::Validation(format!(
            "clip length {len} outside 1..={}",
            cfg.max_len
        )));
    }
    if features.ncols() != cfg.dim_in {
        return Err(Error::Validation(format!(
            "feature width {} != model dim_in {}",
            features.ncols(),
            cfg.dim_in
        )));
    }
    check_finite(features, || "input features".into())?;

    let mut rng = match mode {
        Mode::Train(rng) => Some(rng),
        Mode::Eval => None,
    };
    let training = rng.is_some();
    if !training && mask.is_some_and(|(plan, _)| plan.any()) {
        return Err(Error::Validation("frame masking requested in eval mode".into()));
    }

    let input = match mask {
        Some((plan, replacement)) => {
            let fill = match replacement {
                Replacement::ZeroVector => MaskFill::Zero,
                Replacement::LearnedToken => MaskFill::Token(params.mask_token.view()),
            };
            apply_mask(features, plan, fill)?
        }
        None => features.to_owned(),
    };

    let mut h = linear(input.view(), &params.input_w, &params.input_b);
    if cfg.positional_encoding {
        h += &positional_encoding::<F>(len, cfg.d_model);
    }
    let drop_in = maybe_dropout(&mut h, cfg.dropout, &mut rng);
    check_finite(h.view(), || "input projection".into())?;

    let mut layer_traces = Vec::with_capacity(cfg.n_layers);
    for (i, layer) in params.layers.iter().enumerate() {
        let (next, trace) = block_forward(layer, cfg, h, &mut rng);
        check_finite(next.view(), || format!("encoder layer {i}"))?;
        h = next;
        if training {
            layer_traces.push(trace);
        }
    }

    let mut output = linear(h.view(), &params.head_w, &params.head_b);
    if cfg.task == Task::Va {
        output.mapv_inplace(|v| v.tanh());
    }
    check_finite(output.view(), || "task head".into())?;

    let trace = training.then(|| ForwardTrace {
        len,
        input,
        mask: mask.map(|(p, r)| (p.clone(), r)),
        drop_in,
        layers: layer_traces,
        final_hidden: h,
        output: output.clone(),
    });
    Ok(ForwardOutput { output, trace })
}

fn block_forward<F: Scalar>(
    p: &LayerParams<F>,
    cfg: &ModelConfig,
    h: Array2<F>,
    rng: &mut Option<&mut dyn RngCore>,
) -> (Array2<F>, LayerTrace<F>) {
    let dh = cfg.d_head();
    let (attn_in, ln1) = layer_norm(h.view(), p.ln1_gamma.view(), p.ln1_beta.view());
    let q = linear(attn_in.view(), &p.wq, &p.bq);
    let k = linear(attn_in.view(), &p.wk, &p.bk);
    let v = linear(attn_in.view(), &p.wv, &p.bv);

    let mut context = Array2::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let cols = s![.., head * dh..(head + 1) * dh];
        let w = attention_weights(q.slice(cols), k.slice(cols));
        context.slice_mut(cols).assign(&w.dot(&v.slice(cols)));
        probs.push(w);
    }
    let mut attn_out = linear(context.view(), &p.wo, &p.bo);
    let drop_attn = maybe_dropout(&mut attn_out, cfg.dropout, rng);
    let mid = h + &attn_out;

    let (ffn_in, ln2) = layer_norm(mid.view(), p.ln2_gamma.view(), p.ln2_beta.view());
    let pre_act = linear(ffn_in.view(), &p.w1, &p.b1);
    let mut hidden = pre_act.mapv(gelu);
    let drop_hidden = maybe_dropout(&mut hidden, cfg.dropout, rng);
    let mut ffn_out = linear(hidden.view(), &p.w2, &p.b2);
    let drop_out = maybe_dropout(&mut ffn_out, cfg.dropout, rng);
    let out = mid + &ffn_out;

    let trace = LayerTrace {
        ln1,
        attn_in,
        q,
        k,
        v,
        probs,
        context,
        drop_attn,
        ln2,
        ffn_in,
        pre_act,
        hidden,
        drop_hidden,
        drop_out,
    };
    (out, trace)
}

fn apply_drop<F: Scalar>(grad: &mut Array2<F>, mask: &Option<Array2<F>>) {
    if let Some(m) = mask {
        *grad *= m;
    }
}

/// Gradient of a scalar loss with respect to every parameter, given
/// `d_output = dL/dŷ` for the clip recorded in `trace`.
pub fn backward<F: Scalar>(
    trace: &ForwardTrace<F>,
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    d_output: ArrayView2<'_, F>,
) -> Result<ModelParams<F>> {
    if d_output.dim() != trace.output.dim() {
        return Err(Error::Validation(format!(
            "output gradient shape {:?} != prediction shape {:?}",
            d_output.dim(),
            trace.output.dim()
        )));
    }
    if trace.layers.len() != params.layers.len() {
        return Err(Error::Validation(format!(
            "trace has {} layers, params have {}",
            trace.layers.len(),
            params.layers.len()
        )));
    }
    let mut grads = ModelParams::zeros(cfg);

    let mut d_logits = d_output.to_owned();
    if cfg.task == Task::Va {
        d_logits.zip_mut_with(&trace.output, |g, &y| *g = *g * (F::one() - y * y));
    }
    grads.head_w = trace.final_hidden.t().dot(&d_logits);
    grads.head_b = d_logits.sum_axis(Axis(0));
    let mut dh = d_logits.dot(&params.head_w.t());

    for (i, (lt, p)) in trace.layers.iter().zip(&params.layers).enumerate().rev() {
        dh = block_backward(lt, p, cfg, dh, &mut grads.layers[i]);
    }

    apply_drop(&mut dh, &trace.drop_in);
    grads.input_w = trace.input.t().dot(&dh);
    grads.input_b = dh.sum_axis(Axis(0));
    if let Some((plan, Replacement::LearnedToken)) = &trace.mask {
        let mut summed = Array1::<F>::zeros(cfg.d_model);
        for (row, &masked) in dh.rows().into_iter().zip(plan.as_slice()) {
            if masked {
                summed += &row;
            }
        }
        grads.mask_token = params.input_w.dot(&summed);
    }
    Ok(grads)
}

fn block_backward<F: Scalar>(
    t: &LayerTrace<F>,
    p: &LayerParams<F>,
    cfg: &ModelConfig,
    d_out: Array2<F>,
    g: &mut LayerParams<F>,
) -> Array2<F> {
    let dh = cfg.d_head();

    // Feed-forward branch.
    let mut d_ffn = d_out.clone();
    apply_drop(&mut d_ffn, &t.drop_out);
    g.w2 = t.hidden.t().dot(&d_ffn);
    g.b2 = d_ffn.sum_axis(Axis(0));
    let mut d_hidden = d_ffn.dot(&p.w2.t());
    apply_drop(&mut d_hidden, &t.drop_hidden);
    d_hidden.zip_mut_with(&t.pre_act, |d, &u| *d = *d * gelu_grad(u));
    g.w1 = t.ffn_in.t().dot(&d_hidden);
    g.b1 = d_hidden.sum_axis(Axis(0));
    let d_ffn_in = d_hidden.dot(&p.w1.t());
    let (dx, dgamma, dbeta) = layer_norm_backward(&t.ln2, p.ln2_gamma.view(), d_ffn_in.view());
    g.ln2_gamma = dgamma;
    g.ln2_beta = dbeta;
    let d_mid = d_out + &dx;

    // Attention branch.
    let mut d_attn = d_mid.clone();
    apply_drop(&mut d_attn, &t.drop_attn);
    g.wo = t.context.t().dot(&d_attn);
    g.bo = d_attn.sum_axis(Axis(0));
    let d_context = d_attn.dot(&p.wo.t());
    let mut dq = Array2::zeros(t.q.raw_dim());
    let mut dk = Array2::zeros(t.k.raw_dim());
    let mut dv = Array2::zeros(t.v.raw_dim());
    for head in 0..cfg.n_heads {
        let cols = s![.., head * dh..(head + 1) * dh];
        let (q_g, k_g, v_g) = attention_backward(
            t.q.slice(cols),
            t.k.slice(cols),
            t.v.slice(cols),
            t.probs[head].view(),
            d_context.slice(cols),
        );
        dq.slice_mut(cols).assign(&q_g);
        dk.slice_mut(cols).assign(&k_g);
        dv.slice_mut(cols).assign(&v_g);
    }
    let x_t = t.attn_in.t();
    g.wq = x_t.dot(&dq);
    g.wk = x_t.dot(&dk);
    g.wv = x_t.dot(&dv);
    g.bq = dq.sum_axis(Axis(0));
    g.bk = dk.sum_axis(Axis(0));
    g.bv = dv.sum_axis(Axis(0));
    let d_attn_in = dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
    let (dx, dgamma, dbeta) = layer_norm_backward(&t.ln1, p.ln1_gamma.view(), d_attn_in.view());
    g.ln1_gamma = dgamma;
    g.ln1_beta = dbeta;
    d_mid + &dx
}
