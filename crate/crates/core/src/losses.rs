//! Task losses and their gradients with respect to the predictions.
//!
//! * focal loss `-alpha_t (1 - p_t)^gamma ln p_t` for EXPR (softmax) and AU (per-unit sigmoid)
//! * concordance loss `1 - CCC` for VA, averaged over the two dimensions
//!
//! All computation is in `f64`; the trainer converts model outputs on the way in.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Lower clamp on `p_t` inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
/// Lower clamp on the CCC denominator.
pub const CCC_DENOM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("loss.alpha = {} outside (0, 1]", self.alpha)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("loss.gamma = {} must be >= 0", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    /// Same shape as the predictions; zero on invalid frames.
    pub grad: Array2<f64>,
    /// False when no frame carried a valid label.
    pub supervised: bool,
}

impl LossOutput {
    fn unsupervised(shape: (usize, usize)) -> Self {
        LossOutput {
            loss: 0.0,
            grad: Array2::zeros(shape),
            supervised: false,
        }
    }
}

/// `-alpha (1 - p_t)^gamma ln p_t` for a directly given `p_t`.
pub fn focal_term(p_t: f64, alpha: f64, gamma: f64) -> f64 {
    focal_term_split(p_t, 1.0 - p_t, alpha, gamma)
}

// `one_minus` is passed separately so callers can supply it without cancellation.
fn focal_term_split(p_t: f64, one_minus: f64, alpha: f64, gamma: f64) -> f64 {
    let log_p = p_t.max(PROB_FLOOR).ln();
    -alpha * one_minus.max(0.0).powf(gamma) * log_p
}

/// `p_t * dL/dp_t`, which both the softmax and sigmoid chain rules need.
fn focal_dp_scaled(p_t: f64, one_minus: f64, alpha: f64, gamma: f64) -> f64 {
    let q = one_minus.max(0.0);
    let log_term = if p_t < PROB_FLOOR {
        // Clamped branch: ln p_t is constant there.
        0.0
    } else {
        -q.powf(gamma)
    };
    let focus_term = if gamma == 0.0 || q == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * p_t * p_t.max(PROB_FLOOR).ln()
    };
    alpha * (log_term + focus_term)
}

fn check_rows(what: &str, rows: usize, validity: &[bool]) -> Result<()> {
    if rows != validity.len() {
        return Err(Error::Validation(format!(
            "{what}: {rows} prediction rows but {} validity flags",
            validity.len()
        )));
    }
    Ok(())
}

/// Softmax focal loss averaged over valid frames.
pub fn focal_multiclass(
    logits: ArrayView2<'_, f64>,
    targets: &[usize],
    validity: &[bool],
    cfg: &FocalConfig,
) -> Result<LossOutput> {
    check_rows("focal_multiclass", logits.nrows(), validity)?;
    if targets.len() != validity.len() {
        return Err(Error::Validation("focal_multiclass: targets and validity lengths differ".into()));
    }
    let classes = logits.ncols();
    let n_valid = validity.iter().filter(|v| **v).count();
    if n_valid == 0 {
        return Ok(LossOutput::unsupervised(logits.dim()));
    }
    let norm = 1.0 / n_valid as f64;
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        if !validity[i] {
            continue;
        }
        let t = targets[i];
        if t >= classes {
            return Err(Error::Validation(format!("target class {t} at frame {i} >= {classes}")));
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let p_t = probs[t];
        let one_minus: f64 = probs.iter().enumerate().filter(|(j, _)| *j != t).map(|(_, p)| p).sum();
        total += focal_term_split(p_t, one_minus, cfg.alpha, cfg.gamma);
        // dL/dz_j = dL/dp_t * p_t * (delta_tj - p_j)
        let scaled = focal_dp_scaled(p_t, one_minus, cfg.alpha, cfg.gamma) * norm;
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let delta = if j == t { 1.0 } else { 0.0 };
            *g = scaled * (delta - probs[j]);
        }
    }
    Ok(LossOutput {
        loss: total * norm,
        grad,
        supervised: true,
    })
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-unit sigmoid focal loss averaged over valid (frame, unit) pairs.
/// Positive targets are weighted by `alpha`, negatives by `1 - alpha`.
pub fn focal_multilabel(
    logits: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, bool>,
    validity: &[bool],
    cfg: &FocalConfig,
) -> Result<LossOutput> {
    check_rows("focal_multilabel", logits.nrows(), validity)?;
    if targets.dim() != logits.dim() {
        return Err(Error::Validation(format!(
            "focal_multilabel: targets {:?} vs logits {:?}",
            targets.dim(),
            logits.dim()
        )));
    }
    let n_valid = validity.iter().filter(|v| **v).count() * logits.ncols();
    if n_valid == 0 {
        return Ok(LossOutput::unsupervised(logits.dim()));
    }
    let norm = 1.0 / n_valid as f64;
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0;
    for i in (0..logits.nrows()).filter(|i| validity[*i]) {
        for j in 0..logits.ncols() {
            let z = logits[[i, j]];
            let positive = targets[[i, j]];
            let (p_t, one_minus, alpha_t, sign) = if positive {
                (sigmoid(z), sigmoid(-z), cfg.alpha, 1.0)
            } else {
                (sigmoid(-z), sigmoid(z), 1.0 - cfg.alpha, -1.0)
            };
            total += focal_term_split(p_t, one_minus, alpha_t, cfg.gamma);
            // dp_t/dz = sign * p_t * (1 - p_t)
            grad[[i, j]] = focal_dp_scaled(p_t, one_minus, alpha_t, cfg.gamma) * sign * one_minus * norm;
        }
    }
    Ok(LossOutput {
        loss: total * norm,
        grad,
        supervised: true,
    })
}

/// Plain softmax cross-entropy, averaged over valid frames.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, targets: &[usize], validity: &[bool]) -> Result<LossOutput> {
    check_rows("cross_entropy", logits.nrows(), validity)?;
    let n_valid = validity.iter().filter(|v| **v).count();
    if n_valid == 0 {
        return Ok(LossOutput::unsupervised(logits.dim()));
    }
    let norm = 1.0 / n_valid as f64;
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        if !validity[i] {
            continue;
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[targets[i]];
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            *g = (p - if j == targets[i] { 1.0 } else { 0.0 }) * norm;
        }
    }
    Ok(LossOutput {
        loss: total * norm,
        grad,
        supervised: true,
    })
}

/// Population moments and the concordance coefficient of two series.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CccStats {
    pub n: usize,
    pub mean_x: f64,
    pub mean_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub cov_xy: f64,
    pub ccc: f64,
}

impl CccStats {
    /// Builds the coefficient from already-computed moments.
    pub fn from_moments(n: usize, mean_x: f64, mean_y: f64, var_x: f64, var_y: f64, cov_xy: f64, compat: bool) -> Self {
        let denom = (var_x + var_y + (mean_x - mean_y).powi(2)).max(CCC_DENOM_FLOOR);
        let numer = if compat {
            // Printed variant that multiplies the covariance by the Pearson correlation.
            let sd = (var_x * var_y).sqrt();
            if sd > 0.0 {
                2.0 * cov_xy * cov_xy / sd
            } else {
                0.0
            }
        } else {
            2.0 * cov_xy
        };
        CccStats {
            n,
            mean_x,
            mean_y,
            var_x,
            var_y,
            cov_xy,
            ccc: numer / denom,
        }
    }
}

fn check_pairs(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Validation(format!(
            "CCC inputs have lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "CCC needs at least 2 frames, got {}",
            x.len()
        )));
    }
    Ok(())
}

/// Two-pass population moments.
pub fn ccc_stats(x: &[f64], y: &[f64]) -> Result<CccStats> {
    ccc_stats_with(x, y, false)
}

pub fn ccc_stats_with(x: &[f64], y: &[f64], compat: bool) -> Result<CccStats> {
    check_pairs(x, y)?;
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let (mut var_x, mut var_y, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mean_x, b - mean_y);
        var_x += dx * dx;
        var_y += dy * dy;
        cov += dx * dy;
    }
    Ok(CccStats::from_moments(x.len(), mean_x, mean_y, var_x / n, var_y / n, cov / n, compat))
}

/// `1 - CCC(x, y)` and its gradient with respect to `x`.
pub fn ccc_loss(x: &[f64], y: &[f64], compat: bool) -> Result<(f64, Vec<f64>)> {
    let st = ccc_stats_with(x, y, compat)?;
    let n = x.len() as f64;
    let raw_denom = st.var_x + st.var_y + (st.mean_x - st.mean_y).powi(2);
    let floored = raw_denom < CCC_DENOM_FLOOR;
    let denom = raw_denom.max(CCC_DENOM_FLOOR);
    let numer = st.ccc * denom;
    let grad = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let d_cov = (yi - st.mean_y) / n;
            let d_var_x = 2.0 * (xi - st.mean_x) / n;
            let d_denom = if floored {
                0.0
            } else {
                d_var_x + 2.0 * (st.mean_x - st.mean_y) / n
            };
            let d_numer = if compat {
                let sd = (st.var_x * st.var_y).sqrt();
                if sd > 0.0 {
                    // numer = 2 cov^2 / (sx sy); d sx / dx_i = (x_i - mean_x) / (n sx)
                    4.0 * st.cov_xy * d_cov / sd - numer * 0.5 * d_var_x / st.var_x
                } else {
                    0.0
                }
            } else {
                2.0 * d_cov
            };
            -(d_numer / denom - numer * d_denom / (denom * denom))
        })
        .collect();
    Ok((1.0 - st.ccc, grad))
}

/// Mean of the valence and arousal CCC losses over valid frames.
/// Fewer than two valid frames is reported as unsupervised.
pub fn va_loss(
    preds: ArrayView2<'_, f64>,
    targets: &[[f64; 2]],
    validity: &[bool],
    compat: bool,
) -> Result<LossOutput> {
    check_rows("va_loss", preds.nrows(), validity)?;
    if preds.ncols() != 2 || targets.len() != validity.len() {
        return Err(Error::Validation("va_loss expects n x 2 predictions and n targets".into()));
    }
    let rows: Vec<usize> = (0..validity.len()).filter(|i| validity[*i]).collect();
    if rows.len() < 2 {
        return Ok(LossOutput::unsupervised(preds.dim()));
    }
    let mut grad = Array2::zeros(preds.dim());
    let mut loss = 0.0;
    for dim in 0..2 {
        let x: Vec<f64> = rows.iter().map(|&i| preds[[i, dim]]).collect();
        let y: Vec<f64> = rows.iter().map(|&i| targets[i][dim]).collect();
        let (l, g) = ccc_loss(&x, &y, compat)?;
        loss += 0.5 * l;
        for (&i, gi) in rows.iter().zip(g) {
            grad[[i, dim]] = 0.5 * gi;
        }
    }
    Ok(LossOutput {
        loss,
        grad,
        supervised: true,
    })
}
