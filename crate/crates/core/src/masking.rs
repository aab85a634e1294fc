//! Random frame masking applied to clip features before the encoder.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Replacement {
    ZeroVector,
    LearnedToken,
}

impl fmt::Display for Replacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Replacement::ZeroVector => "zero_vector",
            Replacement::LearnedToken => "learned_token",
        })
    }
}

impl FromStr for Replacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "zero_vector" | "zero" => Ok(Replacement::ZeroVector),
            "learned_token" | "token" => Ok(Replacement::LearnedToken),
            other => Err(Error::Config(format!("unknown mask replacement {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskConfig {
    /// Per-frame independent masking probability.
    pub p: f64,
    pub seed: u64,
    pub replacement: Replacement,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            p: 0.15,
            seed: 0,
            replacement: Replacement::LearnedToken,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("mask.p = {} outside [0, 1]", self.p)));
        }
        Ok(())
    }
}

/// `true` marks a masked frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan(Vec<bool>);

impl MaskPlan {
    pub fn new(masked: Vec<bool>) -> Self {
        MaskPlan(masked)
    }

    pub fn none(len: usize) -> Self {
        MaskPlan(vec![false; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn masked_count(&self) -> usize {
        self.0.iter().filter(|m| **m).count()
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|m| *m)
    }
}

pub fn sample_mask<R: Rng + ?Sized>(len: usize, cfg: &MaskConfig, rng: &mut R) -> MaskPlan {
    // p = 0 and p = 1 consume no randomness so the stream stays comparable
    // to an unmasked run.
    if cfg.p <= 0.0 {
        return MaskPlan::none(len);
    }
    if cfg.p >= 1.0 {
        return MaskPlan(vec![true; len]);
    }
    MaskPlan((0..len).map(|_| rng.random_bool(cfg.p)).collect())
}

/// Value written into masked rows.
#[derive(Clone, Copy, Debug)]
pub enum MaskFill<'a, F> {
    Zero,
    Token(ArrayView1<'a, F>),
}

pub fn apply_mask<F: Scalar>(features: ArrayView2<'_, F>, plan: &MaskPlan, fill: MaskFill<'_, F>) -> Result<Array2<F>> {
    if plan.len() != features.nrows() {
        return Err(Error::Validation(format!(
            "mask plan has {} frames, clip has {}",
            plan.len(),
            features.nrows()
        )));
    }
    if let MaskFill::Token(token) = fill {
        if token.len() != features.ncols() {
            return Err(Error::Validation(format!(
                "mask token width {} != feature width {}",
                token.len(),
                features.ncols()
            )));
        }
    }
    let mut out = features.to_owned();
    for (mut row, &masked) in out.rows_mut().into_iter().zip(plan.as_slice()) {
        if !masked {
            continue;
        }
        match fill {
            MaskFill::Zero => row.fill(F::zero()),
            MaskFill::Token(token) => row.assign(&token),
        }
    }
    Ok(out)
}
