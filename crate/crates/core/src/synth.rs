//! Synthetic corpora with a planted, smoothly drifting latent.
//!
//! An 8-dimensional latent `z_t` is white noise smoothed by a triangular
//! kernel. Features are `E z_t` plus Gaussian noise, where `E` has orthogonal
//! columns scaled so every feature coordinate has unit signal variance.
//! Labels are functions of `z_t` only:
//!
//! * EXPR: `argmax_c (b_c + r_c . z)` with orthonormal readouts `r_c`; the
//!   offsets `b` are calibrated so class frequencies match the priors.
//! * AU: `a_k . z > Phi^-1(1 - pi_k)` for random unit readouts `a_k`.
//! * VA: `tanh(gain * v . z)` for two random unit readouts.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::feature_store::{write_feature_file, write_label_csv, FeatureSequence, LabelTrack, LabelValues};
use crate::rng::{stream, Purpose};
use crate::task::{Task, AU_COUNT, EXPR_CLASSES};

pub const LATENT_DIM: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub task: Task,
    pub n_videos: usize,
    pub frames: usize,
    pub dim: usize,
    /// Seeds the planted model; videos draw from per-index streams of the same seed.
    pub seed: u64,
    /// Index of the first video. Disjoint ranges of one seed give train/val splits
    /// that share the planted model.
    pub first_video: usize,
    /// Signal-to-noise variance ratio per feature coordinate. Infinity means no noise.
    pub snr: f64,
    /// Width of each box in the triangular smoothing kernel. 1 means i.i.d. frames.
    pub smoothness: usize,
    /// EXPR: 8 class priors summing to 1. AU: 12 positive rates in (0, 1). Unused for VA.
    pub priors: Vec<f64>,
    pub va_gain: f64,
    pub invalid_rate: f64,
    /// Permute frames within each video, destroying temporal structure.
    pub shuffled: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            task: Task::Expr,
            n_videos: 4,
            frames: 500,
            dim: 32,
            seed: 0,
            first_video: 0,
            snr: 4.0,
            smoothness: 10,
            priors: Vec::new(),
            va_gain: 1.0,
            invalid_rate: 0.05,
            shuffled: false,
        }
    }
}

impl SynthSpec {
    /// The priors in effect: the configured ones or uniform / 0.2 defaults.
    pub fn effective_priors(&self) -> Vec<f64> {
        if !self.priors.is_empty() {
            return self.priors.clone();
        }
        match self.task {
            Task::Expr => vec![1.0 / EXPR_CLASSES as f64; EXPR_CLASSES],
            Task::Au => vec![0.2; AU_COUNT],
            Task::Va => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_videos == 0 || self.frames == 0 {
            return bad("synthetic corpus needs at least one video and one frame".into());
        }
        if self.dim < LATENT_DIM {
            return bad(format!("synthetic dim must be at least {LATENT_DIM}, got {}", self.dim));
        }
        if self.snr.is_nan() || self.snr <= 0.0 {
            return bad(format!("snr must be positive, got {}", self.snr));
        }
        if self.smoothness == 0 {
            return bad("smoothness must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.invalid_rate) {
            return bad(format!("invalid_rate must be in [0, 1), got {}", self.invalid_rate));
        }
        if !(self.va_gain.is_finite() && self.va_gain > 0.0) {
            return bad(format!("va_gain must be positive, got {}", self.va_gain));
        }
        let p = self.effective_priors();
        match self.task {
            Task::Expr => {
                let sum: f64 = p.iter().sum();
                if p.len() != EXPR_CLASSES || p.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-9 {
                    return bad(format!("EXPR priors must be {EXPR_CLASSES} values summing to 1, got {p:?}"));
                }
            }
            Task::Au => {
                if p.len() != AU_COUNT || p.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
                    return bad(format!("AU priors must be {AU_COUNT} values in (0, 1), got {p:?}"));
                }
            }
            Task::Va => {}
        }
        Ok(())
    }
}

/// The planted generative model shared by all videos of one seed.
#[derive(Clone, Debug)]
pub struct SynthModel {
    /// `dim x 8`.
    pub embedding: Array2<f64>,
    /// `outputs x 8`.
    pub readout: Array2<f64>,
    /// Class offsets (EXPR) or thresholds (AU); empty for VA.
    pub offsets: Array1<f64>,
}

/// Orthonormal columns via Gram-Schmidt on a Gaussian matrix.
fn orthonormal_columns<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    loop {
        let mut m: Array2<f64> = Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng));
        let mut ok = true;
        for j in 0..cols {
            for i in 0..j {
                let proj = m.column(i).dot(&m.column(j));
                let ci = m.column(i).to_owned();
                m.column_mut(j).scaled_add(-proj, &ci);
            }
            let norm = m.column(j).dot(&m.column(j)).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            m.column_mut(j).mapv_inplace(|v| v / norm);
        }
        if ok {
            return m;
        }
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `P(argmax_c (b_c + u_c) = c)` for i.i.d. standard normal `u`, by Simpson's
/// rule on the one-dimensional integral. Classes with `b = -inf` never win.
pub fn argmax_probabilities(offsets: &[f64]) -> Vec<f64> {
    const LO: f64 = -9.0;
    const HI: f64 = 9.0;
    const N: usize = 1800;
    let h = (HI - LO) / N as f64;
    let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
    offsets
        .iter()
        .enumerate()
        .map(|(c, &bc)| {
            if bc == f64::NEG_INFINITY {
                return 0.0;
            }
            let mut total = 0.0;
            for i in 0..=N {
                let u = LO + h * i as f64;
                let w = if i == 0 || i == N {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                let mut f = phi(u);
                for (j, &bj) in offsets.iter().enumerate() {
                    if j != c && bj != f64::NEG_INFINITY {
                        f *= std_normal_cdf(u + bc - bj);
                    }
                }
                total += w * f;
            }
            total * h / 3.0
        })
        .collect()
}

/// Offsets whose argmax frequencies match `priors` (fixed-point iteration).
pub fn calibrate_offsets(priors: &[f64]) -> Vec<f64> {
    let mut b: Vec<f64> = priors
        .iter()
        .map(|&p| if p > 0.0 { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    let first = priors.iter().copied().find(|&p| p > 0.0);
    if priors.iter().all(|&p| p == 0.0 || Some(p) == first) {
        // Equal priors: zero offsets by symmetry.
        return b;
    }
    for _ in 0..500 {
        let probs = argmax_probabilities(&b);
        let mut worst = 0.0f64;
        for ((bc, &p), &q) in b.iter_mut().zip(priors).zip(&probs) {
            if p > 0.0 {
                let step = (p / q).ln();
                worst = worst.max(step.abs());
                *bc += step;
            }
        }
        // Offsets are defined up to a constant; pin the mean of the finite ones.
        let finite: Vec<f64> = b.iter().copied().filter(|v| v.is_finite()).collect();
        let mean = finite.iter().sum::<f64>() / finite.len() as f64;
        b.iter_mut().filter(|v| v.is_finite()).for_each(|v| *v -= mean);
        if worst < 1e-10 {
            break;
        }
    }
    b
}

impl SynthModel {
    pub fn new(spec: &SynthSpec) -> Self {
        let mut rng = stream(spec.seed, 0, 0, Purpose::Synth, 0);
        let scale = (spec.dim as f64 / LATENT_DIM as f64).sqrt();
        let embedding = orthonormal_columns(spec.dim, LATENT_DIM, &mut rng) * scale;
        let (readout, offsets) = match spec.task {
            Task::Expr => {
                let r = orthonormal_columns(LATENT_DIM, LATENT_DIM, &mut rng).reversed_axes();
                (r, Array1::from(calibrate_offsets(&spec.effective_priors())))
            }
            Task::Au => {
                let r = unit_rows(AU_COUNT, &mut rng);
                let normal = Normal::standard();
                let t = spec.effective_priors().iter().map(|p| normal.inverse_cdf(1.0 - p)).collect();
                (r, Array1::from_vec(t))
            }
            Task::Va => (unit_rows(2, &mut rng), Array1::zeros(0)),
        };
        SynthModel {
            embedding,
            readout,
            offsets,
        }
    }
}

fn unit_rows<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    let mut m: Array2<f64> = Array2::from_shape_simple_fn((n, LATENT_DIM), || StandardNormal.sample(rng));
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    m
}

/// Unit-L2 triangular kernel: a box of width `w` convolved with itself.
fn smoothing_kernel(w: usize) -> Vec<f64> {
    let len = 2 * w - 1;
    let raw: Vec<f64> = (0..len).map(|i| (w - (i as isize - (w as isize - 1)).unsigned_abs()) as f64).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    raw.into_iter().map(|v| v / norm).collect()
}

/// `frames x 8` latent with unit marginal variance.
fn latent<R: Rng + ?Sized>(frames: usize, smoothness: usize, rng: &mut R) -> Array2<f64> {
    let kernel = smoothing_kernel(smoothness);
    let k = kernel.len();
    let noise: Array2<f64> = Array2::from_shape_simple_fn((frames + k - 1, LATENT_DIM), || StandardNormal.sample(rng));
    let mut z = Array2::<f64>::zeros((frames, LATENT_DIM));
    for t in 0..frames {
        for (i, w) in kernel.iter().enumerate() {
            z.row_mut(t).scaled_add(*w, &noise.row(t + i));
        }
    }
    z
}

pub struct SynthVideo {
    pub features: FeatureSequence,
    pub labels: LabelTrack,
    /// The planted latent, `frames x 8`.
    pub latent: Array2<f64>,
}

pub fn video_id(index: usize) -> String {
    format!("vid{index:04}")
}

fn labels_from_latent(spec: &SynthSpec, model: &SynthModel, z: &Array2<f64>, validity: Vec<bool>) -> Result<LabelTrack> {
    let scores = z.dot(&model.readout.t());
    let values = match spec.task {
        Task::Expr => LabelValues::Expr(
            scores
                .rows()
                .into_iter()
                .zip(validity.iter())
                .map(|(row, &ok)| {
                    if !ok {
                        return 0;
                    }
                    let mut best = 0;
                    let mut best_v = f64::NEG_INFINITY;
                    for (c, (&s, &b)) in row.iter().zip(model.offsets.iter()).enumerate() {
                        if s + b > best_v {
                            best_v = s + b;
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect(),
        ),
        Task::Au => LabelValues::Au(
            scores
                .rows()
                .into_iter()
                .zip(validity.iter())
                .map(|(row, &ok)| {
                    let mut bits = [false; AU_COUNT];
                    if ok {
                        for (k, bit) in bits.iter_mut().enumerate() {
                            *bit = row[k] > model.offsets[k];
                        }
                    }
                    bits
                })
                .collect(),
        ),
        Task::Va => LabelValues::Va(
            scores
                .rows()
                .into_iter()
                .zip(validity.iter())
                .map(|(row, &ok)| {
                    if ok {
                        [(spec.va_gain * row[0]).tanh(), (spec.va_gain * row[1]).tanh()]
                    } else {
                        [0.0, 0.0]
                    }
                })
                .collect(),
        ),
    };
    LabelTrack::new(values, validity)
}

/// One video. Deterministic in `(spec.seed, index)`.
pub fn generate_video(spec: &SynthSpec, model: &SynthModel, index: usize) -> Result<SynthVideo> {
    let mut rng = stream(spec.seed, 0, 0, Purpose::Synth, 1 + index as u64);
    let mut z = latent(spec.frames, spec.smoothness, &mut rng);
    let mut x = z.dot(&model.embedding.t());
    if spec.snr.is_finite() {
        let sd = (1.0 / spec.snr).sqrt();
        x.mapv_inplace(|v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            v + sd * e
        });
    }
    let validity: Vec<bool> = (0..spec.frames).map(|_| !rng.random_bool(spec.invalid_rate)).collect();
    if spec.shuffled {
        let mut order: Vec<usize> = (0..spec.frames).collect();
        order.shuffle(&mut rng);
        x = x.select(Axis(0), &order);
        z = z.select(Axis(0), &order);
        // Validity is i.i.d. per frame, so it needs no permutation.
    }
    let labels = labels_from_latent(spec, model, &z, validity)?;
    let features = FeatureSequence::new(video_id(index), x.mapv(|v| v as f32))?;
    Ok(SynthVideo {
        features,
        labels,
        latent: z,
    })
}

/// All videos of the spec, generated in parallel.
pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthVideo>> {
    spec.validate()?;
    let model = SynthModel::new(spec);
    (spec.first_video..spec.first_video + spec.n_videos)
        .into_par_iter()
        .map(|i| generate_video(spec, &model, i))
        .collect()
}

pub fn label_file_name(video_id: &str, task: Task) -> String {
    format!("{video_id}.{}.csv", task.as_str().to_lowercase())
}

pub const MANIFEST_NAME: &str = "manifest.csv";

/// Writes `<id>.afsq`, `<id>.<task>.csv` and `manifest.csv` into `dir`.
pub fn write_corpus(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    let videos = generate(spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    let mut manifest = String::from("video_id,frames,task\n");
    let mut ids = Vec::new();
    for v in &videos {
        let id = v.features.video_id();
        write_feature_file(&v.features, dir.join(format!("{id}.afsq")))?;
        write_label_csv(&v.labels, dir.join(label_file_name(id, spec.task)))?;
        manifest.push_str(&format!("{id},{},{}\n", v.features.frames(), spec.task));
        ids.push(id.to_string());
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| Error::storage(&path, e))?;
    Ok(ids)
}
