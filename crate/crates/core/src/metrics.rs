//! Challenge metrics: pooled CCC for valence/arousal, macro F1 for
//! expressions and action units.
//!
//! Both accumulators are mergeable, so shards can be reduced in any grouping.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::losses::CccStats;
use crate::task::{Task, EXPR_NAMES};

#[derive(Clone, Debug, PartialEq)]
pub enum Scores {
    Va { ccc_v: f64, ccc_a: f64, ccc_mean: f64 },
    F1 { per_class: Vec<f64>, macro_f1: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub task: Task,
    pub scores: Scores,
    pub n_valid_frames: usize,
}

impl MetricReport {
    /// Mean CCC for VA, macro F1 otherwise. Used for model selection.
    pub fn headline(&self) -> f64 {
        match &self.scores {
            Scores::Va { ccc_mean, .. } => *ccc_mean,
            Scores::F1 { macro_f1, .. } => *macro_f1,
        }
    }

    pub fn headline_name(&self) -> &'static str {
        match self.scores {
            Scores::Va { .. } => "ccc_mean",
            Scores::F1 { .. } => "macro_f1",
        }
    }

    fn rows(&self) -> Vec<(String, String)> {
        let mut rows = vec![
            ("task".to_string(), self.task.to_string()),
            ("n_valid_frames".to_string(), self.n_valid_frames.to_string()),
        ];
        match &self.scores {
            Scores::Va { ccc_v, ccc_a, ccc_mean } => {
                rows.push(("ccc_v".into(), ccc_v.to_string()));
                rows.push(("ccc_a".into(), ccc_a.to_string()));
                rows.push(("ccc_mean".into(), ccc_mean.to_string()));
            }
            Scores::F1 { per_class, macro_f1 } => {
                for (i, f) in per_class.iter().enumerate() {
                    rows.push((format!("f1_{}", class_label(self.task, i)), f.to_string()));
                }
                rows.push(("macro_f1".into(), macro_f1.to_string()));
            }
        }
        rows
    }

    /// Two-column `metric,value` CSV. Floats use the shortest exact representation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.rows() {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.rows() {
            let v = v.parse::<f64>().ok().filter(|_| k != "n_valid_frames").map_or(v, |f| format!("{f:.4}"));
            let _ = writeln!(out, "{k:<18} {v}");
        }
        out
    }
}

fn class_label(task: Task, i: usize) -> String {
    match task {
        Task::Expr => EXPR_NAMES[i].to_lowercase(),
        _ => format!("au{i}"),
    }
}

fn check_aligned(a: usize, b: usize, validity: usize) -> Result<()> {
    if a != b || a != validity {
        return Err(Error::Validation(format!(
            "metric inputs are not aligned: {a} predictions, {b} targets, {validity} validity flags"
        )));
    }
    Ok(())
}

/// Running co-moments of one (prediction, target) series, merged with
/// Chan's pairwise update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    pub n: usize,
    mean_x: f64,
    mean_y: f64,
    m2_x: f64,
    m2_y: f64,
    c_xy: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64, y: f64) {
        self.n += 1;
        let n = self.n as f64;
        let dx = x - self.mean_x;
        let dy = y - self.mean_y;
        self.mean_x += dx / n;
        self.mean_y += dy / n;
        self.m2_x += dx * (x - self.mean_x);
        self.m2_y += dy * (y - self.mean_y);
        self.c_xy += dx * (y - self.mean_y);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let dx = other.mean_x - self.mean_x;
        let dy = other.mean_y - self.mean_y;
        self.m2_x += other.m2_x + dx * dx * na * nb / n;
        self.m2_y += other.m2_y + dy * dy * na * nb / n;
        self.c_xy += other.c_xy + dx * dy * na * nb / n;
        self.mean_x += dx * nb / n;
        self.mean_y += dy * nb / n;
        self.n += other.n;
    }

    pub fn stats(&self) -> Result<CccStats> {
        if self.n < 2 {
            return Err(Error::InsufficientData(format!(
                "CCC needs at least 2 valid frames, got {}",
                self.n
            )));
        }
        let n = self.n as f64;
        Ok(CccStats::from_moments(
            self.n,
            self.mean_x,
            self.mean_y,
            self.m2_x / n,
            self.m2_y / n,
            self.c_xy / n,
            false,
        ))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VaAccumulator {
    pub valence: Moments,
    pub arousal: Moments,
}

impl VaAccumulator {
    pub fn push(&mut self, preds: &[[f64; 2]], targets: &[[f64; 2]], validity: &[bool]) -> Result<()> {
        check_aligned(preds.len(), targets.len(), validity.len())?;
        for ((p, t), &ok) in preds.iter().zip(targets).zip(validity) {
            if ok {
                self.valence.push(p[0], t[0]);
                self.arousal.push(p[1], t[1]);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &VaAccumulator) {
        self.valence.merge(&other.valence);
        self.arousal.merge(&other.arousal);
    }

    pub fn report(&self) -> Result<MetricReport> {
        let ccc_v = self.valence.stats()?.ccc;
        let ccc_a = self.arousal.stats()?.ccc;
        Ok(va_report(ccc_v, ccc_a, self.valence.n))
    }
}

/// Builds a VA report from the two per-dimension coefficients.
pub fn va_report(ccc_v: f64, ccc_a: f64, n_valid_frames: usize) -> MetricReport {
    MetricReport {
        task: Task::Va,
        scores: Scores::Va {
            ccc_v,
            ccc_a,
            ccc_mean: (ccc_v + ccc_a) / 2.0,
        },
        n_valid_frames,
    }
}

/// CCC per dimension over all valid frames.
pub fn eval_va(preds: &[[f64; 2]], targets: &[[f64; 2]], validity: &[bool]) -> Result<MetricReport> {
    let mut acc = VaAccumulator::default();
    acc.push(preds, targets, validity)?;
    acc.report()
}

/// Per-video CCCs averaged over videos with at least two valid frames.
pub fn eval_va_per_video(videos: &[VaAccumulator]) -> Result<MetricReport> {
    let usable: Vec<_> = videos.iter().filter(|v| v.valence.n >= 2).collect();
    if usable.is_empty() {
        return Err(Error::InsufficientData("no video has 2 valid frames".into()));
    }
    let k = usable.len() as f64;
    let mut sv = 0.0;
    let mut sa = 0.0;
    for v in &usable {
        sv += v.valence.stats()?.ccc;
        sa += v.arousal.stats()?.ccc;
    }
    let n = videos.iter().map(|v| v.valence.n).sum();
    Ok(va_report(sv / k, sa / k, n))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Confusion counts per class (EXPR) or per unit (AU).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct F1Accumulator {
    task: Task,
    counts: Vec<ClassCounts>,
    n_valid: usize,
}

impl F1Accumulator {
    pub fn new(task: Task, n_classes: usize) -> Self {
        F1Accumulator {
            task,
            counts: vec![ClassCounts::default(); n_classes],
            n_valid: 0,
        }
    }

    pub fn counts(&self) -> &[ClassCounts] {
        &self.counts
    }

    pub fn n_valid(&self) -> usize {
        self.n_valid
    }

    pub fn push_classes(&mut self, preds: &[usize], targets: &[usize], validity: &[bool]) -> Result<()> {
        check_aligned(preds.len(), targets.len(), validity.len())?;
        let k = self.counts.len();
        for ((&p, &t), &ok) in preds.iter().zip(targets).zip(validity) {
            if !ok {
                continue;
            }
            if p >= k || t >= k {
                return Err(Error::Validation(format!("class {} outside 0..{k}", p.max(t))));
            }
            self.n_valid += 1;
            if p == t {
                self.counts[p].tp += 1;
            } else {
                self.counts[p].fp += 1;
                self.counts[t].fn_ += 1;
            }
        }
        Ok(())
    }

    pub fn push_bits(&mut self, preds: ArrayView2<'_, bool>, targets: ArrayView2<'_, bool>, validity: &[bool]) -> Result<()> {
        check_aligned(preds.nrows(), targets.nrows(), validity.len())?;
        let k = self.counts.len();
        if preds.ncols() != k || targets.ncols() != k {
            return Err(Error::Validation(format!(
                "expected {k} units, got {} predicted and {} target",
                preds.ncols(),
                targets.ncols()
            )));
        }
        for ((p, t), &ok) in preds.rows().into_iter().zip(targets.rows()).zip(validity) {
            if !ok {
                continue;
            }
            self.n_valid += 1;
            for (c, (&pb, &tb)) in self.counts.iter_mut().zip(p.iter().zip(t.iter())) {
                match (pb, tb) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    (false, false) => {}
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &F1Accumulator) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
        }
        self.n_valid += other.n_valid;
    }

    /// Per-class F1 and their mean, computed as exact fractions and rounded once.
    pub fn report(&self) -> MetricReport {
        let mut sum = BigRational::zero();
        let mut per_class = Vec::with_capacity(self.counts.len());
        for c in &self.counts {
            let denom = 2 * c.tp + c.fp + c.fn_;
            let f1 = if denom == 0 {
                BigRational::zero()
            } else {
                BigRational::new(BigInt::from(2 * c.tp), BigInt::from(denom))
            };
            per_class.push(f1.to_f64().unwrap_or(0.0));
            sum += f1;
        }
        let macro_f1 = if self.counts.is_empty() {
            0.0
        } else {
            (sum / BigInt::from(self.counts.len())).to_f64().unwrap_or(0.0)
        };
        MetricReport {
            task: self.task,
            scores: Scores::F1 { per_class, macro_f1 },
            n_valid_frames: self.n_valid,
        }
    }
}

/// Multiclass F1 over valid frames. `preds` are class ids (argmax of logits).
pub fn eval_f1(preds: &[usize], targets: &[usize], validity: &[bool], n_classes: usize) -> Result<MetricReport> {
    let mut acc = F1Accumulator::new(Task::Expr, n_classes);
    acc.push_classes(preds, targets, validity)?;
    Ok(acc.report())
}

/// Multi-label F1 over valid frames. `preds` are thresholded logits.
pub fn eval_f1_multilabel(preds: ArrayView2<'_, bool>, targets: ArrayView2<'_, bool>, validity: &[bool]) -> Result<MetricReport> {
    let mut acc = F1Accumulator::new(Task::Au, targets.ncols());
    acc.push_bits(preds, targets, validity)?;
    Ok(acc.report())
}

/// Reassembles per-frame rows from clip outputs. Clips are applied in order of
/// start frame, so on overlap the later-starting clip wins. Rows past the end
/// of the video (padding) are dropped.
pub fn stitch_clips(frames: usize, clips: &[(usize, ArrayView2<'_, f64>)]) -> Result<Array2<f64>> {
    let width = clips.first().map_or(0, |c| c.1.ncols());
    let mut order: Vec<usize> = (0..clips.len()).collect();
    order.sort_by_key(|&i| clips[i].0);
    let mut out = Array2::zeros((frames, width));
    let mut covered = vec![false; frames];
    for i in order {
        let (start, rows) = &clips[i];
        if rows.ncols() != width {
            return Err(Error::Validation("clip outputs have different widths".into()));
        }
        for (r, row) in rows.rows().into_iter().enumerate() {
            let f = start + r;
            if f >= frames {
                break;
            }
            out.row_mut(f).assign(&row);
            covered[f] = true;
        }
    }
    if let Some(f) = covered.iter().position(|c| !c) {
        return Err(Error::Validation(format!("frame {f} is not covered by any clip")));
    }
    Ok(out)
}
