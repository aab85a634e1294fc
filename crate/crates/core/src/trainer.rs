//! Training loop, evaluation and the masking-probability sweep.
//!
//! Every random draw comes from a stream keyed by (seed, epoch, step,
//! purpose, clip index), and per-clip gradients are summed in clip order, so
//! results do not depend on the number of worker threads.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, OptimizerSection, Progress};
use crate::config::TrainConfig;
use crate::corpus::{load_corpus, Corpus, Video};
use crate::error::{Error, Result};
use crate::feature_store::{render_label_rows, window, Clip, LabelTrack, LabelValues};
use crate::losses::{focal_multiclass, focal_multilabel, va_loss, LossOutput};
use crate::masking::{sample_mask, MaskPlan};
use crate::metrics::{eval_va_per_video, stitch_clips, F1Accumulator, MetricReport, VaAccumulator};
use crate::optimizer::{self, OptState};
use crate::rng::{stream, stream_seed, Purpose};
use crate::task::{Task, AU_COUNT};
use crate::transformer::{backward, forward, ForwardTrace, Mode, ModelConfig, ModelParams};

pub const LAST_CHECKPOINT: &str = "last.afck";
pub const BEST_CHECKPOINT: &str = "best.afck";
pub const DIAGNOSTIC_CHECKPOINT: &str = "diagnostic.afck";
pub const TRAIN_LOG: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    /// `None` when the batch had no valid labels and no update was made.
    pub loss: Option<f64>,
    pub metric: Option<f64>,
}

impl LogRow {
    fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!("{},{},{}\n", self.step, opt(self.loss), opt(self.metric))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final parameters with optimizer state and progress.
    pub last: Checkpoint,
    /// Best validation checkpoint and its report.
    pub best: Option<(Checkpoint, MetricReport)>,
    /// Report from the last evaluation.
    pub final_report: Option<MetricReport>,
    pub log: Vec<LogRow>,
}

/// Runs `f` on a one-thread pool when `single` is set.
pub fn with_threads<T: Send>(single: bool, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if !single {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    pool.install(f)
}

struct LogFile(Option<File>);

impl LogFile {
    fn open(dir: Option<&Path>, append: bool) -> Result<Self> {
        let Some(dir) = dir else { return Ok(LogFile(None)) };
        let path = dir.join(TRAIN_LOG);
        let file = if append && path.exists() {
            OpenOptions::new().append(true).open(&path)
        } else {
            File::create(&path).and_then(|mut f| f.write_all(b"step,loss,metric\n").map(|_| f))
        };
        file.map(|f| LogFile(Some(f))).map_err(|e| Error::storage(&path, e))
    }

    fn push(&mut self, row: &LogRow, dir: Option<&Path>) -> Result<()> {
        if let (Some(f), Some(dir)) = (self.0.as_mut(), dir) {
            f.write_all(row.csv().as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| Error::storage(dir.join(TRAIN_LOG), e))?;
        }
        Ok(())
    }
}

fn check_corpus(cfg: &TrainConfig, corpus: &Corpus, what: &str) -> Result<()> {
    if corpus.task != cfg.task {
        return Err(Error::Config(format!(
            "{what} corpus holds {} labels but the run is configured for {}",
            corpus.task, cfg.task
        )));
    }
    Ok(())
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, epoch, 0, Purpose::Shuffle, 0));
    order
}

/// Task loss over the concatenated frames of a batch.
fn batch_loss(cfg: &TrainConfig, clips: &[&Clip], outputs: &[Array2<f32>]) -> Result<LossOutput> {
    let rows: usize = outputs.iter().map(|o| o.nrows()).sum();
    let width = outputs[0].ncols();
    let mut preds = Array2::<f64>::zeros((rows, width));
    let mut validity = Vec::with_capacity(rows);
    let mut r = 0;
    for (clip, out) in clips.iter().zip(outputs) {
        preds
            .slice_mut(s![r..r + out.nrows(), ..])
            .assign(&out.mapv(f64::from));
        validity.extend_from_slice(clip.validity());
        r += out.nrows();
    }
    match cfg.task {
        Task::Expr => {
            let mut targets = Vec::with_capacity(rows);
            for c in clips {
                let LabelValues::Expr(v) = c.labels.values() else { unreachable!() };
                targets.extend(v.iter().map(|&x| x as usize));
            }
            focal_multiclass(preds.view(), &targets, &validity, &cfg.loss)
        }
        Task::Au => {
            let mut targets = Array2::from_elem((rows, AU_COUNT), false);
            let mut r = 0;
            for c in clips {
                let LabelValues::Au(v) = c.labels.values() else { unreachable!() };
                for bits in v {
                    targets.row_mut(r).iter_mut().zip(bits).for_each(|(t, b)| *t = *b);
                    r += 1;
                }
            }
            focal_multilabel(preds.view(), targets.view(), &validity, &cfg.loss)
        }
        Task::Va => {
            let mut targets = Vec::with_capacity(rows);
            for c in clips {
                let LabelValues::Va(v) = c.labels.values() else { unreachable!() };
                targets.extend_from_slice(v);
            }
            va_loss(preds.view(), &targets, &validity, cfg.ccc_compat)
        }
    }
}

struct StepContext<'a> {
    cfg: &'a TrainConfig,
    model: &'a ModelConfig,
    mask_seed: u64,
    epoch: u64,
    step: u64,
}

impl StepContext<'_> {
    fn plan(&self, i: usize, len: usize) -> MaskPlan {
        let mut rng = stream(self.mask_seed, self.epoch, self.step, Purpose::Mask, i as u64);
        sample_mask(len, &self.cfg.mask, &mut rng)
    }

    fn forward_train(&self, params: &ModelParams<f32>, clip: &Clip, plan: &MaskPlan, i: usize) -> Result<(Array2<f32>, ForwardTrace<f32>)> {
        let mut rng = stream(self.cfg.seed, self.epoch, self.step, Purpose::Dropout, i as u64);
        let x = clip.features.view();
        let out = forward(params, self.model, x, Some((plan, self.cfg.mask.replacement)), Mode::Train(&mut rng))?;
        let trace = out.trace.expect("training forward records a trace");
        Ok((out.output, trace))
    }
}

/// One optimizer step over `batch`. Returns the loss, or `None` if the batch
/// carried no valid label.
fn train_step(
    ctx: &StepContext<'_>,
    params: &mut ModelParams<f32>,
    opt: &mut OptState<f32>,
    batch: &[&Clip],
) -> Result<Option<f64>> {
    let plans: Vec<MaskPlan> = batch.iter().enumerate().map(|(i, c)| ctx.plan(i, c.len())).collect();
    let keep = batch.len() <= ctx.cfg.micro_batch;
    let p: &ModelParams<f32> = params;
    let first: Vec<(Array2<f32>, Option<ForwardTrace<f32>>)> = batch
        .par_iter()
        .zip(plans.par_iter())
        .enumerate()
        .map(|(i, (clip, plan))| {
            let (out, trace) = ctx.forward_train(p, clip, plan, i)?;
            Ok((out, keep.then_some(trace)))
        })
        .collect::<Result<_>>()?;
    let (outputs, traces): (Vec<_>, Vec<_>) = first.into_iter().unzip();

    let loss = batch_loss(ctx.cfg, batch, &outputs)?;
    if !loss.supervised {
        return Ok(None);
    }
    if !loss.loss.is_finite() {
        return Err(Error::numeric(format!("loss at step {}", ctx.step), "non-finite loss"));
    }
    let mut offsets = Vec::with_capacity(batch.len());
    let mut r = 0;
    for o in &outputs {
        offsets.push(r);
        r += o.nrows();
    }
    let d_out = |i: usize| -> Array2<f32> {
        let n = outputs[i].nrows();
        loss.grad.slice(s![offsets[i]..offsets[i] + n, ..]).mapv(|v| v as f32)
    };

    let mut total = ModelParams::<f32>::zeros(ctx.model);
    let idx: Vec<usize> = (0..batch.len()).collect();
    if keep {
        let traces: Vec<ForwardTrace<f32>> = traces.into_iter().map(|t| t.expect("kept")).collect();
        let grads: Vec<ModelParams<f32>> = traces
            .par_iter()
            .enumerate()
            .map(|(i, t)| backward(t, p, ctx.model, d_out(i).view()))
            .collect::<Result<_>>()?;
        grads.iter().for_each(|g| total.add_assign(g));
    } else {
        for chunk in idx.chunks(ctx.cfg.micro_batch) {
            // Same streams as the first pass, so the trace matches the outputs used for the loss.
            let grads: Vec<ModelParams<f32>> = chunk
                .par_iter()
                .map(|&i| {
                    let (_, trace) = ctx.forward_train(p, batch[i], &plans[i], i)?;
                    backward(&trace, p, ctx.model, d_out(i).view())
                })
                .collect::<Result<_>>()?;
            grads.iter().for_each(|g| total.add_assign(g));
        }
    }
    optimizer::step(params, &total, opt, &ctx.cfg.optim)?;
    Ok(Some(loss.loss))
}

/// Trains on `train`, evaluating on `val` when given. Files are written to
/// `cfg.out_dir` when it is set. A `resume` checkpoint continues its run.
pub fn train(cfg: &TrainConfig, train: &Corpus, val: Option<&Corpus>, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_corpus(cfg, train, "training")?;
    if let Some(v) = val {
        check_corpus(cfg, v, "validation")?;
        if v.dim() != train.dim() {
            return Err(Error::Config(format!(
                "validation features have dim {}, training features {}",
                v.dim(),
                train.dim()
            )));
        }
    }
    let model = cfg.model_for(train.dim());
    model.validate()?;
    let out_dir = cfg.out_dir.as_deref();
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::storage(d, e))?;
    }

    let resuming = resume.is_some();
    let (mut params, mut opt, mut progress) = match resume {
        Some(ck) => {
            if ck.config != model {
                return Err(Error::Config("resume checkpoint was trained with a different model config".into()));
            }
            let opt = ck.optimizer.map(|o| o.state).unwrap_or_else(|| OptState::new(&model));
            let progress = ck.progress.unwrap_or(Progress {
                epoch: 0,
                batch: 0,
                global_step: 0,
                best_metric: f64::NEG_INFINITY,
            });
            (ck.params, opt, progress)
        }
        None => {
            let mut rng = stream(cfg.seed, 0, 0, Purpose::Init, 0);
            (
                ModelParams::init(&model, &mut rng),
                OptState::new(&model),
                Progress {
                    epoch: 0,
                    batch: 0,
                    global_step: 0,
                    best_metric: f64::NEG_INFINITY,
                },
            )
        }
    };
    let snapshot = |params: &ModelParams<f32>, opt: &OptState<f32>, progress: Progress| Checkpoint {
        config: model.clone(),
        params: params.clone(),
        optimizer: Some(OptimizerSection {
            config: cfg.optim,
            state: opt.clone(),
        }),
        progress: Some(progress),
    };
    if let Some(d) = out_dir {
        fs::write(d.join("config.txt"), cfg.to_text()).map_err(|e| Error::storage(d.join("config.txt"), e))?;
    }

    let clips = train.clips(cfg.clip_len, cfg.stride)?;
    let n_batches = clips.len().div_ceil(cfg.batch_size) as u64;
    let mask_seed = stream_seed(cfg.mask.seed, cfg.seed, 0, Purpose::Mask, 0);
    let mut log_file = LogFile::open(out_dir, resuming)?;
    let mut log = Vec::new();
    let mut best: Option<(Checkpoint, MetricReport)> = None;
    let mut final_report = None;
    let mut evaluated_at: Option<u64> = None;

    let evaluate_now = |params: &ModelParams<f32>, opt: &OptState<f32>, progress: &mut Progress, best: &mut Option<(Checkpoint, MetricReport)>| -> Result<Option<MetricReport>> {
        let Some(v) = val else { return Ok(None) };
        let report = evaluate_params(params, &model, v, cfg.per_video)?;
        log::info!("step {}: val {} {:.4}", progress.global_step, report.headline_name(), report.headline());
        if report.headline() > progress.best_metric {
            progress.best_metric = report.headline();
            let ck = snapshot(params, opt, *progress);
            if let Some(d) = out_dir {
                ck.save(d.join(BEST_CHECKPOINT))?;
            }
            *best = Some((ck, report.clone()));
        }
        Ok(Some(report))
    };

    'epochs: for epoch in progress.epoch..cfg.epochs {
        let order = epoch_order(clips.len(), cfg.seed, epoch);
        let first_batch = if epoch == progress.epoch { progress.batch } else { 0 };
        for b in first_batch..n_batches {
            if cfg.max_steps.is_some_and(|m| progress.global_step >= m) {
                break 'epochs;
            }
            let lo = (b as usize) * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(clips.len());
            let batch: Vec<&Clip> = order[lo..hi].iter().map(|&i| &clips[i]).collect();
            let ctx = StepContext {
                cfg,
                model: &model,
                mask_seed,
                epoch,
                step: progress.global_step,
            };
            let loss = match train_step(&ctx, &mut params, &mut opt, &batch) {
                Ok(l) => l,
                Err(e @ Error::Numeric { .. }) => {
                    log::error!("step {}: {e}", progress.global_step);
                    if let Some(d) = out_dir {
                        snapshot(&params, &opt, progress).save(d.join(DIAGNOSTIC_CHECKPOINT))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            progress.global_step += 1;
            progress.batch = b + 1;
            let end_of_epoch = b + 1 == n_batches;
            if end_of_epoch {
                progress.epoch = epoch + 1;
                progress.batch = 0;
            }
            let due = if cfg.eval_every > 0 {
                progress.global_step % cfg.eval_every == 0
            } else {
                end_of_epoch
            };
            let mut metric = None;
            if due {
                if let Some(r) = evaluate_now(&params, &opt, &mut progress, &mut best)? {
                    metric = Some(r.headline());
                    final_report = Some(r);
                    evaluated_at = Some(progress.global_step);
                }
            }
            let row = LogRow {
                step: progress.global_step,
                loss,
                metric,
            };
            log_file.push(&row, out_dir)?;
            log.push(row);
        }
    }
    if evaluated_at != Some(progress.global_step) || final_report.is_none() {
        if let Some(r) = evaluate_now(&params, &opt, &mut progress, &mut best)? {
            final_report = Some(r);
        }
    }
    let last = snapshot(&params, &opt, progress);
    if let Some(d) = out_dir {
        last.save(d.join(LAST_CHECKPOINT))?;
        if let Some(r) = &final_report {
            fs::write(d.join("report.csv"), r.to_csv()).map_err(|e| Error::storage(d.join("report.csv"), e))?;
        }
    }
    Ok(TrainOutcome {
        last,
        best,
        final_report,
        log,
    })
}

/// Per-frame outputs for one video: tanh-squashed values for VA, logits otherwise.
/// Windows use stride `max_len`; on overlap the later clip wins.
pub fn predict_video(params: &ModelParams<f32>, model: &ModelConfig, video: &Video) -> Result<Array2<f64>> {
    let t = model.max_len;
    let clips = window(&video.features, &video.labels, t, t)?;
    let outputs: Vec<(usize, Array2<f64>)> = clips
        .iter()
        .map(|c| {
            let out = forward(params, model, c.features.view(), None, Mode::Eval)?;
            assert!(out.trace.is_none(), "evaluation must not run in training mode");
            Ok((c.start_frame, out.output.mapv(f64::from)))
        })
        .collect::<Result<_>>()?;
    let views: Vec<(usize, ArrayView2<'_, f64>)> = outputs.iter().map(|(s, o)| (*s, o.view())).collect();
    stitch_clips(video.features.frames(), &views)
}

fn argmax_rows(x: &Array2<f64>) -> Vec<usize> {
    x.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Predictions as a fully valid label track (argmax for EXPR, logit > 0 for AU).
pub fn prediction_track(task: Task, preds: &Array2<f64>) -> Result<LabelTrack> {
    let n = preds.nrows();
    let values = match task {
        Task::Va => LabelValues::Va(preds.rows().into_iter().map(|r| [r[0], r[1]]).collect()),
        Task::Expr => LabelValues::Expr(argmax_rows(preds).into_iter().map(|c| c as u8).collect()),
        Task::Au => LabelValues::Au(
            preds
                .rows()
                .into_iter()
                .map(|r| {
                    let mut bits = [false; AU_COUNT];
                    bits.iter_mut().zip(r.iter()).for_each(|(b, &v)| *b = v > 0.0);
                    bits
                })
                .collect(),
        ),
    };
    LabelTrack::new(values, vec![true; n])
}

/// Evaluates parameters on a corpus without masking or dropout.
pub fn evaluate_params(params: &ModelParams<f32>, model: &ModelConfig, corpus: &Corpus, per_video: bool) -> Result<MetricReport> {
    Ok(evaluate_with_predictions(params, model, corpus, per_video)?.0)
}

fn evaluate_with_predictions(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    corpus: &Corpus,
    per_video: bool,
) -> Result<(MetricReport, Vec<Array2<f64>>)> {
    if corpus.task != model.task {
        return Err(Error::Config(format!(
            "model predicts {} but corpus holds {} labels",
            model.task, corpus.task
        )));
    }
    if corpus.dim() != model.dim_in {
        return Err(Error::Config(format!(
            "corpus features have dim {}, model expects {}",
            corpus.dim(),
            model.dim_in
        )));
    }
    if corpus.valid_frames() == 0 {
        return Err(Error::InsufficientData("corpus has no valid labelled frames".into()));
    }
    let preds: Vec<Array2<f64>> = corpus
        .videos
        .par_iter()
        .map(|v| predict_video(params, model, v))
        .collect::<Result<_>>()?;
    let report = match model.task {
        Task::Va => {
            let accs: Vec<VaAccumulator> = corpus
                .videos
                .iter()
                .zip(&preds)
                .map(|(v, p)| {
                    let LabelValues::Va(t) = v.labels.values() else { unreachable!() };
                    let rows: Vec<[f64; 2]> = p.rows().into_iter().map(|r| [r[0], r[1]]).collect();
                    let mut acc = VaAccumulator::default();
                    acc.push(&rows, t, v.labels.validity())?;
                    Ok(acc)
                })
                .collect::<Result<_>>()?;
            if per_video {
                eval_va_per_video(&accs)?
            } else {
                let mut pooled = VaAccumulator::default();
                accs.iter().for_each(|a| pooled.merge(a));
                pooled.report()?
            }
        }
        Task::Expr => {
            let mut acc = F1Accumulator::new(Task::Expr, model.head_out());
            for (v, p) in corpus.videos.iter().zip(&preds) {
                let LabelValues::Expr(t) = v.labels.values() else { unreachable!() };
                let targets: Vec<usize> = t.iter().map(|&c| c as usize).collect();
                acc.push_classes(&argmax_rows(p), &targets, v.labels.validity())?;
            }
            acc.report()
        }
        Task::Au => {
            let mut acc = F1Accumulator::new(Task::Au, AU_COUNT);
            for (v, p) in corpus.videos.iter().zip(&preds) {
                let LabelValues::Au(t) = v.labels.values() else { unreachable!() };
                let targets = Array2::from_shape_fn((t.len(), AU_COUNT), |(i, k)| t[i][k]);
                let bits = p.mapv(|x| x > 0.0);
                acc.push_bits(bits.view(), targets.view(), v.labels.validity())?;
            }
            acc.report()
        }
    };
    Ok((report, preds))
}

/// Loads a checkpoint and evaluates it on the corpus in `dir`. With `out`,
/// writes `report.csv` and one `<id>.pred.csv` per video there.
pub fn evaluate(checkpoint: &Checkpoint, dir: impl AsRef<Path>, task: Task, per_video: bool, out: Option<&Path>) -> Result<MetricReport> {
    if checkpoint.config.task != task {
        return Err(Error::Config(format!(
            "checkpoint was trained for {}, evaluation requested {task}",
            checkpoint.config.task
        )));
    }
    let corpus = load_corpus(dir, task)?;
    let (report, preds) = evaluate_with_predictions(&checkpoint.params, &checkpoint.config, &corpus, per_video)?;
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| Error::storage(out, e))?;
        fs::write(out.join("report.csv"), report.to_csv()).map_err(|e| Error::storage(out.join("report.csv"), e))?;
        for (v, p) in corpus.videos.iter().zip(&preds) {
            let track = prediction_track(task, p)?;
            let path = out.join(format!("{}.pred.csv", v.features.video_id()));
            fs::write(&path, render_label_rows(&track, true)).map_err(|e| Error::storage(&path, e))?;
        }
    }
    Ok(report)
}

/// Corpora named by the config's paths.
pub fn load_corpora(cfg: &TrainConfig) -> Result<(Corpus, Option<Corpus>)> {
    let train_dir = cfg
        .train_dir
        .as_ref()
        .ok_or_else(|| Error::Config("paths.train is not set".into()))?;
    let train = load_corpus(train_dir, cfg.task)?;
    let val = cfg.val_dir.as_ref().map(|d| load_corpus(d, cfg.task)).transpose()?;
    Ok((train, val))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub p: f64,
    pub metric: f64,
}

/// One training run per masking probability, otherwise identical. Each run
/// writes into `out_dir/p_<p>` when an output directory is configured.
pub fn sweep_mask(cfg: &TrainConfig, train_set: &Corpus, val: &Corpus, ps: &[f64]) -> Result<Vec<SweepRow>> {
    if ps.is_empty() {
        return Err(Error::Config("sweep needs at least one p value".into()));
    }
    let mut rows = Vec::with_capacity(ps.len());
    for &p in ps {
        let mut run = cfg.clone();
        run.mask.p = p;
        run.out_dir = cfg.out_dir.as_ref().map(|d| d.join(format!("p_{p}")));
        let outcome = train(&run, train_set, Some(val), None)?;
        let metric = outcome
            .final_report
            .map(|r| r.headline())
            .ok_or_else(|| Error::InsufficientData("sweep run produced no validation report".into()))?;
        rows.push(SweepRow { p, metric });
    }
    if let Some(d) = &cfg.out_dir {
        let path: PathBuf = d.join("sweep.csv");
        fs::write(&path, sweep_csv(&rows)).map_err(|e| Error::storage(&path, e))?;
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("p,metric\n");
    for r in rows {
        s.push_str(&format!("{},{}\n", r.p, r.metric));
    }
    s
}
