//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use affect_core::checkpoint::{Checkpoint, OptimizerSection, Progress};
use affect_core::config::TrainConfig;
use affect_core::corpus::{Corpus, Video};
use affect_core::feature_store::{read_feature_file, write_feature_file, FeatureSequence};
use affect_core::losses::{cross_entropy, focal_multiclass, focal_multilabel, focal_term, ccc_loss, ccc_stats, FocalConfig};
use affect_core::masking::{sample_mask, MaskConfig, Replacement};
use affect_core::metrics::{eval_f1, va_report};
use affect_core::optimizer::{AdamWConfig, OptState};
use affect_core::rng::{stream, Purpose};
use affect_core::synth::{generate, SynthSpec};
use affect_core::trainer::{evaluate_params, train, with_threads, BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG};
use affect_core::transformer::{forward, Mode, ModelConfig, ModelParams};
use affect_core::Task;
use common::{finite_difference_check, gradcheck_config};
use ndarray::{array, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn synth_corpus(spec: &SynthSpec) -> Corpus {
    let videos = generate(spec)
        .expect("synthetic corpus")
        .into_iter()
        .map(|v| Video {
            features: v.features,
            labels: v.labels,
        })
        .collect();
    Corpus::new(spec.task, videos).expect("corpus")
}

fn tiny_run(task: Task) -> TrainConfig {
    let mut cfg = TrainConfig {
        task,
        clip_len: 100,
        stride: 100,
        micro_batch: 32,
        ..TrainConfig::default()
    };
    cfg.model.d_model = 32;
    cfg.model.n_heads = 2;
    cfg.model.n_layers = 2;
    cfg.model.d_ff = 64;
    cfg.model.task = task;
    cfg.optim.lr = 1e-3;
    cfg
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut tensors = 0;
    for task in [Task::Expr, Task::Au, Task::Va] {
        let cfg = gradcheck_config(task);
        for seed in 0..5 {
            for c in finite_difference_check(&cfg, seed, 1e-3) {
                tensors += 1;
                if c.rel_error > worst.0 {
                    worst = (c.rel_error, format!("{task} seed {seed} {}", c.name));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst.0 < 1e-4 && elapsed < Duration::from_secs(30),
        format!(
            "{tensors} tensor checks, max rel error {:.2e} ({}), {:.1}s",
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    )
}

fn loss_oracles() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let cfg = FocalConfig::default();
    let ce = FocalConfig { alpha: 1.0, gamma: 0.0 };
    let mut errs: Vec<(&str, f64)> = vec![
        ("focal p_t=1", focal_term(1.0, 0.25, 2.0)),
        ("focal a=1 g=0 p_t=0.5", focal_term(0.5, 1.0, 0.0) - 0.693_147_180_559_945_3),
        ("focal p_t=0.9", focal_term(0.9, 0.25, 2.0) - 2.634_012_891_445_657_5e-4),
        (
            "softmax two equal logits",
            focal_multiclass(array![[0.4, 0.4]].view(), &[0], &[true], &ce).unwrap().loss - ln2,
        ),
        (
            "sigmoid z=0 target 1",
            focal_multilabel(array![[0.0]].view(), array![[true]].view(), &[true], &cfg).unwrap().loss
                - 0.043_321_698_784_996_58,
        ),
        (
            "sigmoid z=0 target 0",
            focal_multilabel(array![[0.0]].view(), array![[false]].view(), &[true], &cfg).unwrap().loss
                - 0.129_965_096_354_989_75,
        ),
        ("focal clamped p_t", focal_term(1e-20, 1.0, 0.0) - 27.631_021_115_928_547),
        ("ccc x=y", ccc_stats(&[0.1, 0.5, -0.3], &[0.1, 0.5, -0.3]).unwrap().ccc - 1.0),
        ("ccc opposite", ccc_stats(&[1.0, -1.0], &[-1.0, 1.0]).unwrap().ccc + 1.0),
        ("ccc shifted", ccc_stats(&[0.0, 1.0], &[1.0, 2.0]).unwrap().ccc - 1.0 / 3.0),
        ("ccc loss perfect", ccc_loss(&[0.2, 0.7], &[0.2, 0.7], false).unwrap().0),
        ("ccc loss constant", ccc_loss(&[0.3, 0.3, 0.3], &[0.1, 0.5, 0.9], false).unwrap().0 - 1.0),
        ("ccc loss opposite", ccc_loss(&[1.0, -1.0], &[-1.0, 1.0], false).unwrap().0 - 2.0),
    ];
    errs.iter_mut().for_each(|e| e.1 = e.1.abs());
    let worst_oracle = errs.iter().cloned().fold(("", 0.0), |m, e| if e.1 > m.1 { e } else { m });

    // Focal with alpha 1, gamma 0 against an independent cross-entropy.
    let mut rng = stream(2024, 0, 0, Purpose::Synth, 0);
    let mut worst_ce = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..20);
        let k = rng.random_range(2..10);
        // Logits in [-10, 10] keep p_t above the clamp floor for k < 10.
        let logits = Array2::from_shape_simple_fn((n, k), || rng.random_range(-10.0..10.0));
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut validity: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        validity[0] = true;
        let a = focal_multiclass(logits.view(), &targets, &validity, &ce).unwrap();
        let b = cross_entropy(logits.view(), &targets, &validity).unwrap();
        worst_ce = worst_ce.max((a.loss - b.loss).abs());
        for (x, y) in a.grad.iter().zip(b.grad.iter()) {
            worst_ce = worst_ce.max((x - y).abs());
        }
    }
    outcome(
        worst_oracle.1 <= 1e-9 && worst_ce <= 1e-9,
        format!(
            "{} oracles, max error {:.1e} ({}); focal(1, 0) vs cross-entropy on 100 instances, max error {:.1e}",
            errs.len(),
            worst_oracle.1,
            worst_oracle.0,
            worst_ce
        ),
    )
}

fn metric_oracle() -> Outcome {
    let r = eval_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], &[true; 4], 2).unwrap();
    let f1 = r.headline();
    let va = va_report(0.23, 0.41, 2).headline();
    outcome(
        f1 == 11.0 / 15.0 && va == 0.32,
        format!("toy macro F1 = {f1:?} (11/15 = {:?}); ccc_mean(0.23, 0.41) = {va:?}", 11.0f64 / 15.0),
    )
}

fn overfit() -> Outcome {
    let spec = SynthSpec {
        task: Task::Expr,
        n_videos: 1,
        frames: 1000,
        dim: 16,
        snr: f64::INFINITY,
        ..SynthSpec::default()
    };
    let corpus = synth_corpus(&spec);
    let mut cfg = tiny_run(Task::Expr);
    cfg.batch_size = 10;
    cfg.epochs = 500;
    cfg.max_steps = Some(500);
    cfg.mask.p = 0.0;
    cfg.model.dropout = 0.0;
    let start = Instant::now();
    let result = with_threads(true, || train(&cfg, &corpus, None, None));
    let out = match result {
        Ok(o) => o,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let steps = out.last.progress.map_or(0, |p| p.global_step);
    let model = cfg.model_for(corpus.dim());
    let f1 = evaluate_params(&out.last.params, &model, &corpus, false).map(|r| r.headline());
    let elapsed = start.elapsed();
    match f1 {
        Ok(f1) => outcome(
            f1 >= 0.95 && steps <= 500 && elapsed < Duration::from_secs(300),
            format!("train macro F1 {f1:.4} after {steps} steps, {:.1}s on one thread", elapsed.as_secs_f64()),
        ),
        Err(e) => outcome(false, format!("evaluation failed: {e}")),
    }
}

fn mask_statistics() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for p in [0.1, 0.15, 0.5] {
        let cfg = MaskConfig {
            p,
            ..MaskConfig::default()
        };
        // 100 clips of 100 frames, drawn from the trainer's per-clip streams.
        let masked: usize = (0..100u64)
            .map(|i| sample_mask(100, &cfg, &mut stream(7, 0, i / 10, Purpose::Mask, i % 10)).masked_count())
            .sum();
        let n = 10_000.0;
        let sigma = (n * p * (1.0 - p)).sqrt();
        let z = (masked as f64 - n * p) / sigma;
        pass &= z.abs() <= 3.0;
        lines.push(format!("p={p}: {masked}/10000 (z={z:+.2})"));
    }

    // Full masking with zero vectors: the encoder never sees a feature.
    let chance = 1.0 / 8.0;
    let mut control = Vec::new();
    for seed in 0..3u64 {
        let train_spec = SynthSpec {
            task: Task::Expr,
            n_videos: 8,
            frames: 500,
            dim: 16,
            seed,
            snr: 4.0,
            ..SynthSpec::default()
        };
        let val_spec = SynthSpec {
            n_videos: 4,
            first_video: 8,
            ..train_spec.clone()
        };
        let (tr, val) = (synth_corpus(&train_spec), synth_corpus(&val_spec));
        let mut f1 = [0.0; 2];
        for (slot, p) in f1.iter_mut().zip([1.0, 0.0]) {
            let mut cfg = tiny_run(Task::Expr);
            cfg.batch_size = 8;
            cfg.epochs = 1000;
            cfg.max_steps = Some(300);
            cfg.seed = seed;
            cfg.mask.p = p;
            cfg.mask.replacement = Replacement::ZeroVector;
            match train(&cfg, &tr, Some(&val), None).map(|o| o.final_report) {
                Ok(Some(r)) => *slot = r.headline(),
                Ok(None) => return outcome(false, "control run produced no report"),
                Err(e) => return outcome(false, format!("control run failed: {e}")),
            }
        }
        pass &= (f1[0] - chance).abs() <= 0.1;
        control.push(format!("seed {seed}: p=1 {:.3} (p=0 {:.3})", f1[0], f1[1]));
    }
    outcome(
        pass,
        format!("{}; full-mask val macro F1 vs chance {chance}: {}", lines.join(", "), control.join(", ")),
    )
}

fn determinism() -> Outcome {
    let train_spec = SynthSpec {
        task: Task::Va,
        n_videos: 3,
        frames: 250,
        dim: 12,
        seed: 3,
        ..SynthSpec::default()
    };
    let val_spec = SynthSpec {
        n_videos: 2,
        first_video: 3,
        ..train_spec.clone()
    };
    let (tr, val) = (synth_corpus(&train_spec), synth_corpus(&val_spec));
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut runs = Vec::new();
    for d in &dirs {
        let mut cfg = tiny_run(Task::Va);
        cfg.batch_size = 4;
        cfg.epochs = 3;
        cfg.eval_every = 3;
        cfg.micro_batch = 2;
        cfg.single_thread = true;
        cfg.model.dropout = 0.2;
        cfg.seed = 99;
        cfg.out_dir = Some(d.path().to_path_buf());
        match with_threads(true, || train(&cfg, &tr, Some(&val), None)) {
            Ok(o) => runs.push(o),
            Err(e) => return outcome(false, format!("run failed: {e}")),
        }
    }
    let files = [LAST_CHECKPOINT, BEST_CHECKPOINT, TRAIN_LOG, "report.csv"];
    let same_files = files.iter().all(|f| {
        let a = fs::read(dirs[0].path().join(f));
        let b = fs::read(dirs[1].path().join(f));
        matches!((a, b), (Ok(a), Ok(b)) if a == b)
    });
    let same_reports = runs[0].final_report == runs[1].final_report
        && runs[0].final_report.as_ref().map(|r| r.to_csv()) == runs[1].final_report.as_ref().map(|r| r.to_csv());
    let bytes = fs::metadata(dirs[0].path().join(LAST_CHECKPOINT)).map_or(0, |m| m.len());
    outcome(
        same_files && same_reports && runs[0].final_report.is_some(),
        format!(
            "{} steps with dropout and masking; checkpoints ({bytes} bytes), log and reports identical: {}",
            runs[0].log.len(),
            same_files && same_reports
        ),
    )
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = stream(77, 0, 0, Purpose::Synth, 0);
    let mut feature_ok = 0;
    for i in 0..100 {
        let frames = rng.random_range(1..40);
        let dim = rng.random_range(1..20);
        let data = Array2::from_shape_simple_fn((frames, dim), || match rng.random_range(0..10) {
            0 => -0.0f32,
            1 => f32::MIN_POSITIVE / 4.0,
            2 => f32::MAX,
            _ => f32::from_bits(rng.random::<u32>() & 0xBF7F_FFFF),
        });
        let seq = FeatureSequence::new(format!("v{i}"), data).unwrap();
        let path = dir.path().join(format!("v{i}.afsq"));
        write_feature_file(&seq, &path).unwrap();
        let back = read_feature_file(&path).unwrap();
        let bitwise = back.data().iter().zip(seq.data().iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        if bitwise && back.data().dim() == seq.data().dim() && back.video_id() == seq.video_id() {
            feature_ok += 1;
        }
    }

    let mut ckpt_ok = 0;
    for i in 0..100 {
        let heads = rng.random_range(1..4);
        let cfg = ModelConfig {
            dim_in: rng.random_range(1..10),
            d_model: heads * rng.random_range(1..4),
            n_heads: heads,
            n_layers: rng.random_range(0..3),
            d_ff: rng.random_range(1..9),
            dropout: rng.random_range(0.0..0.5),
            max_len: rng.random_range(1..50),
            task: [Task::Va, Task::Expr, Task::Au][i % 3],
            positional_encoding: rng.random_bool(0.5),
        };
        let mut random_params = || {
            let mut p = ModelParams::<f32>::zeros(&cfg);
            for t in p.tensors_mut() {
                t.data.iter_mut().for_each(|v| *v = f32::from_bits(rng.random::<u32>() & 0xBF7F_FFFF));
            }
            p
        };
        let params = random_params();
        let m = random_params();
        let v = random_params();
        let mut ck = Checkpoint::new(cfg.clone(), params);
        if i % 4 != 0 {
            ck.optimizer = Some(OptimizerSection {
                config: AdamWConfig {
                    lr: rng.random_range(1e-6..1e-1),
                    ..AdamWConfig::default()
                },
                state: OptState {
                    m,
                    v,
                    step: rng.random(),
                },
            });
        }
        if i % 2 == 0 {
            ck.progress = Some(Progress {
                epoch: rng.random(),
                batch: rng.random(),
                global_step: rng.random(),
                best_metric: rng.random_range(-1.0..1.0),
            });
        }
        let path = dir.path().join(format!("c{i}.afck"));
        ck.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        match Checkpoint::load(&path) {
            Ok(back) if back.encode() == bytes && back == ck => ckpt_ok += 1,
            _ => {}
        }
    }
    outcome(
        feature_ok == 100 && ckpt_ok == 100,
        format!("feature files {feature_ok}/100, checkpoints with optimizer state {ckpt_ok}/100 bit-exact"),
    )
}

fn equivariance() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..10u64 {
        let task = [Task::Va, Task::Expr, Task::Au][(i % 3) as usize];
        let cfg = ModelConfig {
            dim_in: 12,
            d_model: 16,
            n_heads: 4,
            n_layers: 2,
            d_ff: 32,
            dropout: 0.0,
            max_len: 30,
            task,
            positional_encoding: false,
        };
        let mut rng = stream(i, 0, 0, Purpose::Init, 0);
        let params = ModelParams::<f64>::init(&cfg, &mut rng);
        let len = rng.random_range(2..=30);
        let x = Array2::from_shape_simple_fn((len, cfg.dim_in), || StandardNormal.sample(&mut rng));
        let mut perm: Vec<usize> = (0..len).collect();
        perm.shuffle(&mut rng);
        let y = forward(&params, &cfg, x.view(), None, Mode::Eval).unwrap().output;
        let xp = x.select(Axis(0), &perm);
        let yp = forward(&params, &cfg, xp.view(), None, Mode::Eval).unwrap().output;
        let expected = y.select(Axis(0), &perm);
        for (a, b) in yp.iter().zip(expected.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(worst <= 1e-6, format!("10 random inputs, max |f(Px) - P f(x)| = {worst:.2e}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient-check", gradient_check),
        ("loss-oracles", loss_oracles),
        ("metric-oracle", metric_oracle),
        ("overfit-sanity", overfit),
        ("masking-statistics", mask_statistics),
        ("determinism", determinism),
        ("format-round-trips", round_trips),
        ("encoder-equivariance", equivariance),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
