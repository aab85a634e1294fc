use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use affect_core::checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
use affect_core::config::{KeyValues, TrainConfig};
use affect_core::feature_store::{parse_feature_header, FEATURE_MAGIC};
use affect_core::synth::{write_corpus, SynthSpec};
use affect_core::trainer::{self, load_corpora, sweep_csv, sweep_mask, with_threads};
use affect_core::{Error, Result, Task};
use clap::{Args, Parser, Subcommand};
use log::info;

/// Masked-frame transformer for per-frame affect analysis.
#[derive(Parser)]
#[command(name = "affect", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the corpus named by paths.train.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus directory.
    Eval(EvalArgs),
    /// Train once per masking probability and report the validation metric.
    SweepMask(SweepArgs),
    /// Write a synthetic corpus.
    GenSynthetic(GenArgs),
    /// Print a feature-file header or a checkpoint summary.
    Inspect { path: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run on one thread for bit-exact reproducibility.
    #[arg(long)]
    single_thread: bool,
    /// Config overrides, e.g. `--mask.p 0.3 --train.seed=2`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory with manifest.csv.
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the checkpoint's task.
    #[arg(long)]
    task: Option<Task>,
    /// Average CCC over videos instead of pooling frames.
    #[arg(long)]
    per_video: bool,
    /// Directory for report.csv and per-video predictions.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    single_thread: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated masking probabilities.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.15,0.25,0.5")]
    p: Vec<f64>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct GenArgs {
    /// Config file with `synth.*` keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Spec overrides, e.g. `--synth.n_videos 8`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn key_values(file: Option<&Path>, overrides: &[String]) -> Result<KeyValues> {
    let mut kv = match file {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    kv.apply_overrides(overrides)?;
    Ok(kv)
}

fn train_config(run: &RunArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_kv(key_values(run.config.as_deref(), &run.overrides)?)?;
    cfg.single_thread |= run.single_thread;
    Ok(cfg)
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = train_config(&args.run)?;
    let resume = args.resume.as_ref().map(Checkpoint::load).transpose()?;
    with_threads(cfg.single_thread, || {
        let (train_set, val) = load_corpora(&cfg)?;
        info!(
            "training on {} videos, {} valid frames",
            train_set.videos.len(),
            train_set.valid_frames()
        );
        let out = trainer::train(&cfg, &train_set, val.as_ref(), resume)?;
        if let Some(p) = out.last.progress {
            println!("steps {}", p.global_step);
        }
        if let Some(r) = &out.final_report {
            print!("{}", r.to_text());
        }
        Ok(())
    })
}

fn eval(args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let task = args.task.unwrap_or(ck.config.task);
    let report = with_threads(args.single_thread, || {
        trainer::evaluate(&ck, &args.data, task, args.per_video, args.out.as_deref())
    })?;
    print!("{}", report.to_text());
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let cfg = train_config(&args.run)?;
    with_threads(cfg.single_thread, || {
        let (train_set, val) = load_corpora(&cfg)?;
        let val = val.ok_or_else(|| Error::Config("sweep-mask needs paths.val".into()))?;
        let rows = sweep_mask(&cfg, &train_set, &val, &args.p)?;
        print!("{}", sweep_csv(&rows));
        Ok(())
    })
}

fn gen_synthetic(args: GenArgs) -> Result<()> {
    let spec = SynthSpec::from_kv(key_values(args.spec.as_deref(), &args.overrides)?)?;
    let ids = write_corpus(&spec, &args.out)?;
    println!("wrote {} {} videos to {}", ids.len(), spec.task, args.out.display());
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    if bytes.starts_with(FEATURE_MAGIC) {
        let h = parse_feature_header(&bytes)?;
        println!("feature file {}", path.display());
        println!("version {}\ndim {}\nframes {}", h.version, h.dim, h.frames);
    } else if bytes.starts_with(CHECKPOINT_MAGIC) {
        let ck = Checkpoint::decode(&bytes)?;
        print!("{}", ck.summary());
    } else {
        return Err(Error::Format(format!("{} is neither a feature file nor a checkpoint", path.display())));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::SweepMask(a) => sweep(a),
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Inspect { path } => inspect(&path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
