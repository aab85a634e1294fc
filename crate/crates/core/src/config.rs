//! Plain-text `key = value` configuration.
//!
//! Keys are dotted (`mask.p`). A `[section]` line prefixes the keys that
//! follow it, so `[mask]` then `p = 0.5` is the same as `mask.p = 0.5`.
//! `#` starts a comment. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::FocalConfig;
use crate::masking::MaskConfig;
use crate::optimizer::AdamWConfig;
use crate::synth::SynthSpec;
use crate::task::Task;
use crate::transformer::ModelConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            kv.set(key, v.trim());
        }
        Ok(kv)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.map.insert(key.into(), value.into());
    }

    /// Applies `--key value` / `--key=value` pairs.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, args: &[S]) -> Result<()> {
        let mut it = args.iter().map(AsRef::as_ref);
        while let Some(arg) = it.next() {
            let key = arg
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("override {arg:?} does not start with --")))?;
            match key.split_once('=') {
                Some((k, v)) => self.set(k, v),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::Config(format!("override --{key} has no value")))?;
                    self.set(key, v);
                }
            }
        }
        Ok(())
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}"))),
        }
    }

    fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::Config(format!("unknown config key {k:?}"))),
        }
    }

    /// Removes and returns the keys under `prefix.`.
    fn split_prefix(&mut self, prefix: &str) -> KeyValues {
        let p = format!("{prefix}.");
        let keys: Vec<String> = self.map.keys().filter(|k| k.starts_with(&p)).cloned().collect();
        let mut out = KeyValues::default();
        for k in keys {
            let v = self.map.remove(&k).unwrap();
            out.set(k, v);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub batch_size: usize,
    /// Clip length T.
    pub clip_len: usize,
    /// Window stride for training clips; evaluation always uses `clip_len`.
    pub stride: usize,
    pub epochs: u64,
    /// Stops after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    /// Evaluate every this many steps; 0 evaluates at the end of each epoch.
    pub eval_every: u64,
    pub seed: u64,
    /// Clips per gradient-accumulation chunk.
    pub micro_batch: usize,
    pub single_thread: bool,
    pub mask: MaskConfig,
    /// `dim_in`, `max_len` and `task` are filled from the corpus and the fields above.
    pub model: ModelConfig,
    pub optim: AdamWConfig,
    pub loss: FocalConfig,
    pub ccc_compat: bool,
    pub per_video: bool,
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Expr,
            batch_size: 512,
            clip_len: 100,
            stride: 100,
            epochs: 10,
            max_steps: None,
            eval_every: 0,
            seed: 0,
            micro_batch: 32,
            single_thread: false,
            mask: MaskConfig::default(),
            model: ModelConfig::default(),
            optim: AdamWConfig::default(),
            loss: FocalConfig::default(),
            ccc_compat: false,
            per_video: false,
            train_dir: None,
            val_dir: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let mut c = TrainConfig::default();
        let mut stride: Option<usize> = None;
        kv.take_into("train.task", &mut c.task)?;
        kv.take_into("train.batch_size", &mut c.batch_size)?;
        kv.take_into("train.clip_len", &mut c.clip_len)?;
        if let Some(s) = kv.take("train.stride")? {
            stride = Some(s);
        }
        kv.take_into("train.epochs", &mut c.epochs)?;
        if let Some(s) = kv.take("train.max_steps")? {
            c.max_steps = Some(s);
        }
        kv.take_into("train.eval_every", &mut c.eval_every)?;
        kv.take_into("train.seed", &mut c.seed)?;
        kv.take_into("train.micro_batch", &mut c.micro_batch)?;
        kv.take_into("train.single_thread", &mut c.single_thread)?;
        kv.take_into("mask.p", &mut c.mask.p)?;
        kv.take_into("mask.seed", &mut c.mask.seed)?;
        kv.take_into("mask.replacement", &mut c.mask.replacement)?;
        kv.take_into("model.d_model", &mut c.model.d_model)?;
        kv.take_into("model.n_heads", &mut c.model.n_heads)?;
        kv.take_into("model.n_layers", &mut c.model.n_layers)?;
        kv.take_into("model.d_ff", &mut c.model.d_ff)?;
        kv.take_into("model.dropout", &mut c.model.dropout)?;
        kv.take_into("model.positional_encoding", &mut c.model.positional_encoding)?;
        kv.take_into("optim.lr", &mut c.optim.lr)?;
        kv.take_into("optim.weight_decay", &mut c.optim.weight_decay)?;
        kv.take_into("optim.beta1", &mut c.optim.beta1)?;
        kv.take_into("optim.beta2", &mut c.optim.beta2)?;
        kv.take_into("optim.eps", &mut c.optim.eps)?;
        kv.take_into("loss.alpha", &mut c.loss.alpha)?;
        kv.take_into("loss.gamma", &mut c.loss.gamma)?;
        kv.take_into("loss.ccc_compat", &mut c.ccc_compat)?;
        kv.take_into("eval.per_video", &mut c.per_video)?;
        c.train_dir = kv.take("paths.train")?;
        c.val_dir = kv.take("paths.val")?;
        c.out_dir = kv.take("paths.out")?;
        kv.finish()?;
        c.stride = stride.unwrap_or(c.clip_len);
        c.model.task = c.task;
        c.model.max_len = c.clip_len;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1");
        }
        if self.clip_len == 0 || self.stride == 0 {
            return bad("train.clip_len and train.stride must be at least 1");
        }
        if self.micro_batch == 0 {
            return bad("train.micro_batch must be at least 1");
        }
        self.mask.validate()?;
        self.optim.validate()?;
        self.loss.validate()?;
        let mut m = self.model.clone();
        m.max_len = self.clip_len;
        m.validate()
    }

    /// The model config for features of width `dim_in`.
    pub fn model_for(&self, dim_in: usize) -> ModelConfig {
        ModelConfig {
            dim_in,
            max_len: self.clip_len,
            task: self.task,
            ..self.model.clone()
        }
    }

    /// Sectioned text that [`KeyValues::parse`] reads back to the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        line("train.task", self.task.to_string());
        line("train.batch_size", self.batch_size.to_string());
        line("train.clip_len", self.clip_len.to_string());
        line("train.stride", self.stride.to_string());
        line("train.epochs", self.epochs.to_string());
        if let Some(m) = self.max_steps {
            line("train.max_steps", m.to_string());
        }
        line("train.eval_every", self.eval_every.to_string());
        line("train.seed", self.seed.to_string());
        line("train.micro_batch", self.micro_batch.to_string());
        line("train.single_thread", self.single_thread.to_string());
        line("mask.p", self.mask.p.to_string());
        line("mask.seed", self.mask.seed.to_string());
        line("mask.replacement", self.mask.replacement.to_string());
        line("model.d_model", self.model.d_model.to_string());
        line("model.n_heads", self.model.n_heads.to_string());
        line("model.n_layers", self.model.n_layers.to_string());
        line("model.d_ff", self.model.d_ff.to_string());
        line("model.dropout", self.model.dropout.to_string());
        line("model.positional_encoding", self.model.positional_encoding.to_string());
        line("optim.lr", self.optim.lr.to_string());
        line("optim.weight_decay", self.optim.weight_decay.to_string());
        line("optim.beta1", self.optim.beta1.to_string());
        line("optim.beta2", self.optim.beta2.to_string());
        line("optim.eps", self.optim.eps.to_string());
        line("loss.alpha", self.loss.alpha.to_string());
        line("loss.gamma", self.loss.gamma.to_string());
        line("loss.ccc_compat", self.ccc_compat.to_string());
        line("eval.per_video", self.per_video.to_string());
        for (k, p) in [("paths.train", &self.train_dir), ("paths.val", &self.val_dir), ("paths.out", &self.out_dir)] {
            if let Some(p) = p {
                line(k, p.display().to_string());
            }
        }
        s
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: {x:?} is not a number")))
        })
        .collect()
}

impl SynthSpec {
    /// Reads `synth.*` keys; everything else is rejected.
    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let mut s = SynthSpec::default();
        let mut synth = kv.split_prefix("synth");
        kv.finish()?;
        synth.take_into("synth.task", &mut s.task)?;
        synth.take_into("synth.n_videos", &mut s.n_videos)?;
        synth.take_into("synth.frames", &mut s.frames)?;
        synth.take_into("synth.dim", &mut s.dim)?;
        synth.take_into("synth.seed", &mut s.seed)?;
        synth.take_into("synth.first_video", &mut s.first_video)?;
        synth.take_into("synth.snr", &mut s.snr)?;
        synth.take_into("synth.smoothness", &mut s.smoothness)?;
        synth.take_into("synth.va_gain", &mut s.va_gain)?;
        synth.take_into("synth.invalid_rate", &mut s.invalid_rate)?;
        synth.take_into("synth.shuffled", &mut s.shuffled)?;
        if let Some(p) = synth.take::<String>("synth.priors")? {
            s.priors = parse_list("synth.priors", &p)?;
        }
        synth.finish()?;
        s.validate()?;
        Ok(s)
    }
}
