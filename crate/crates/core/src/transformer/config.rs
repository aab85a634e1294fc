use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::task::Task;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim_in: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub task: Task,
    /// Test hook: when false no positional encoding is added.
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim_in: 768,
            d_model: 256,
            n_heads: 8,
            n_layers: 6,
            d_ff: 1024,
            dropout: 0.2,
            max_len: 100,
            task: Task::Expr,
            positional_encoding: true,
        }
    }
}

impl ModelConfig {
    pub fn head_out(&self) -> usize {
        self.task.head_out()
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dim_in == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_len == 0 {
            return bad("model widths and max_len must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// `key = value` lines, as stored in checkpoints.
    pub fn to_text(&self) -> String {
        format!(
            "task = {}\ndim_in = {}\nd_model = {}\nn_heads = {}\nn_layers = {}\nd_ff = {}\ndropout = {}\nmax_len = {}\npositional_encoding = {}\n",
            self.task,
            self.dim_in,
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.d_ff,
            self.dropout,
            self.max_len,
            self.positional_encoding
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad model config line {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |key: &str| {
            map.get(key)
                .ok_or_else(|| Error::Format(format!("model config missing {key}")))
        };
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Format(format!("model config {key} = {v:?} is not valid")))
        }
        let cfg = ModelConfig {
            task: get("task")?.parse().map_err(|e: Error| Error::Format(e.to_string()))?,
            dim_in: num("dim_in", get("dim_in")?)?,
            d_model: num("d_model", get("d_model")?)?,
            n_heads: num("n_heads", get("n_heads")?)?,
            n_layers: num("n_layers", get("n_layers")?)?,
            d_ff: num("d_ff", get("d_ff")?)?,
            dropout: num("dropout", get("dropout")?)?,
            max_len: num("max_len", get("max_len")?)?,
            positional_encoding: num("positional_encoding", get("positional_encoding")?)?,
        };
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(cfg)
    }
}
