//! Checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "AFCK" | version u32 | config_len u32 | config text (key = value lines)
//! n_tensors u32 | records
//! has_optimizer u8 | [lr wd beta1 beta2 eps: f64 | step u64 | n u32 | records "m.*" then "v.*"]
//! has_progress u8  | [epoch u64 | batch u64 | global_step u64 | best_metric f64]
//! ```
//!
//! A record is `name_len u32 | name | rank u32 | dims u64 x rank | f32 data`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optimizer::{AdamWConfig, OptState};
use crate::transformer::{ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSection {
    pub config: AdamWConfig,
    pub state: OptState<f32>,
}

/// Where training stopped. `batch` is the next batch index within `epoch`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Progress {
    pub epoch: u64,
    pub batch: u64,
    pub global_step: u64,
    pub best_metric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    pub optimizer: Option<OptimizerSection>,
    pub progress: Option<Progress>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_params(out: &mut Vec<u8>, params: &ModelParams<f32>, prefix: &str) {
    for t in params.tensors() {
        let name = format!("{prefix}{}", t.name);
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.shape.len() as u32);
        for &d in &t.shape {
            put_u64(out, d as u64);
        }
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "checkpoint truncated while reading {what} at byte {}",
                self.pos
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Format(format!("{what} flag is {other}, expected 0 or 1"))),
        }
    }

    /// Reads records into a zeroed parameter set, requiring the canonical
    /// tensor order and shapes.
    fn params(&mut self, cfg: &ModelConfig, prefix: &str) -> Result<ModelParams<f32>> {
        let mut params = ModelParams::zeros(cfg);
        for t in params.tensors_mut() {
            let expected = format!("{prefix}{}", t.name);
            let len = self.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(self.take(len, "tensor name")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if name != expected {
                return Err(Error::Format(format!("expected tensor {expected}, found {name}")));
            }
            let rank = self.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(self.u64("tensor dims")? as usize);
            }
            if shape != t.shape {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {shape:?}, config implies {:?}",
                    t.shape
                )));
            }
            let raw = self.take(t.data.len() * 4, "tensor data")?;
            for (v, c) in t.data.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(c.try_into().unwrap());
            }
        }
        Ok(params)
    }
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ModelParams<f32>) -> Self {
        Checkpoint {
            config,
            params,
            optimizer: None,
            progress: None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let text = self.config.to_text();
        put_u32(&mut out, text.len() as u32);
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.params.tensors().len() as u32);
        put_params(&mut out, &self.params, "");
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                let c = &opt.config;
                for v in [c.lr, c.weight_decay, c.beta1, c.beta2, c.eps] {
                    put_f64(&mut out, v);
                }
                put_u64(&mut out, opt.state.step);
                put_u32(&mut out, 2 * opt.state.m.tensors().len() as u32);
                put_params(&mut out, &opt.state.m, "m.");
                put_params(&mut out, &opt.state.v, "v.");
            }
        }
        match &self.progress {
            None => out.push(0),
            Some(p) => {
                out.push(1);
                put_u64(&mut out, p.epoch);
                put_u64(&mut out, p.batch);
                put_u64(&mut out, p.global_step);
                put_f64(&mut out, p.best_metric);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(len, "config")?)
            .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
        let config = ModelConfig::from_text(text)?;
        config
            .validate()
            .map_err(|e| Error::Format(format!("checkpoint config invalid: {e}")))?;
        let n = r.u32("tensor count")? as usize;
        let params = {
            let expected = ModelParams::<f32>::zeros(&config).tensors().len();
            if n != expected {
                return Err(Error::Format(format!("checkpoint has {n} tensors, config implies {expected}")));
            }
            r.params(&config, "")?
        };
        let optimizer = if r.flag("optimizer")? {
            let lr = r.f64("lr")?;
            let weight_decay = r.f64("weight decay")?;
            let beta1 = r.f64("beta1")?;
            let beta2 = r.f64("beta2")?;
            let eps = r.f64("eps")?;
            let step = r.u64("optimizer step")?;
            let count = r.u32("moment count")? as usize;
            if count != 2 * n {
                return Err(Error::Format(format!("optimizer has {count} moment tensors, expected {}", 2 * n)));
            }
            let m = r.params(&config, "m.")?;
            let v = r.params(&config, "v.")?;
            Some(OptimizerSection {
                config: AdamWConfig {
                    lr,
                    weight_decay,
                    beta1,
                    beta2,
                    eps,
                },
                state: OptState { m, v, step },
            })
        } else {
            None
        };
        let progress = if r.flag("progress")? {
            Some(Progress {
                epoch: r.u64("epoch")?,
                batch: r.u64("batch")?,
                global_step: r.u64("global step")?,
                best_metric: r.f64("best metric")?,
            })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            params,
            optimizer,
            progress,
        })
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("afck.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::storage(&tmp, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::storage(&tmp, e))?;
        f.sync_all().map_err(|e| Error::storage(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::storage(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
        Self::decode(&bytes)
    }

    /// Short human-readable summary.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "checkpoint v{CHECKPOINT_VERSION}\n{}parameters = {}\n",
            self.config.to_text(),
            self.params.parameter_count()
        );
        if let Some(o) = &self.optimizer {
            s.push_str(&format!(
                "optimizer = adamw lr={} weight_decay={} betas=({}, {}) eps={} step={}\n",
                o.config.lr, o.config.weight_decay, o.config.beta1, o.config.beta2, o.config.eps, o.state.step
            ));
        }
        if let Some(p) = &self.progress {
            s.push_str(&format!(
                "progress = epoch {} batch {} step {} best {}\n",
                p.epoch, p.batch, p.global_step, p.best_metric
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::Task;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(task: Task) -> ModelConfig {
        ModelConfig {
            dim_in: 3,
            d_model: 4,
            n_heads: 2,
            n_layers: 2,
            d_ff: 5,
            dropout: 0.1,
            max_len: 6,
            task,
            positional_encoding: true,
        }
    }

    fn full(seed: u64) -> Checkpoint {
        let cfg = tiny(Task::Au);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ck = Checkpoint::new(cfg.clone(), ModelParams::init(&cfg, &mut rng));
        ck.optimizer = Some(OptimizerSection {
            config: AdamWConfig::default(),
            state: OptState {
                m: ModelParams::init(&cfg, &mut rng),
                v: ModelParams::init(&cfg, &mut rng),
                step: 17,
            },
        });
        ck.progress = Some(Progress {
            epoch: 2,
            batch: 3,
            global_step: 17,
            best_metric: 0.4375,
        });
        ck
    }

    #[test]
    fn round_trip_with_all_sections() {
        let ck = full(9);
        let bytes = ck.encode();
        assert_eq!(&bytes[..4], b"AFCK");
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn round_trip_params_only() {
        let cfg = tiny(Task::Va);
        let ck = Checkpoint::new(cfg.clone(), ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)));
        assert_eq!(Checkpoint::decode(&ck.encode()).unwrap(), ck);
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.afck");
        let ck = full(3);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(!dir.path().join("x.afck.tmp").exists());
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let bytes = full(4).encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(_))));
        for cut in [3, 10, 100, bytes.len() - 1] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(Checkpoint::decode(&longer), Err(Error::Format(_))));
        let mut version = bytes;
        version[4] = 9;
        assert!(matches!(Checkpoint::decode(&version), Err(Error::Format(_))));
    }
}
