//! A directory of videos: `manifest.csv`, `<id>.afsq` and `<id>.<task>.csv`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature_store::{parse_label_csv, read_feature_file, window, Clip, FeatureSequence, LabelTrack};
use crate::synth::{label_file_name, MANIFEST_NAME};
use crate::task::Task;

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub features: FeatureSequence,
    pub labels: LabelTrack,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub task: Task,
    pub videos: Vec<Video>,
}

struct ManifestRow {
    video_id: String,
    frames: Option<usize>,
    task: Option<String>,
}

fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        message: "manifest is empty".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |name: &str| cols.iter().position(|c| *c == name);
    let id_col = find("video_id").ok_or_else(|| Error::Parse {
        line: 1,
        message: "manifest header has no video_id column".into(),
    })?;
    let frames_col = find("frames");
    let task_col = find("task");
    let mut rows = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        let frames = match frames_col {
            Some(c) => Some(fields[c].parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("frames {:?} is not a count", fields[c]),
            })?),
            None => None,
        };
        rows.push(ManifestRow {
            video_id: fields[id_col].to_string(),
            frames,
            task: task_col.map(|c| fields[c].to_string()),
        });
    }
    Ok(rows)
}

/// Loads every video listed in the manifest with its labels for `task`.
pub fn load_corpus(dir: impl AsRef<Path>, task: Task) -> Result<Corpus> {
    let dir = dir.as_ref();
    let manifest = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest).map_err(|e| Error::storage(&manifest, e))?;
    let rows = parse_manifest(&text)?;
    for r in &rows {
        if let Some(t) = &r.task {
            let listed: Task = t.parse()?;
            if listed != task {
                return Err(Error::Config(format!(
                    "corpus {} holds {listed} labels, {task} requested",
                    dir.display()
                )));
            }
        }
    }
    let videos: Vec<Video> = rows
        .par_iter()
        .map(|r| {
            let features = read_feature_file(dir.join(format!("{}.afsq", r.video_id)))?;
            let label_path = dir.join(label_file_name(&r.video_id, task));
            if !label_path.exists() {
                return Err(Error::Config(format!(
                    "video {} has no {task} labels ({} missing)",
                    r.video_id,
                    label_path.display()
                )));
            }
            let labels = parse_label_csv(&label_path, task)?;
            if r.frames.is_some_and(|f| f != features.frames()) {
                return Err(Error::Validation(format!(
                    "manifest lists {} frames for {}, feature file has {}",
                    r.frames.unwrap_or(0),
                    r.video_id,
                    features.frames()
                )));
            }
            Ok(Video { features, labels })
        })
        .collect::<Result<_>>()?;
    Corpus::new(task, videos)
}

impl Corpus {
    pub fn new(task: Task, videos: Vec<Video>) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::InsufficientData("corpus has no videos".into()));
        }
        let dim = videos[0].features.dim();
        for v in &videos {
            if v.labels.task() != task {
                return Err(Error::Config(format!(
                    "video {} has {} labels, corpus task is {task}",
                    v.features.video_id(),
                    v.labels.task()
                )));
            }
            if v.features.dim() != dim {
                return Err(Error::Validation(format!(
                    "video {} has feature dim {}, expected {dim}",
                    v.features.video_id(),
                    v.features.dim()
                )));
            }
            if v.labels.frames() != v.features.frames() {
                return Err(Error::Validation(format!(
                    "video {} has {} feature frames but {} label rows",
                    v.features.video_id(),
                    v.features.frames(),
                    v.labels.frames()
                )));
            }
        }
        Ok(Corpus { task, videos })
    }

    pub fn dim(&self) -> usize {
        self.videos[0].features.dim()
    }

    pub fn frames(&self) -> usize {
        self.videos.iter().map(|v| v.features.frames()).sum()
    }

    pub fn valid_frames(&self) -> usize {
        self.videos.iter().map(|v| v.labels.valid_count()).sum()
    }

    /// All clips of all videos, in video order.
    pub fn clips(&self, len: usize, stride: usize) -> Result<Vec<Clip>> {
        let mut out = Vec::new();
        for v in &self.videos {
            out.extend(window(&v.features, &v.labels, len, stride)?);
        }
        Ok(out)
    }
}
