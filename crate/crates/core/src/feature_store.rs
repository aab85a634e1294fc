//! On-disk feature and label formats, and slicing videos into clips.
//!
//! Feature file layout (little-endian):
//!
//! ```text
//! magic   b"AFSQ"
//! version u32 = 1
//! dim     u32
//! frames  u64
//! data    frames * dim f32, row-major
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::task::{Task, AU_COUNT, EXPR_CLASSES};

pub const FEATURE_MAGIC: &[u8; 4] = b"AFSQ";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 4 + 4 + 4 + 8;

/// Sentinel written for invalid VA frames.
pub const VA_SENTINEL: f64 = -5.0;
/// Sentinel written for invalid EXPR / AU frames.
pub const CLASS_SENTINEL: i64 = -1;

/// One video's per-frame embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    video_id: String,
    data: Array2<f32>,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, data: Array2<f32>) -> Result<Self> {
        let seq = FeatureSequence {
            video_id: video_id.into(),
            data,
        };
        seq.validate()?;
        Ok(seq)
    }

    fn validate(&self) -> Result<()> {
        if self.data.ncols() == 0 {
            return Err(Error::Validation("feature dim must be positive".into()));
        }
        if self.data.nrows() == 0 {
            return Err(Error::Validation("feature sequence has no frames".into()));
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            let (row, col) = (pos / self.data.ncols(), pos % self.data.ncols());
            return Err(Error::Validation(format!(
                "non-finite feature value in video {:?} at frame {row}, column {col}",
                self.video_id
            )));
        }
        Ok(())
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f32> {
        self.data
    }
}

/// Header of a feature file, without the payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureHeader {
    pub version: u32,
    pub dim: u32,
    pub frames: u64,
}

pub fn write_feature_file(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    seq.validate()?;
    let file = fs::File::create(path).map_err(|e| Error::storage(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::storage(path, e);
    out.write_all(FEATURE_MAGIC).map_err(io)?;
    out.write_all(&FEATURE_VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(seq.dim() as u32).to_le_bytes()).map_err(io)?;
    out.write_all(&(seq.frames() as u64).to_le_bytes()).map_err(io)?;
    for value in seq.data.iter() {
        out.write_all(&value.to_le_bytes()).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn parse_feature_header(bytes: &[u8]) -> Result<FeatureHeader> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::Format(format!(
            "feature file too short for header ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"AFSQ\"",
            String::from_utf8_lossy(&bytes[0..4])
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let frames = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if dim == 0 {
        return Err(Error::Format("feature dim is 0".into()));
    }
    if frames == 0 {
        return Err(Error::Format("feature file declares 0 frames".into()));
    }
    Ok(FeatureHeader {
        version,
        dim,
        frames,
    })
}

pub fn read_feature_header(path: impl AsRef<Path>) -> Result<FeatureHeader> {
    use std::io::Read;
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(FEATURE_HEADER_LEN);
    fs::File::open(path)
        .and_then(|f| f.take(FEATURE_HEADER_LEN as u64).read_to_end(&mut buf))
        .map_err(|e| Error::storage(path, e))?;
    parse_feature_header(&buf)
}

/// Reads a feature file; the video id is taken from the file stem.
pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    let video_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_feature_bytes(video_id, &bytes)
}

pub fn decode_feature_bytes(video_id: String, bytes: &[u8]) -> Result<FeatureSequence> {
    let header = parse_feature_header(bytes)?;
    let dim = header.dim as usize;
    let frames = usize::try_from(header.frames)
        .map_err(|_| Error::Format("frame count does not fit in memory".into()))?;
    let expected = frames
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let payload = &bytes[FEATURE_HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, header implies {expected} ({frames} frames x {dim} dims)",
            payload.len()
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = Array2::from_shape_vec((frames, dim), values).expect("length checked above");
    FeatureSequence::new(video_id, data).map_err(|e| Error::Format(e.to_string()))
}

/// Per-frame ground truth for one task.
#[derive(Clone, Debug, PartialEq)]
pub enum LabelValues {
    Va(Vec<[f64; 2]>),
    Expr(Vec<u8>),
    Au(Vec<[bool; AU_COUNT]>),
}

impl LabelValues {
    fn len(&self) -> usize {
        match self {
            LabelValues::Va(v) => v.len(),
            LabelValues::Expr(v) => v.len(),
            LabelValues::Au(v) => v.len(),
        }
    }
}

/// Labels plus a per-frame validity flag. Invalid frames hold a zero value.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTrack {
    values: LabelValues,
    validity: Vec<bool>,
}

impl LabelTrack {
    pub fn new(values: LabelValues, validity: Vec<bool>) -> Result<Self> {
        if values.len() != validity.len() {
            return Err(Error::Validation(format!(
                "label values ({}) and validity ({}) lengths differ",
                values.len(),
                validity.len()
            )));
        }
        let track = LabelTrack { values, validity };
        for frame in 0..track.frames() {
            if track.validity[frame] {
                track.check_frame(frame)?;
            }
        }
        Ok(track)
    }

    fn check_frame(&self, frame: usize) -> Result<()> {
        match &self.values {
            LabelValues::Va(v) => {
                let [va, ar] = v[frame];
                if !(-1.0..=1.0).contains(&va) || !(-1.0..=1.0).contains(&ar) {
                    return Err(Error::Validation(format!(
                        "VA value ({va}, {ar}) at frame {frame} outside [-1, 1]"
                    )));
                }
            }
            LabelValues::Expr(v) => {
                if v[frame] as usize >= EXPR_CLASSES {
                    return Err(Error::Validation(format!(
                        "EXPR class {} at frame {frame} outside 0..{EXPR_CLASSES}",
                        v[frame]
                    )));
                }
            }
            LabelValues::Au(_) => {}
        }
        Ok(())
    }

    pub fn task(&self) -> Task {
        match self.values {
            LabelValues::Va(_) => Task::Va,
            LabelValues::Expr(_) => Task::Expr,
            LabelValues::Au(_) => Task::Au,
        }
    }

    pub fn frames(&self) -> usize {
        self.validity.len()
    }

    pub fn values(&self) -> &LabelValues {
        &self.values
    }

    pub fn validity(&self) -> &[bool] {
        &self.validity
    }

    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|v| **v).count()
    }

    /// `len` frames starting at `start`; frames past the end are padded as invalid.
    pub fn slice_padded(&self, start: usize, len: usize) -> LabelTrack {
        let end = (start + len).min(self.frames());
        let pad = len - (end - start);
        let mut validity = self.validity[start..end].to_vec();
        validity.extend(std::iter::repeat_n(false, pad));
        let values = match &self.values {
            LabelValues::Va(v) => {
                let mut out = v[start..end].to_vec();
                out.extend(std::iter::repeat_n([0.0; 2], pad));
                LabelValues::Va(out)
            }
            LabelValues::Expr(v) => {
                let mut out = v[start..end].to_vec();
                out.extend(std::iter::repeat_n(0, pad));
                LabelValues::Expr(out)
            }
            LabelValues::Au(v) => {
                let mut out = v[start..end].to_vec();
                out.extend(std::iter::repeat_n([false; AU_COUNT], pad));
                LabelValues::Au(out)
            }
        };
        LabelTrack { values, validity }
    }

    /// Reorders frames: output frame `i` is input frame `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> LabelTrack {
        let validity = order.iter().map(|&i| self.validity[i]).collect();
        let values = match &self.values {
            LabelValues::Va(v) => LabelValues::Va(order.iter().map(|&i| v[i]).collect()),
            LabelValues::Expr(v) => LabelValues::Expr(order.iter().map(|&i| v[i]).collect()),
            LabelValues::Au(v) => LabelValues::Au(order.iter().map(|&i| v[i]).collect()),
        };
        LabelTrack { values, validity }
    }
}

fn column_count(task: Task) -> usize {
    match task {
        Task::Va => 2,
        Task::Expr => 1,
        Task::Au => AU_COUNT,
    }
}

fn is_sentinel(task: Task, value: f64) -> bool {
    match task {
        // -1 is a legal valence/arousal value, so only -5 marks a VA frame invalid.
        Task::Va => value == VA_SENTINEL,
        Task::Expr | Task::Au => value == -1.0 || value == -5.0,
    }
}

/// Parses a label CSV (one row per frame, no header).
pub fn parse_label_csv(path: impl AsRef<Path>, task: Task) -> Result<LabelTrack> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
    parse_label_text(&text, task)
}

pub fn parse_label_text(text: &str, task: Task) -> Result<LabelTrack> {
    let columns = column_count(task);
    let mut va = Vec::new();
    let mut expr = Vec::new();
    let mut au = Vec::new();
    let mut validity = Vec::new();

    let mut lines: Vec<&str> = text.lines().collect();
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    for (idx, raw) in lines.iter().enumerate() {
        let line = idx + 1;
        let fields: Vec<&str> = raw.trim().split(',').map(str::trim).collect();
        if fields.len() != columns {
            return Err(Error::Parse {
                line,
                message: format!("expected {columns} columns for {task}, found {}", fields.len()),
            });
        }
        let numbers = fields
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("not a number: {f:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let valid = !numbers.iter().any(|v| is_sentinel(task, *v));
        validity.push(valid);
        let out_of_range = |what: String| Error::Validation(format!("line {line}: {what}"));
        match task {
            Task::Va => {
                if !valid {
                    va.push([0.0; 2]);
                    continue;
                }
                for v in &numbers {
                    if !(-1.0..=1.0).contains(v) {
                        return Err(out_of_range(format!("VA value {v} outside [-1, 1]")));
                    }
                }
                va.push([numbers[0], numbers[1]]);
            }
            Task::Expr => {
                if !valid {
                    expr.push(0);
                    continue;
                }
                let v = numbers[0];
                if v.fract() != 0.0 {
                    return Err(Error::Parse {
                        line,
                        message: format!("EXPR class must be an integer, got {v}"),
                    });
                }
                if !(0.0..EXPR_CLASSES as f64).contains(&v) {
                    return Err(out_of_range(format!("EXPR class {v} outside 0..=7")));
                }
                expr.push(v as u8);
            }
            Task::Au => {
                if !valid {
                    au.push([false; AU_COUNT]);
                    continue;
                }
                let mut bits = [false; AU_COUNT];
                for (bit, v) in bits.iter_mut().zip(&numbers) {
                    *bit = match *v {
                        0.0 => false,
                        1.0 => true,
                        other => return Err(out_of_range(format!("AU value {other} not in {{0, 1}}"))),
                    };
                }
                au.push(bits);
            }
        }
    }
    let values = match task {
        Task::Va => LabelValues::Va(va),
        Task::Expr => LabelValues::Expr(expr),
        Task::Au => LabelValues::Au(au),
    };
    LabelTrack::new(values, validity)
}

/// Renders labels in the CSV layout read by [`parse_label_csv`]. When
/// `with_frame` is set each row is prefixed with its frame index.
pub fn render_label_rows(track: &LabelTrack, with_frame: bool) -> String {
    let mut out = String::new();
    for frame in 0..track.frames() {
        if with_frame {
            out.push_str(&format!("{frame},"));
        }
        let valid = track.validity[frame];
        match &track.values {
            LabelValues::Va(v) => {
                if valid {
                    out.push_str(&format!("{},{}", v[frame][0], v[frame][1]));
                } else {
                    out.push_str(&format!("{VA_SENTINEL},{VA_SENTINEL}"));
                }
            }
            LabelValues::Expr(v) => {
                if valid {
                    out.push_str(&v[frame].to_string());
                } else {
                    out.push_str(&CLASS_SENTINEL.to_string());
                }
            }
            LabelValues::Au(v) => {
                let row: Vec<String> = v[frame]
                    .iter()
                    .map(|b| {
                        if !valid {
                            CLASS_SENTINEL.to_string()
                        } else {
                            u8::from(*b).to_string()
                        }
                    })
                    .collect();
                out.push_str(&row.join(","));
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_label_csv(track: &LabelTrack, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_label_rows(track, false)).map_err(|e| Error::storage(path, e))
}

/// A fixed-length window of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub video_id: String,
    pub start_frame: usize,
    /// Rows `real_frames..` are zero padding.
    pub real_frames: usize,
    pub features: Array2<f32>,
    pub labels: LabelTrack,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validity(&self) -> &[bool] {
        self.labels.validity()
    }
}

/// Clip start frames for a video of `frames` frames.
pub fn window_starts(frames: usize, len: usize, stride: usize) -> Vec<usize> {
    if frames <= len {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|s| s + len <= frames).collect();
    let covered = starts.last().map_or(0, |s| s + len);
    if covered < frames {
        starts.push(frames - len);
    }
    starts
}

/// Slices a video into clips of `len` frames every `stride` frames.
///
/// A final window that would overrun is replaced by an end-aligned one.
/// Videos shorter than `len` produce a single zero-padded clip.
pub fn window(seq: &FeatureSequence, labels: &LabelTrack, len: usize, stride: usize) -> Result<Vec<Clip>> {
    if len == 0 || stride == 0 {
        return Err(Error::Validation("clip length and stride must be >= 1".into()));
    }
    if labels.frames() != seq.frames() {
        return Err(Error::Validation(format!(
            "video {:?}: {} label frames for {} feature frames",
            seq.video_id(),
            labels.frames(),
            seq.frames()
        )));
    }
    let clips = window_starts(seq.frames(), len, stride)
        .into_iter()
        .map(|start| {
            let end = (start + len).min(seq.frames());
            let mut features = Array2::zeros((len, seq.dim()));
            features
                .slice_mut(s![..end - start, ..])
                .assign(&seq.data.slice(s![start..end, ..]));
            Clip {
                video_id: seq.video_id.clone(),
                start_frame: start,
                real_frames: end - start,
                features,
                labels: labels.slice_padded(start, len),
            }
        })
        .collect();
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn expr_track(n: usize) -> LabelTrack {
        LabelTrack::new(
            LabelValues::Expr((0..n).map(|i| (i % 8) as u8).collect()),
            vec![true; n],
        )
        .unwrap()
    }

    fn seq(frames: usize, dim: usize) -> FeatureSequence {
        let data = Array2::from_shape_fn((frames, dim), |(t, d)| (t * 1000 + d) as f32);
        FeatureSequence::new("v", data).unwrap()
    }

    #[test]
    fn single_zero_frame_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.afsq");
        let s = FeatureSequence::new("zero", Array2::zeros((1, 2))).unwrap();
        write_feature_file(&s, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len() as usize, FEATURE_HEADER_LEN + 8);
        assert_eq!(read_feature_file(&path).unwrap(), s);
    }

    #[test]
    fn payload_size_for_vit_width() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.afsq");
        write_feature_file(&seq(3, 768), &path).unwrap();
        let len = fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(len - FEATURE_HEADER_LEN, 9216);
    }

    #[test]
    fn nan_is_rejected_on_write() {
        let mut data = Array2::zeros((2, 2));
        data[[1, 0]] = f32::NAN;
        let bad = FeatureSequence {
            video_id: "bad".into(),
            data,
        };
        let dir = tempfile::tempdir().unwrap();
        let err = write_feature_file(&bad, dir.path().join("bad.afsq")).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
        assert!(FeatureSequence::new("x", Array2::from_elem((1, 1), f32::INFINITY)).is_err());
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.afsq");
        write_feature_file(&seq(10, 3), &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        let mut magic = bytes.clone();
        magic[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_feature_bytes("v".into(), &magic), Err(Error::Format(_))));

        // Drop the last frame's payload: header still says 10 frames.
        let truncated = &bytes[..bytes.len() - 3 * 4];
        assert!(matches!(decode_feature_bytes("v".into(), truncated), Err(Error::Format(_))));

        let mut zero_dim = bytes.clone();
        zero_dim[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_feature_bytes("v".into(), &zero_dim), Err(Error::Format(_))));

        let mut version = bytes.clone();
        version[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_feature_bytes("v".into(), &version), Err(Error::Format(_))));
    }

    #[test]
    fn label_rows() {
        let va = parse_label_text("0.5,-0.3\n", Task::Va).unwrap();
        assert_eq!(va.values(), &LabelValues::Va(vec![[0.5, -0.3]]));
        assert_eq!(va.validity(), &[true]);

        let expr = parse_label_text("3\n-1\n", Task::Expr).unwrap();
        assert_eq!(expr.validity(), &[true, false]);

        let au = parse_label_text("0,1,0,0,0,0,0,0,0,0,0,1\n", Task::Au).unwrap();
        let LabelValues::Au(bits) = au.values() else { panic!() };
        let set: Vec<usize> = (0..AU_COUNT).filter(|i| bits[0][*i]).collect();
        assert_eq!(set, vec![1, 11]);

        let va_invalid = parse_label_text("-5,-5\n-1,-1\n", Task::Va).unwrap();
        assert_eq!(va_invalid.validity(), &[false, true]);
    }

    #[test]
    fn label_errors_carry_line_numbers() {
        match parse_label_text("1\n2\nabc\n", Task::Expr) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_label_text("0.1,0.2\n0.3\n", Task::Va) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_label_text("9\n", Task::Expr), Err(Error::Validation(_))));
        assert!(matches!(parse_label_text("1.5,0\n", Task::Va), Err(Error::Validation(_))));
        assert!(matches!(
            parse_label_text("0,2,0,0,0,0,0,0,0,0,0,0\n", Task::Au),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn label_csv_round_trip() {
        let track = LabelTrack::new(
            LabelValues::Au(vec![[true; AU_COUNT], [false; AU_COUNT]]),
            vec![true, false],
        )
        .unwrap();
        let text = render_label_rows(&track, false);
        assert_eq!(parse_label_text(&text, Task::Au).unwrap(), track);
    }

    #[test]
    fn window_examples() {
        let starts = |frames| {
            window(&seq(frames, 2), &expr_track(frames), 100, 100)
                .unwrap()
                .iter()
                .map(|c| c.start_frame)
                .collect::<Vec<_>>()
        };
        assert_eq!(starts(250), vec![0, 100, 150]);
        assert_eq!(starts(100), vec![0]);

        let clips = window(&seq(40, 2), &expr_track(40), 100, 100).unwrap();
        assert_eq!(clips.len(), 1);
        let clip = &clips[0];
        assert_eq!(clip.real_frames, 40);
        assert_eq!(clip.features.nrows(), 100);
        assert!(clip.validity()[..40].iter().all(|v| *v));
        assert!(clip.validity()[40..].iter().all(|v| !*v));
        assert!(clip.features.slice(s![40.., ..]).iter().all(|v| *v == 0.0));
        assert_eq!(clip.features[[39, 1]], 39001.0);
    }

    #[test]
    fn window_rejects_mismatched_labels() {
        assert!(window(&seq(10, 2), &expr_track(9), 4, 4).is_err());
        assert!(window(&seq(10, 2), &expr_track(10), 0, 4).is_err());
    }

    proptest! {
        #[test]
        fn feature_file_round_trip(frames in 1usize..20, dim in 1usize..16, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = Array2::from_shape_simple_fn((frames, dim), || {
                // Arbitrary finite bit patterns, including subnormals and -0.0.
                loop {
                    let v = f32::from_bits(rng.random());
                    if v.is_finite() { break v; }
                }
            });
            let original = FeatureSequence::new("rt", data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.afsq");
            write_feature_file(&original, &path).unwrap();
            let back = read_feature_file(&path).unwrap();
            let a: Vec<u32> = original.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.video_id(), "rt");
        }

        #[test]
        fn windows_cover_in_order(frames in 1usize..400, len in 1usize..120, stride_frac in 0.05f64..=1.0) {
            let stride = ((len as f64 * stride_frac).ceil() as usize).max(1);
            let clips = window(&seq(frames, 1), &expr_track(frames), len, stride).unwrap();
            let mut seen = vec![false; frames];
            for clip in &clips {
                prop_assert!(clip.start_frame + clip.real_frames <= frames);
                for i in 0..clip.real_frames {
                    // Feature rows encode their source frame index.
                    prop_assert_eq!(clip.features[[i, 0]], ((clip.start_frame + i) * 1000) as f32);
                    seen[clip.start_frame + i] = true;
                }
            }
            prop_assert!(seen.iter().all(|v| *v));
        }
    }
}
