//! Synthetic datasets and the `GDAT` container shared by datasets and
//! adversarial batches.
//!
//! Layout of a `GDAT` file (all integers little-endian):
//!
//! ```text
//! "GDAT" | version: u16 | header_len: u32 | header: JSON
//!        | samples: f64 x (count * sample_len)
//!        | labels:  u64 x count
//!        | splits:  u64 x count   (0 = train, 1 = val, 2 = attack)
//!        | crc32 of every preceding byte: u32
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

pub const GDAT_MAGIC: &[u8; 4] = b"GDAT";
pub const GDAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown task `{0}` (expected spirals-2d, blobs-kd or digits-8x8)")]
    UnknownTask(String),
    #[error("sample count {0} is below the minimum of 100")]
    TooFewSamples(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: not a GDAT file")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported GDAT version {found} (expected {GDAT_VERSION})")]
    Version { path: PathBuf, found: u16 },
    #[error("{path}: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },
    #[error("{path}: truncated or malformed payload")]
    Truncated { path: PathBuf },
    #[error("{path}: bad header: {source}")]
    Header {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("sample value {value} at flat index {index} is outside [0, 1]")]
    ValueOutOfRange { index: usize, value: f64 },
    #[error("label {label} at sample {index} is outside [0, {classes})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("split code {0} is not one of 0, 1, 2")]
    BadSplit(u64),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Attack,
}

impl Split {
    fn code(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Attack => 2,
        }
    }

    fn from_code(code: u64) -> Result<Self, DataError> {
        match code {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Attack),
            other => Err(DataError::BadSplit(other)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "spirals-2d")]
    Spirals2d,
    #[serde(rename = "blobs-kd")]
    BlobsKd,
    #[serde(rename = "digits-8x8")]
    Digits8x8,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Spirals2d => "spirals-2d",
            Task::BlobsKd => "blobs-kd",
            Task::Digits8x8 => "digits-8x8",
        }
    }

    pub fn sample_shape(self) -> Vec<usize> {
        match self {
            Task::Spirals2d => vec![2],
            Task::BlobsKd => vec![BLOB_DIMS],
            Task::Digits8x8 => vec![1, 8, 8],
        }
    }

    pub fn classes(self) -> usize {
        match self {
            Task::Spirals2d => 2,
            Task::BlobsKd => BLOB_CLASSES,
            Task::Digits8x8 => 10,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spirals-2d" => Ok(Task::Spirals2d),
            "blobs-kd" => Ok(Task::BlobsKd),
            "digits-8x8" => Ok(Task::Digits8x8),
            other => Err(DataError::UnknownTask(other.to_string())),
        }
    }
}

/// Origin of an adversarial batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_models: Vec<String>,
    pub attack: serde_json::Value,
    pub plan_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    task: String,
    sample_shape: Vec<usize>,
    classes: usize,
    count: usize,
    seed: Option<u64>,
    noise: Option<f64>,
    provenance: Option<Provenance>,
}

/// Labeled samples with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: String,
    pub sample_shape: Vec<usize>,
    pub classes: usize,
    samples: Vec<f64>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    pub seed: Option<u64>,
    pub noise: Option<f64>,
    pub provenance: Option<Provenance>,
}

impl Dataset {
    pub fn new(
        task: impl Into<String>,
        sample_shape: Vec<usize>,
        classes: usize,
        samples: Vec<f64>,
        labels: Vec<usize>,
        splits: Vec<Split>,
    ) -> Result<Self, DataError> {
        let ds = Self {
            task: task.into(),
            sample_shape,
            classes,
            samples,
            labels,
            splits,
            seed: None,
            noise: None,
            provenance: None,
        };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<(), DataError> {
        let n = self.sample_len();
        if n == 0 || self.samples.len() != self.labels.len() * n {
            return Err(DataError::Inconsistent(format!(
                "{} values for {} samples of length {}",
                self.samples.len(),
                self.labels.len(),
                n
            )));
        }
        if self.splits.len() != self.labels.len() {
            return Err(DataError::Inconsistent(format!(
                "{} split tags for {} samples",
                self.splits.len(),
                self.labels.len()
            )));
        }
        if let Some((index, &value)) = self
            .samples
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(DataError::ValueOutOfRange { index, value });
        }
        if let Some((index, &label)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l >= self.classes)
        {
            return Err(DataError::LabelOutOfRange {
                index,
                label,
                classes: self.classes,
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, index: usize) -> &[f64] {
        let n = self.sample_len();
        &self.samples[index * n..(index + 1) * n]
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    /// Samples `indices` as a `[len, sample_shape...]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.sample(i)).collect();
        Tensor::stack(&self.sample_shape, &rows).expect("dataset rows share one shape")
    }

    /// Every sample as one tensor.
    pub fn all(&self) -> Tensor {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::new(shape, self.samples.clone()).expect("checked on construction")
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut samples = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            samples.extend_from_slice(self.sample(i));
        }
        Dataset {
            samples,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            splits: indices.iter().map(|&i| self.splits[i]).collect(),
            ..self.header_clone()
        }
    }

    pub fn split(&self, split: Split) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.splits[i] == split).collect();
        self.select(&idx)
    }

    pub fn take(&self, count: usize) -> Dataset {
        let idx: Vec<usize> = (0..self.len().min(count)).collect();
        self.select(&idx)
    }

    /// Same labels and tags, new sample values (e.g. adversarial images).
    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Dataset, DataError> {
        let ds = Dataset {
            samples,
            labels: self.labels.clone(),
            splits: self.splits.clone(),
            ..self.header_clone()
        };
        ds.check()?;
        Ok(ds)
    }

    fn header_clone(&self) -> Dataset {
        Dataset {
            task: self.task.clone(),
            sample_shape: self.sample_shape.clone(),
            classes: self.classes,
            samples: Vec::new(),
            labels: Vec::new(),
            splits: Vec::new(),
            seed: self.seed,
            noise: self.noise,
            provenance: self.provenance.clone(),
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            task: self.task.clone(),
            sample_shape: self.sample_shape.clone(),
            classes: self.classes,
            count: self.len(),
            seed: self.seed,
            noise: self.noise,
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(14 + json.len() + self.samples.len() * 8 + self.len() * 16);
        out.extend_from_slice(GDAT_MAGIC);
        out.extend_from_slice(&GDAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.samples {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u64).to_le_bytes());
        }
        for s in &self.splits {
            out.extend_from_slice(&s.code().to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, DataError> {
        let truncated = || DataError::Truncated {
            path: path.to_path_buf(),
        };
        if bytes.len() < 14 || &bytes[..4] != GDAT_MAGIC {
            return Err(DataError::BadMagic {
                path: path.to_path_buf(),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(DataError::Checksum {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }
        let version = u16::from_le_bytes([body[4], body[5]]);
        if version != GDAT_VERSION {
            return Err(DataError::Version {
                path: path.to_path_buf(),
                found: version,
            });
        }
        let header_len = u32::from_le_bytes(body[6..10].try_into().expect("4 bytes")) as usize;
        let header_bytes = body.get(10..10 + header_len).ok_or_else(truncated)?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|source| DataError::Header {
                path: path.to_path_buf(),
                source,
            })?;
        let sample_len: usize = header.sample_shape.iter().product();
        let mut words = body[10 + header_len..].chunks_exact(8);
        let expected = header.count * (sample_len + 2);
        if words.len() != expected || !words.remainder().is_empty() {
            return Err(truncated());
        }
        let mut next = || u64::from_le_bytes(words.next().expect("length checked").try_into().expect("8 bytes"));
        let samples: Vec<f64> = (0..header.count * sample_len)
            .map(|_| f64::from_bits(next()))
            .collect();
        let labels: Vec<usize> = (0..header.count).map(|_| next() as usize).collect();
        let splits = (0..header.count)
            .map(|_| Split::from_code(next()))
            .collect::<Result<Vec<_>, _>>()?;
        let ds = Dataset {
            task: header.task,
            sample_shape: header.sample_shape,
            classes: header.classes,
            samples,
            labels,
            splits,
            seed: header.seed,
            noise: header.noise,
            provenance: header.provenance,
        };
        ds.check()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }

    /// CSV export (`x,y,label,split`) for two-feature tasks.
    pub fn to_csv_2d(&self) -> Option<String> {
        if self.sample_len() != 2 {
            return None;
        }
        let mut out = String::from("x,y,label,split\n");
        for i in 0..self.len() {
            let s = self.sample(i);
            let split = match self.splits[i] {
                Split::Train => "train",
                Split::Val => "val",
                Split::Attack => "attack",
            };
            out.push_str(&format!("{},{},{},{}\n", s[0], s[1], self.labels[i], split));
        }
        Some(out)
    }
}

const BLOB_DIMS: usize = 8;
const BLOB_CLASSES: usize = 4;
/// The two spiral arms wind together as a ribbon: one full turn, radius
/// growing from `SPIRAL_R0` to `SPIRAL_R1`, class 1 sitting `SPIRAL_GAP`
/// further out than class 0 at the same angle.
const SPIRAL_TURNS: f64 = 1.0;
const SPIRAL_R0: f64 = 0.25;
const SPIRAL_R1: f64 = 0.42;
const SPIRAL_GAP: f64 = 0.03;

/// Generates one of the bundled synthetic tasks.
///
/// Labels cycle through the classes so every class count is within one of
/// the others; within each class, consecutive samples are tagged
/// train/val/attack in a 6/2/2 pattern.
pub fn gen_synthetic(task: Task, count: usize, noise: f64, seed: u64) -> Result<Dataset, DataError> {
    if count < 100 {
        return Err(DataError::TooFewSamples(count));
    }
    let classes = task.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
    let splits: Vec<Split> = (0..count)
        .map(|i| match (i / classes) % 10 {
            0..=5 => Split::Train,
            6 | 7 => Split::Val,
            _ => Split::Attack,
        })
        .collect();
    let gauss = Normal::new(0.0, noise.max(0.0)).map_err(|e| DataError::Inconsistent(e.to_string()))?;
    let mut samples = Vec::with_capacity(count * task.sample_shape().iter().product::<usize>());
    match task {
        Task::Spirals2d => {
            for &label in &labels {
                let t: f64 = rng.random();
                let radius = SPIRAL_R0 + (SPIRAL_R1 - SPIRAL_R0) * t + label as f64 * SPIRAL_GAP;
                let angle = SPIRAL_TURNS * 2.0 * PI * t;
                let x = 0.5 + radius * angle.cos() + gauss.sample(&mut rng);
                let y = 0.5 + radius * angle.sin() + gauss.sample(&mut rng);
                samples.push(x.clamp(0.0, 1.0));
                samples.push(y.clamp(0.0, 1.0));
            }
        }
        Task::BlobsKd => {
            let centers: Vec<Vec<f64>> = (0..classes)
                .map(|_| (0..BLOB_DIMS).map(|_| rng.random_range(0.25..0.75)).collect())
                .collect();
            for &label in &labels {
                for &c in &centers[label] {
                    samples.push((c + gauss.sample(&mut rng)).clamp(0.0, 1.0));
                }
            }
        }
        Task::Digits8x8 => {
            for &label in &labels {
                render_glyph(label, &mut rng, &gauss, &mut samples);
            }
        }
    }
    let mut ds = Dataset::new(task.name(), task.sample_shape(), classes, samples, labels, splits)?;
    ds.seed = Some(seed);
    ds.noise = Some(noise);
    Ok(ds)
}

/// 5x6 bitmaps of the digits 0-9, one row per string.
const GLYPHS: [[&str; 6]; 10] = [
    ["01110", "10001", "10011", "10101", "11001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00010", "00100", "01000", "11111"],
    ["11110", "00001", "00110", "00001", "00001", "11110"],
    ["00010", "00110", "01010", "10010", "11111", "00010"],
    ["11111", "10000", "11110", "00001", "10001", "01110"],
    ["00110", "01000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000"],
    ["01110", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00010", "01100"],
];

/// Renders a glyph at a random offset with random stroke/background levels
/// and additive Gaussian pixel noise.
fn render_glyph(label: usize, rng: &mut ChaCha8Rng, gauss: &Normal<f64>, out: &mut Vec<f64>) {
    let dx = rng.random_range(0..=3usize);
    let dy = rng.random_range(0..=2usize);
    let fg: f64 = rng.random_range(0.55..0.95);
    let bg: f64 = rng.random_range(0.0..0.25);
    let mut img = [bg; 64];
    for (r, row) in GLYPHS[label].iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            if ch == b'1' {
                img[(r + dy) * 8 + c + dx] = fg;
            }
        }
    }
    for v in img {
        out.push((v + gauss.sample(rng)).clamp(0.0, 1.0));
    }
}
