//! Labeled sample sets: synthetic generators, CSV and IDX loaders, seeded
//! splitting and seed derivation.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TlcError};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Generated { kind: DataKind, n: usize, classes: usize, noise: f64, seed: u64 },
    File { path: String, sha256: String },
    Derived(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, class_count: usize, provenance: Provenance) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(TlcError::dim("dataset labels", features.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(TlcError::Input(format!("label {bad} outside [0, {class_count})")));
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            provenance: self.provenance.clone(),
        }
    }

    /// First `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Content hash over features, labels and class count.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.features.rows() as u64).to_le_bytes());
        h.update((self.features.cols() as u64).to_le_bytes());
        h.update((self.class_count as u64).to_le_bytes());
        for v in self.features.as_slice() {
            h.update(v.to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }
}

/// Disjoint train/validation/test partition of one dataset.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(*f > 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(TlcError::Config(format!(
                "split fractions must be positive and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

/// Seeded shuffle, then contiguous train/val/test blocks.
pub fn split(data: &Dataset, fractions: SplitFractions, seed: u64) -> Result<Splits> {
    fractions.validate()?;
    let n = data.len();
    let n_train = (fractions.train * n as f64).round() as usize;
    let n_val = (fractions.val * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(TlcError::Input(format!(
            "{n} samples cannot fill every split with fractions {fractions:?}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Splits {
        train: data.subset(&idx[..n_train]),
        val: data.subset(&idx[n_train..n_train + n_val]),
        test: data.subset(&idx[n_train + n_val..]),
    })
}

/// What a derived seed is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedPurpose {
    DataGen,
    Split,
    Init,
    Shuffle,
    Calibration,
}

impl SeedPurpose {
    fn tag(self) -> u64 {
        match self {
            SeedPurpose::DataGen => 1,
            SeedPurpose::Split => 2,
            SeedPurpose::Init => 3,
            SeedPurpose::Shuffle => 4,
            SeedPurpose::Calibration => 5,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent per-purpose seed from the global seed.
pub fn derive_seed(global: u64, purpose: SeedPurpose) -> u64 {
    splitmix64(splitmix64(global) ^ purpose.tag().wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Blobs,
    Moons,
    Spirals,
}

impl std::str::FromStr for DataKind {
    type Err = TlcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(DataKind::Blobs),
            "moons" => Ok(DataKind::Moons),
            "spirals" => Ok(DataKind::Spirals),
            other => Err(TlcError::Input(format!("unknown dataset kind {other:?}"))),
        }
    }
}

/// Distance between neighbouring blob centres, in units of `noise`.
pub const BLOB_SEPARATION: f64 = 6.0;
/// Turns of each spiral arm.
pub const SPIRAL_TURNS: f64 = 1.0;
/// Inner radius where spiral arms start (outer radius is 1).
pub const SPIRAL_INNER_RADIUS: f64 = 0.1;

/// Two-dimensional synthetic classification data. Features are standardized to
/// zero mean and unit variance per dimension.
///
/// * `blobs`: isotropic Gaussians of std `noise` centred on a circle so that
///   neighbouring centres sit `BLOB_SEPARATION` apart (6σ at `noise = 1`).
/// * `moons`: the two interleaved half circles; requires two classes.
/// * `spirals`: `class_count` interleaved arms with radius growing linearly
///   from `SPIRAL_INNER_RADIUS` to 1, plus Gaussian jitter of std `noise`.
///
/// Classes receive `n / class_count` samples each, remainder to the lowest labels.
pub fn generate(kind: DataKind, n: usize, class_count: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if class_count < 2 {
        return Err(TlcError::Input("need at least two classes".into()));
    }
    if n < class_count * 10 {
        return Err(TlcError::Input(format!("n = {n} must be >= 10 * classes")));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(TlcError::Input("noise must be finite and >= 0".into()));
    }
    if kind == DataKind::Moons && class_count != 2 {
        return Err(TlcError::Input("moons has exactly two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = move |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    let mut pts = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for c in 0..class_count {
        let count = n / class_count + usize::from(c < n % class_count);
        for _ in 0..count {
            let (x, y) = match kind {
                DataKind::Blobs => {
                    let radius = BLOB_SEPARATION * noise.max(1e-12) / (2.0 * (PI / class_count as f64).sin());
                    let a = 2.0 * PI * c as f64 / class_count as f64;
                    (
                        radius * a.cos() + noise * gauss(&mut rng),
                        radius * a.sin() + noise * gauss(&mut rng),
                    )
                }
                DataKind::Moons => {
                    let t = PI * rng.random::<f64>();
                    let (x, y) = if c == 0 {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    (x + noise * gauss(&mut rng), y + noise * gauss(&mut rng))
                }
                DataKind::Spirals => {
                    let t: f64 = rng.random();
                    let r = SPIRAL_INNER_RADIUS + (1.0 - SPIRAL_INNER_RADIUS) * t;
                    let a = 2.0 * PI * (SPIRAL_TURNS * t + c as f64 / class_count as f64);
                    (
                        r * a.cos() + noise * gauss(&mut rng),
                        r * a.sin() + noise * gauss(&mut rng),
                    )
                }
            };
            pts.push(x);
            pts.push(y);
            labels.push(c);
        }
    }
    standardize(&mut pts, 2);
    let features = Matrix::from_vec(n, 2, pts.into_iter().map(|v| v as f32).collect())?;
    Dataset::new(
        features,
        labels,
        class_count,
        Provenance::Generated {
            kind,
            n,
            classes: class_count,
            noise,
            seed,
        },
    )
}

fn standardize(values: &mut [f64], dim: usize) {
    let n = values.len() / dim;
    for d in 0..dim {
        let mean = (0..n).map(|i| values[i * dim + d]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (values[i * dim + d] - mean).powi(2)).sum::<f64>() / n as f64;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            values[i * dim + d] = (values[i * dim + d] - mean) / std;
        }
    }
}

fn file_sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| TlcError::io(path, e))
}

/// Which CSV column carries the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelColumn {
    #[default]
    Last,
    Index(usize),
}

/// Parses comma-separated decimal floats, one sample per row. Labels must be
/// non-negative integers (written either as `3` or `3.0`). Blank lines are
/// ignored. The class count is one past the largest label.
pub fn parse_csv(text: &str, source_name: &str, has_header: bool, label: LabelColumn) -> Result<Dataset> {
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    let err = |line: usize, message: String| TlcError::Parse {
        source_name: source_name.to_string(),
        location: format!("line {line}"),
        message,
    };
    for (lineno, line) in text.lines().enumerate().skip(usize::from(has_header)) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(err(lineno + 1, format!("expected {w} fields, found {}", fields.len())))
            }
            _ => {}
        }
        if fields.len() < 2 {
            return Err(err(lineno + 1, "need at least one feature and a label".into()));
        }
        let label_idx = match label {
            LabelColumn::Last => fields.len() - 1,
            LabelColumn::Index(i) if i < fields.len() => i,
            LabelColumn::Index(i) => return Err(err(lineno + 1, format!("label column {i} out of range"))),
        };
        for (j, f) in fields.iter().enumerate() {
            if j == label_idx {
                let v: f64 = f
                    .parse()
                    .map_err(|_| err(lineno + 1, format!("label {f:?} is not a number")))?;
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(err(lineno + 1, format!("label {f:?} is not a non-negative integer")));
                }
                labels.push(v as usize);
            } else {
                let v: f32 = f
                    .parse()
                    .map_err(|_| err(lineno + 1, format!("field {} ({f:?}) is not a float", j + 1)))?;
                if !v.is_finite() {
                    return Err(err(lineno + 1, format!("field {} is not finite", j + 1)));
                }
                feats.push(v);
            }
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(err(0, "no samples".into()));
    }
    let dim = feats.len() / n;
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(
        Matrix::from_vec(n, dim, feats)?,
        labels,
        class_count,
        Provenance::File {
            path: source_name.to_string(),
            sha256: file_sha256(text.as_bytes()),
        },
    )
}

pub fn load_csv(path: &Path, has_header: bool, label: LabelColumn) -> Result<Dataset> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| TlcError::Parse {
        source_name: path.display().to_string(),
        location: format!("byte {}", e.utf8_error().valid_up_to()),
        message: "not UTF-8".into(),
    })?;
    parse_csv(&text, &path.display().to_string(), has_header, label)
}

/// Header `x0,..,x{d-1},label`, label last. Floats use the shortest text that
/// reads back to the same bits.
pub fn to_csv(data: &Dataset) -> String {
    let mut out = String::new();
    for j in 0..data.dim() {
        let _ = write!(out, "x{j},");
    }
    out.push_str("label\n");
    for (row, y) in data.features.row_iter().zip(&data.labels) {
        for v in row {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{y}");
    }
    out
}

pub fn write_csv(data: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(data)).map_err(|e| TlcError::io(path, e))
}

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, name: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| TlcError::Parse {
            source_name: name.to_string(),
            location: format!("byte {offset}"),
            message: "unexpected end of file".into(),
        })
}

/// Parses big-endian IDX image (`0x00000803`, dims n·rows·cols, u8) and label
/// (`0x00000801`, dim n) buffers. Pixels are scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8], image_name: &str, label_name: &str) -> Result<Dataset> {
    let perr = |name: &str, offset: usize, message: String| TlcError::Parse {
        source_name: name.to_string(),
        location: format!("byte {offset}"),
        message,
    };
    let magic = be_u32(images, 0, image_name)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(perr(image_name, 0, format!("image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}")));
    }
    let n = be_u32(images, 4, image_name)? as usize;
    let rows = be_u32(images, 8, image_name)? as usize;
    let cols = be_u32(images, 12, image_name)? as usize;
    let pixels = rows * cols;
    if images.len() != 16 + n * pixels {
        return Err(perr(
            image_name,
            images.len().min(16 + n * pixels),
            format!("expected {} bytes of pixels, found {}", n * pixels, images.len().saturating_sub(16)),
        ));
    }

    let lmagic = be_u32(labels, 0, label_name)?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(perr(label_name, 0, format!("label magic {lmagic:#010x}, expected {IDX_LABEL_MAGIC:#010x}")));
    }
    let ln = be_u32(labels, 4, label_name)? as usize;
    if ln != n {
        return Err(perr(label_name, 4, format!("{ln} labels for {n} images")));
    }
    if labels.len() != 8 + n {
        return Err(perr(label_name, labels.len().min(8 + n), format!("expected {n} label bytes")));
    }
    let feats = images[16..].iter().map(|&p| p as f32 / 255.0).collect();
    let ys: Vec<usize> = labels[8..].iter().map(|&y| y as usize).collect();
    let class_count = ys.iter().max().map_or(0, |m| m + 1);
    let mut h = Sha256::new();
    h.update(images);
    h.update(labels);
    Dataset::new(
        Matrix::from_vec(n, pixels, feats)?,
        ys,
        class_count,
        Provenance::File {
            path: format!("{image_name}+{label_name}"),
            sha256: hex::encode(h.finalize()),
        },
    )
}

pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let images = read_file(image_path)?;
    let labels = read_file(label_path)?;
    parse_idx(
        &images,
        &labels,
        &image_path.display().to_string(),
        &label_path.display().to_string(),
    )
}
