//! Embedding matrices on disk and in memory.
//!
//! File layout (little-endian):
//! - magic: `VLPLEMB1` (8 bytes)
//! - rows: u32, dim: u32
//! - data: rows * dim * f32, row-major
//! - SHA-256 of the data section (32 bytes)
//!
//! A JSON manifest sits next to the binary at `<path>.json`.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scalar::{l2_norm, Scalar};
use crate::spml_dataset::{AnnotationMatrix, LabelState};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"VLPLEMB1";
const HEADER_LEN: usize = 16;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("malformed embedding header: {0}")]
    MalformedHeader(String),
    #[error("manifest dim {manifest} does not match matrix dim {matrix}")]
    DimensionMismatch { manifest: usize, matrix: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("checksum mismatch: expected {expected}, found {found}")]
    ChecksumMismatch { expected: String, found: String },
    #[error("row {0} has zero norm")]
    ZeroNormRow(usize),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid matrix shape: {0}")]
    InvalidShape(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("i/o failure on {path}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    #[default]
    Image,
    Label,
}

/// Row-major `rows x dim` matrix of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix<T> {
    rows: usize,
    dim: usize,
    data: Vec<T>,
    kind: EmbeddingKind,
}

impl<T: Scalar> EmbeddingMatrix<T> {
    pub fn new(rows: usize, dim: usize, data: Vec<T>, kind: EmbeddingKind) -> Result<Self, StoreError> {
        if rows == 0 || dim == 0 {
            return Err(StoreError::InvalidShape(format!("{rows}x{dim}")));
        }
        if data.len() != rows * dim {
            return Err(StoreError::InvalidShape(format!(
                "{} values for a {rows}x{dim} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFiniteValue {
                row: pos / dim,
                col: pos % dim,
            });
        }
        Ok(Self { rows, dim, data, kind })
    }

    pub fn from_rows(rows: &[Vec<T>], kind: EmbeddingKind) -> Result<Self, StoreError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(StoreError::InvalidShape("ragged rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat(), kind)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Copies the given rows, in the given order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self, StoreError> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.rows {
                return Err(StoreError::InvalidShape(format!("row {i} out of {}", self.rows)));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(indices.len(), self.dim, data, self.kind)
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize(&self) -> Result<Self, StoreError> {
        let mut data = self.data.clone();
        for (i, row) in data.chunks_exact_mut(self.dim).enumerate() {
            let norm = l2_norm(row);
            if norm == T::zero() {
                return Err(StoreError::ZeroNormRow(i));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        Ok(Self {
            rows: self.rows,
            dim: self.dim,
            data,
            kind: self.kind,
        })
    }

    pub fn with_kind(mut self, kind: EmbeddingKind) -> Self {
        self.kind = kind;
        self
    }

    /// Converts to another scalar type through `f64`.
    pub fn cast<U: Scalar>(&self) -> EmbeddingMatrix<U> {
        EmbeddingMatrix {
            rows: self.rows,
            dim: self.dim,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            kind: self.kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub label_names: Vec<String>,
    pub prompt_template: String,
    pub source: String,
    pub dim: usize,
    /// Hex SHA-256 of the data section; filled in by [`save_embeddings`].
    #[serde(default)]
    pub checksum: String,
    /// Optional; older exporters omit it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<EmbeddingKind>,
}

impl Manifest {
    pub fn new(label_names: Vec<String>, prompt_template: &str, source: &str, dim: usize) -> Self {
        Self {
            label_names,
            prompt_template: prompt_template.to_string(),
            source: source.to_string(),
            dim,
            checksum: String::new(),
            kind: None,
        }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let mut seen = HashSet::new();
        for name in &self.label_names {
            if name.is_empty() {
                return Err(StoreError::InvalidManifest("empty label name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(StoreError::InvalidManifest(format!("duplicate label name {name:?}")));
            }
        }
        if self.dim == 0 {
            return Err(StoreError::InvalidManifest("dim must be positive".into()));
        }
        Ok(())
    }

    pub fn n_labels(&self) -> usize {
        self.label_names.len()
    }
}

/// Path of the JSON sidecar for an embedding file.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn data_checksum(data: &[u8]) -> [u8; CHECKSUM_LEN] {
    Sha256::digest(data).into()
}

fn encode_data<T: Scalar>(matrix: &EmbeddingMatrix<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(matrix.data.len() * 4);
    for v in &matrix.data {
        out.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
    }
    out
}

/// Writes the binary file and its manifest sidecar. Returns the manifest as
/// written, with `dim`, `kind` and `checksum` filled in.
pub fn save_embeddings<T: Scalar>(
    matrix: &EmbeddingMatrix<T>,
    manifest: &Manifest,
    path: &Path,
) -> Result<Manifest, StoreError> {
    manifest.validate()?;
    if manifest.dim != matrix.dim {
        return Err(StoreError::DimensionMismatch {
            manifest: manifest.dim,
            matrix: matrix.dim,
        });
    }
    let rows = u32::try_from(matrix.rows).map_err(|_| StoreError::InvalidShape("too many rows".into()))?;
    let dim = u32::try_from(matrix.dim).map_err(|_| StoreError::InvalidShape("dim too large".into()))?;
    let data = encode_data(matrix);
    if let Some(pos) = data
        .chunks_exact(4)
        .position(|c| !f32::from_le_bytes([c[0], c[1], c[2], c[3]]).is_finite())
    {
        // f64 values beyond f32 range overflow on the way down
        return Err(StoreError::NonFiniteValue {
            row: pos / matrix.dim,
            col: pos % matrix.dim,
        });
    }
    let checksum = data_checksum(&data);

    let mut bytes = Vec::with_capacity(HEADER_LEN + data.len() + CHECKSUM_LEN);
    bytes.extend_from_slice(EMBEDDING_MAGIC);
    bytes.extend_from_slice(&rows.to_le_bytes());
    bytes.extend_from_slice(&dim.to_le_bytes());
    bytes.extend_from_slice(&data);
    bytes.extend_from_slice(&checksum);

    let mut written = manifest.clone();
    written.checksum = hex::encode(checksum);
    written.kind = Some(matrix.kind);

    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&bytes).map_err(io_err(path))?;
    let sidecar = manifest_path(path);
    let json = serde_json::to_vec_pretty(&written)?;
    fs::write(&sidecar, json).map_err(io_err(&sidecar))?;
    Ok(written)
}

/// Reads an embedding file and its manifest, checking shape, checksum and
/// finiteness. Values are not normalized.
pub fn load_embeddings<T: Scalar>(path: &Path) -> Result<(EmbeddingMatrix<T>, Manifest), StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < HEADER_LEN || &bytes[..8] != EMBEDDING_MAGIC {
        return Err(StoreError::MalformedHeader("missing VLPLEMB1 magic".into()));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if rows == 0 || dim == 0 {
        return Err(StoreError::MalformedHeader(format!("degenerate shape {rows}x{dim}")));
    }
    let data_len = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| StoreError::MalformedHeader("shape overflows".into()))?;
    if bytes.len() != HEADER_LEN + data_len + CHECKSUM_LEN {
        return Err(StoreError::MalformedHeader(format!(
            "expected {} bytes for {rows}x{dim}, found {}",
            HEADER_LEN + data_len + CHECKSUM_LEN,
            bytes.len()
        )));
    }

    let sidecar = manifest_path(path);
    let manifest: Manifest = serde_json::from_slice(&fs::read(&sidecar).map_err(io_err(&sidecar))?)?;
    manifest.validate()?;
    if manifest.dim != dim {
        return Err(StoreError::DimensionMismatch {
            manifest: manifest.dim,
            matrix: dim,
        });
    }

    let data = &bytes[HEADER_LEN..HEADER_LEN + data_len];
    let stored = &bytes[HEADER_LEN + data_len..];
    let computed = data_checksum(data);
    if stored != computed {
        return Err(StoreError::ChecksumMismatch {
            expected: hex::encode(stored),
            found: hex::encode(computed),
        });
    }
    if !manifest.checksum.is_empty() && !manifest.checksum.eq_ignore_ascii_case(&hex::encode(computed)) {
        return Err(StoreError::ChecksumMismatch {
            expected: manifest.checksum.clone(),
            found: hex::encode(computed),
        });
    }

    let values: Vec<T> = data
        .chunks_exact(4)
        .map(|c| T::widen_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let kind = manifest.kind.unwrap_or(if rows == manifest.n_labels() {
        EmbeddingKind::Label
    } else {
        EmbeddingKind::Image
    });
    let matrix = EmbeddingMatrix::new(rows, dim, values, kind)?;
    Ok((matrix, manifest))
}

/// Parameters of the planted-prototype generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_labels: usize,
    pub dim: usize,
    pub avg_positives: f64,
    /// Per-coordinate standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Exactly one uniformly drawn positive per sample instead of
    /// independent Bernoulli draws.
    #[serde(default)]
    pub exclusive: bool,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), StoreError> {
        if self.n_samples == 0 || self.n_labels == 0 || self.dim == 0 {
            return Err(StoreError::InvalidSpec("counts must be positive".into()));
        }
        if !(self.avg_positives > 0.0 && self.avg_positives <= self.n_labels as f64) {
            return Err(StoreError::InvalidSpec(format!(
                "avg_positives {} must lie in (0, {}]",
                self.avg_positives, self.n_labels
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(StoreError::InvalidSpec("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData<T> {
    pub images: EmbeddingMatrix<T>,
    pub labels: EmbeddingMatrix<T>,
    pub ground_truth: AnnotationMatrix,
}

fn normalize_in_place(v: &mut [f64]) {
    let norm = l2_norm(v);
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Planted-structure generator: random unit label prototypes, and image
/// embeddings built from the prototypes of each sample's positive labels.
pub fn synthesize<T: Scalar>(spec: &SyntheticSpec) -> Result<SyntheticData<T>, StoreError> {
    spec.validate()?;
    let (n, l, d) = (spec.n_samples, spec.n_labels, spec.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut prototypes = vec![0.0f64; l * d];
    for row in prototypes.chunks_exact_mut(d) {
        loop {
            row.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
            if l2_norm(row) > 0.0 {
                break;
            }
        }
        normalize_in_place(row);
    }

    let q = spec.avg_positives / l as f64;
    let mut images = vec![0.0f64; n * d];
    let mut states = Vec::with_capacity(n * l);
    let mut positives: Vec<usize> = Vec::with_capacity(l);
    for image in images.chunks_exact_mut(d) {
        positives.clear();
        if spec.exclusive {
            positives.push(rng.random_range(0..l));
        } else {
            while positives.is_empty() {
                positives.extend((0..l).filter(|_| rng.random_bool(q.min(1.0))));
            }
        }

        if let [single] = positives[..] {
            image.copy_from_slice(&prototypes[single * d..(single + 1) * d]);
        } else {
            for &p in &positives {
                for (x, &proto) in image.iter_mut().zip(&prototypes[p * d..(p + 1) * d]) {
                    *x += proto;
                }
            }
            let k = positives.len() as f64;
            image.iter_mut().for_each(|x| *x /= k);
            normalize_in_place(image);
        }
        if spec.noise_sigma > 0.0 {
            for x in image.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *x += spec.noise_sigma * z;
            }
            normalize_in_place(image);
        }

        let mut row = vec![LabelState::TrueNegative; l];
        for &p in &positives {
            row[p] = LabelState::ObservedPositive;
        }
        states.extend(row);
    }

    let conv = |v: Vec<f64>| v.into_iter().map(T::lit).collect::<Vec<T>>();
    Ok(SyntheticData {
        images: EmbeddingMatrix::new(n, d, conv(images), EmbeddingKind::Image)?,
        labels: EmbeddingMatrix::new(l, d, conv(prototypes), EmbeddingKind::Label)?,
        ground_truth: AnnotationMatrix::new(n, l, states).expect("generator shape"),
    })
}
