//! Label-state data model and the single-positive training setting.
//!
//! A fully labeled matrix holds only `ObservedPositive` / `TrueNegative`.
//! SPML training rows hold exactly one `ObservedPositive` and everything else
//! `Unknown` until pseudo-labels are merged in.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("row {0} has no positive label")]
    NoPositiveRow(usize),
    #[error("invalid validation fraction {fraction} for {n_samples} samples")]
    InvalidFraction { fraction: f64, n_samples: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelState {
    ObservedPositive,
    TrueNegative,
    Unknown,
    PseudoPositive,
    PseudoNegative,
}

impl LabelState {
    pub fn is_positive(self) -> bool {
        self == LabelState::ObservedPositive
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationMatrix {
    n_samples: usize,
    n_labels: usize,
    states: Vec<LabelState>,
}

impl AnnotationMatrix {
    pub fn new(n_samples: usize, n_labels: usize, states: Vec<LabelState>) -> Result<Self, DatasetError> {
        if states.len() != n_samples * n_labels {
            return Err(DatasetError::ShapeMismatch(format!(
                "{} states for {n_samples}x{n_labels}",
                states.len()
            )));
        }
        Ok(Self {
            n_samples,
            n_labels,
            states,
        })
    }

    pub fn filled(n_samples: usize, n_labels: usize, state: LabelState) -> Self {
        Self {
            n_samples,
            n_labels,
            states: vec![state; n_samples * n_labels],
        }
    }

    /// Fully labeled matrix from per-row positive label indices.
    pub fn from_positive_lists(n_labels: usize, rows: &[Vec<usize>]) -> Result<Self, DatasetError> {
        let mut states = vec![LabelState::TrueNegative; rows.len() * n_labels];
        for (i, row) in rows.iter().enumerate() {
            for &l in row {
                if l >= n_labels {
                    return Err(DatasetError::ShapeMismatch(format!(
                        "row {i}: label {l} out of range {n_labels}"
                    )));
                }
                states[i * n_labels + l] = LabelState::ObservedPositive;
            }
        }
        Self::new(rows.len(), n_labels, states)
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn states(&self) -> &[LabelState] {
        &self.states
    }

    pub fn row(&self, i: usize) -> &[LabelState] {
        &self.states[i * self.n_labels..(i + 1) * self.n_labels]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [LabelState] {
        &mut self.states[i * self.n_labels..(i + 1) * self.n_labels]
    }

    pub fn get(&self, i: usize, l: usize) -> LabelState {
        self.states[i * self.n_labels + l]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[LabelState]> + '_ {
        self.states.chunks_exact(self.n_labels.max(1))
    }

    pub fn select_rows(&self, indices: &[usize]) -> AnnotationMatrix {
        let mut states = Vec::with_capacity(indices.len() * self.n_labels);
        for &i in indices {
            states.extend_from_slice(self.row(i));
        }
        AnnotationMatrix {
            n_samples: indices.len(),
            n_labels: self.n_labels,
            states,
        }
    }

    /// Indices of `ObservedPositive` entries per row.
    pub fn positive_lists(&self) -> Vec<Vec<usize>> {
        self.iter_rows()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, s)| s.is_positive())
                    .map(|(l, _)| l)
                    .collect()
            })
            .collect()
    }

    /// Binary target matrix: 1 for `ObservedPositive`, 0 otherwise.
    pub fn binary_targets(&self) -> Vec<bool> {
        self.states.iter().map(|s| s.is_positive()).collect()
    }

    pub fn is_spml_form(&self) -> bool {
        self.iter_rows().all(|row| {
            row.iter().filter(|s| s.is_positive()).count() == 1
                && !row.contains(&LabelState::TrueNegative)
        })
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.states
            .iter()
            .all(|s| matches!(s, LabelState::ObservedPositive | LabelState::TrueNegative))
    }
}

/// Deterministic per-row seed so that parallel and serial row processing agree.
pub(crate) fn mix_seed(seed: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(index))
}

fn keep_one_positive(row: &mut [LabelState], seed: u64, row_index: usize) -> Result<(), DatasetError> {
    let positives: Vec<usize> = row
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_positive())
        .map(|(l, _)| l)
        .collect();
    if positives.is_empty() {
        return Err(DatasetError::NoPositiveRow(row_index));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, row_index as u64));
    let keep = positives[rng.random_range(0..positives.len())];
    row.fill(LabelState::Unknown);
    row[keep] = LabelState::ObservedPositive;
    Ok(())
}

/// Keeps one uniformly chosen positive per row; all other entries become `Unknown`.
pub fn simulate_single_positive(full: &AnnotationMatrix, seed: u64) -> Result<AnnotationMatrix, DatasetError> {
    let mut out = full.clone();
    for i in 0..out.n_samples {
        keep_one_positive(out.row_mut(i), seed, i)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    /// SPML form, rows aligned with `train_indices`.
    pub train_annotations: AnnotationMatrix,
    /// Fully labeled, rows aligned with `val_indices`.
    pub val_annotations: AnnotationMatrix,
}

/// Serialized form of a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub seed: u64,
    pub fraction: f64,
}

/// Holds out `round(fraction * n)` fully labeled validation rows and turns the
/// rest into single-positive training rows.
pub fn split_validation(full: &AnnotationMatrix, fraction: f64, seed: u64) -> Result<DatasetSplit, DatasetError> {
    let n = full.n_samples;
    let invalid = || DatasetError::InvalidFraction { fraction, n_samples: n };
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(invalid());
    }
    // f64::round is half away from zero
    let n_val = (fraction * n as f64).round() as usize;
    if n_val < 1 || n_val >= n {
        return Err(invalid());
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut val_indices = order[..n_val].to_vec();
    let mut train_indices = order[n_val..].to_vec();
    val_indices.sort_unstable();
    train_indices.sort_unstable();

    let mut train_annotations = full.select_rows(&train_indices);
    for (row, &original) in train_indices.iter().enumerate() {
        keep_one_positive(train_annotations.row_mut(row), seed, original)?;
    }
    Ok(DatasetSplit {
        val_annotations: full.select_rows(&val_indices),
        train_indices,
        val_indices,
        train_annotations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub n_samples: usize,
    pub avg_positives: f64,
    /// Fraction of rows in which each label is positive.
    pub label_frequencies: Vec<f64>,
}

pub fn dataset_stats(ann: &AnnotationMatrix) -> DatasetStats {
    let n = ann.n_samples.max(1) as f64;
    let mut counts = vec![0usize; ann.n_labels];
    let mut total = 0usize;
    for row in ann.iter_rows() {
        for (l, s) in row.iter().enumerate() {
            if s.is_positive() {
                counts[l] += 1;
                total += 1;
            }
        }
    }
    DatasetStats {
        n_samples: ann.n_samples,
        avg_positives: total as f64 / n,
        label_frequencies: counts.into_iter().map(|c| c as f64 / n).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub id: String,
    pub positives: Vec<usize>,
}

/// Reads `{"id", "positives"}` JSON lines. Unlisted labels are negative.
pub fn read_annotations(path: &Path, n_labels: usize) -> Result<(Vec<String>, AnnotationMatrix), DatasetError> {
    let reader = BufReader::new(File::open(path)?);
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| DatasetError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg,
        };
        let rec: LabeledRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if let Some(&bad) = rec.positives.iter().find(|&&l| l >= n_labels) {
            return Err(parse_err(format!("label index {bad} out of range {n_labels}")));
        }
        ids.push(rec.id);
        rows.push(rec.positives);
    }
    Ok((ids, AnnotationMatrix::from_positive_lists(n_labels, &rows)?))
}

pub fn write_annotations(path: &Path, ids: &[String], ann: &AnnotationMatrix) -> Result<(), DatasetError> {
    if ids.len() != ann.n_samples() {
        return Err(DatasetError::ShapeMismatch(format!(
            "{} ids for {} rows",
            ids.len(),
            ann.n_samples()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    for (id, positives) in ids.iter().zip(ann.positive_lists()) {
        let rec = LabeledRecord {
            id: id.clone(),
            positives,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
