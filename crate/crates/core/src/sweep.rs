//! Grid sweeps over pseudo-labeling and loss hyperparameters.
//!
//! Each cell is `(tau, theta, delta, smoothing, seed)`: pseudo-label the
//! training images, merge with the observed positives, train a probe and
//! evaluate it. Results are appended to a CSV journal one row at a time; a
//! rerun with the same journal skips every cell already recorded there.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding_store::EmbeddingMatrix;
use crate::losses::LossVariant;
use crate::metrics::to_pct;
use crate::probe::{evaluate, train, EvalSet, TrainConfig};
use crate::pseudo_label::{pseudo_label_dataset, pseudo_label_quality, PseudoLabelConfig};
use crate::scalar::{median, Scalar};
use crate::spml_dataset::AnnotationMatrix;

pub const JOURNAL_HEADER: &str = "tau,theta,delta,smoothing,seed,val_map,test_map,pseudo_precision,pseudo_recall,status";

pub const DEFAULT_TAUS: [f64; 5] = [0.01, 0.03, 0.05, 0.07, 0.09];
pub const DEFAULT_THETAS: [f64; 3] = [0.1, 0.2, 0.3];
pub const FINE_THETAS: [f64; 3] = [0.01, 0.03, 0.05];

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep spec: {0}")]
    InvalidSpec(String),
    #[error("sweep result is empty")]
    EmptyResult,
    #[error("journal {path}: {msg}")]
    Journal { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub taus: Vec<f64>,
    pub thetas: Vec<f64>,
    /// Pseudo-negative percentages; `0` disables negatives for that cell.
    pub deltas: Vec<f64>,
    pub smoothing: Vec<bool>,
    /// Seeds per cell: `base.seed, base.seed + 1, ...`.
    pub repeats: usize,
    pub base: TrainConfig,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            taus: DEFAULT_TAUS.to_vec(),
            thetas: DEFAULT_THETAS.to_vec(),
            deltas: vec![0.0],
            smoothing: vec![true],
            repeats: 3,
            base: TrainConfig::default(),
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), SweepError> {
        let empty = [
            ("taus", self.taus.is_empty()),
            ("thetas", self.thetas.is_empty()),
            ("deltas", self.deltas.is_empty()),
            ("smoothing", self.smoothing.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(SweepError::InvalidSpec(format!("{name} must not be empty")));
        }
        if self.repeats == 0 {
            return Err(SweepError::InvalidSpec("repeats must be >= 1".into()));
        }
        self.base
            .validate()
            .map_err(|e| SweepError::InvalidSpec(e.to_string()))
    }

    /// Cells in journal order: tau outermost, seed innermost.
    pub fn grid(&self) -> Vec<SweepCell> {
        let mut cells = Vec::new();
        for &tau in &self.taus {
            for &theta in &self.thetas {
                for &delta in &self.deltas {
                    for &smoothing in &self.smoothing {
                        for r in 0..self.repeats {
                            cells.push(SweepCell {
                                tau,
                                theta,
                                delta,
                                smoothing,
                                seed: self.base.seed + r as u64,
                            });
                        }
                    }
                }
            }
        }
        cells
    }

    pub fn pseudo_config(&self, cell: &SweepCell) -> PseudoLabelConfig {
        PseudoLabelConfig {
            tau: cell.tau,
            theta: cell.theta,
            delta_pct: cell.delta,
            use_negatives: cell.delta > 0.0,
        }
    }

    /// Training config for a cell. Cells with pseudo-negatives switch to the
    /// full loss so the negative term is active.
    pub fn train_config(&self, cell: &SweepCell) -> TrainConfig {
        let mut cfg = self.base.clone();
        cfg.seed = cell.seed;
        cfg.loss.smoothing_enabled = cell.smoothing;
        if cell.delta > 0.0 {
            cfg.loss.variant = LossVariant::VlplFull;
        }
        cfg
    }
}

/// Everything a sweep cell reads. Validation and test labels are fully labeled.
#[derive(Debug, Clone, Copy)]
pub struct SweepData<'a, T> {
    pub label_embeddings: &'a EmbeddingMatrix<T>,
    pub train_features: &'a EmbeddingMatrix<T>,
    /// Single-positive training annotations.
    pub train_observed: &'a AnnotationMatrix,
    /// Full labels of the training rows, for pseudo-label quality.
    pub train_truth: Option<&'a AnnotationMatrix>,
    pub validation: EvalSet<'a, T>,
    pub test: EvalSet<'a, T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub tau: f64,
    pub theta: f64,
    pub delta: f64,
    pub smoothing: bool,
    pub seed: u64,
}

impl SweepCell {
    fn key(&self) -> (u64, u64, u64, bool, u64) {
        (
            self.tau.to_bits(),
            self.theta.to_bits(),
            self.delta.to_bits(),
            self.smoothing,
            self.seed,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMetrics {
    /// 0–100 scale.
    pub val_map: f64,
    pub test_map: f64,
    pub pseudo_precision: Option<f64>,
    pub pseudo_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Ok(CellMetrics),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct JournalRow {
    pub cell: SweepCell,
    pub status: CellStatus,
}

impl JournalRow {
    fn to_csv_line(&self) -> String {
        let c = &self.cell;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let (metrics, status) = match &self.status {
            CellStatus::Ok(m) => (
                format!(
                    "{},{},{},{}",
                    m.val_map,
                    m.test_map,
                    opt(m.pseudo_precision),
                    opt(m.pseudo_recall)
                ),
                "ok".to_string(),
            ),
            CellStatus::Failed(msg) => (",,,".to_string(), format!("failed: {}", msg.replace([',', '\n'], ";"))),
        };
        format!(
            "{},{},{},{},{},{},{}\n",
            c.tau, c.theta, c.delta, c.smoothing, c.seed, metrics, status
        )
    }

    fn from_record(rec: &csv::StringRecord) -> Result<Self, String> {
        if rec.len() != 10 {
            return Err(format!("expected 10 fields, found {}", rec.len()));
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| format!("field {i}: {e}"));
        let opt = |i: usize| -> Result<Option<f64>, String> {
            if rec[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        let cell = SweepCell {
            tau: num(0)?,
            theta: num(1)?,
            delta: num(2)?,
            smoothing: rec[3].parse().map_err(|e| format!("smoothing: {e}"))?,
            seed: rec[4].parse().map_err(|e| format!("seed: {e}"))?,
        };
        let status = if &rec[9] == "ok" {
            CellStatus::Ok(CellMetrics {
                val_map: num(5)?,
                test_map: num(6)?,
                pseudo_precision: opt(7)?,
                pseudo_recall: opt(8)?,
            })
        } else {
            CellStatus::Failed(rec[9].trim_start_matches("failed: ").to_string())
        };
        Ok(Self { cell, status })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub tau: f64,
    pub theta: f64,
    pub delta: f64,
    pub smoothing: bool,
    pub seed: u64,
    pub val_map: f64,
    pub test_map: f64,
    pub pseudo_precision: Option<f64>,
    pub pseudo_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    /// Successful cells in grid order.
    pub rows: Vec<SweepRow>,
    pub failures: Vec<(SweepCell, String)>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub result: SweepResult,
    /// Cells trained in this call.
    pub computed: usize,
    /// Cells taken from the journal.
    pub reused: usize,
}

/// Runs one cell end to end.
pub fn run_cell<T: Scalar>(spec: &SweepSpec, data: &SweepData<'_, T>, cell: &SweepCell) -> Result<CellMetrics, String> {
    let pseudo = spec.pseudo_config(cell);
    let (merged, _) = pseudo_label_dataset(data.train_features, data.label_embeddings, data.train_observed, &pseudo)
        .map_err(|e| e.to_string())?;
    let quality = data
        .train_truth
        .map(|truth| pseudo_label_quality(&merged, truth))
        .transpose()
        .map_err(|e| e.to_string())?;
    let cfg = spec.train_config(cell);
    let outcome = train(data.train_features, &merged, Some(data.validation), &cfg).map_err(|e| e.to_string())?;
    let val = evaluate(&outcome.model, data.validation).map_err(|e| e.to_string())?;
    let test = evaluate(&outcome.model, data.test).map_err(|e| e.to_string())?;
    Ok(CellMetrics {
        val_map: to_pct(val.map),
        test_map: to_pct(test.map),
        pseudo_precision: quality.map(|q| q.precision),
        pseudo_recall: quality.map(|q| q.recall),
    })
}

fn read_journal(path: &Path) -> Result<Vec<JournalRow>, SweepError> {
    let journal_err = |msg: String| SweepError::Journal {
        path: path.to_path_buf(),
        msg,
    };
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut text = fs::read_to_string(path)?;
    if !text.is_empty() && !text.ends_with('\n') {
        // drop a row torn by an interrupted write
        let keep = text.rfind('\n').map_or(0, |i| i + 1);
        text.truncate(keep);
        fs::write(path, &text)?;
    }
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let mut lines = text.lines();
    if lines.next() != Some(JOURNAL_HEADER) {
        return Err(journal_err("unexpected header".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    reader
        .records()
        .enumerate()
        .map(|(i, rec)| JournalRow::from_record(&rec?).map_err(|m| journal_err(format!("row {}: {m}", i + 1))))
        .collect()
}

/// Runs every grid cell not already present in `journal`, appending rows as
/// they complete. `workers` bounds concurrent cells (0 = rayon default).
pub fn run_sweep<T: Scalar>(
    spec: &SweepSpec,
    data: &SweepData<'_, T>,
    journal: Option<&Path>,
    workers: usize,
) -> Result<SweepOutcome, SweepError> {
    spec.validate()?;
    let grid = spec.grid();

    let mut known: HashMap<_, JournalRow> = HashMap::new();
    if let Some(path) = journal {
        for row in read_journal(path)? {
            known.insert(row.cell.key(), row);
        }
    }
    let mut file = match journal {
        Some(path) => {
            let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            if fresh {
                writeln!(f, "{JOURNAL_HEADER}")?;
            }
            Some(f)
        }
        None => None,
    };

    let pending: Vec<SweepCell> = grid.iter().filter(|c| !known.contains_key(&c.key())).copied().collect();
    let reused = grid.len() - pending.len();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| {
        SweepError::InvalidSpec(format!("worker pool: {e}"))
    })?;
    let chunk = pool.current_num_threads().max(1);
    for cells in pending.chunks(chunk) {
        let rows: Vec<JournalRow> = pool.install(|| {
            cells
                .par_iter()
                .map(|cell| {
                    let status = match run_cell(spec, data, cell) {
                        Ok(m) => CellStatus::Ok(m),
                        Err(msg) => {
                            log::warn!("sweep cell {cell:?} failed: {msg}");
                            CellStatus::Failed(msg)
                        }
                    };
                    JournalRow { cell: *cell, status }
                })
                .collect()
        });
        for row in rows {
            if let Some(f) = file.as_mut() {
                f.write_all(row.to_csv_line().as_bytes())?;
                f.flush()?;
            }
            known.insert(row.cell.key(), row);
        }
    }

    let mut result = SweepResult::default();
    for cell in &grid {
        let row = &known[&cell.key()];
        match &row.status {
            CellStatus::Ok(m) => result.rows.push(SweepRow {
                tau: row.cell.tau,
                theta: row.cell.theta,
                delta: row.cell.delta,
                smoothing: row.cell.smoothing,
                seed: row.cell.seed,
                val_map: m.val_map,
                test_map: m.test_map,
                pseudo_precision: m.pseudo_precision,
                pseudo_recall: m.pseudo_recall,
            }),
            CellStatus::Failed(msg) => result.failures.push((row.cell, msg.clone())),
        }
    }
    Ok(SweepOutcome {
        result,
        computed: pending.len(),
        reused,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub tau: f64,
    pub theta: f64,
    pub delta: f64,
    pub smoothing: bool,
    pub seeds: usize,
    pub median_val_map: f64,
    pub median_test_map: f64,
}

/// One plotted series: fixed theta (and delta/smoothing), tau on the x axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub theta: f64,
    pub delta: f64,
    pub smoothing: bool,
    /// `(tau, median test mAP)` sorted by tau.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub best_cell: CellSummary,
    pub curves: Vec<Curve>,
    pub cells: Vec<CellSummary>,
}

fn cmp_cells(a: &CellSummary, b: &CellSummary) -> std::cmp::Ordering {
    a.tau
        .total_cmp(&b.tau)
        .then(a.theta.total_cmp(&b.theta))
        .then(a.delta.total_cmp(&b.delta))
        .then(a.smoothing.cmp(&b.smoothing))
}

/// Median-over-seeds aggregation. The best cell maximizes median validation
/// mAP; ties go to smaller tau, then smaller theta.
pub fn summarize(result: &SweepResult) -> Result<SweepSummary, SweepError> {
    if result.rows.is_empty() {
        return Err(SweepError::EmptyResult);
    }
    let mut groups: HashMap<(u64, u64, u64, bool), Vec<&SweepRow>> = HashMap::new();
    for r in &result.rows {
        groups
            .entry((r.tau.to_bits(), r.theta.to_bits(), r.delta.to_bits(), r.smoothing))
            .or_default()
            .push(r);
    }
    let mut cells: Vec<CellSummary> = groups
        .values()
        .map(|rows| {
            let vals: Vec<f64> = rows.iter().map(|r| r.val_map).collect();
            let tests: Vec<f64> = rows.iter().map(|r| r.test_map).collect();
            CellSummary {
                tau: rows[0].tau,
                theta: rows[0].theta,
                delta: rows[0].delta,
                smoothing: rows[0].smoothing,
                seeds: rows.len(),
                median_val_map: median(&vals).unwrap(),
                median_test_map: median(&tests).unwrap(),
            }
        })
        .collect();
    cells.sort_by(cmp_cells);

    let best_cell = cells
        .iter()
        .fold(None::<&CellSummary>, |best, c| match best {
            Some(b) if b.median_val_map >= c.median_val_map => Some(b),
            _ => Some(c),
        })
        .unwrap()
        .clone();

    let mut curves: Vec<Curve> = Vec::new();
    let mut by_series = cells.clone();
    by_series.sort_by(|a, b| {
        a.theta
            .total_cmp(&b.theta)
            .then(a.delta.total_cmp(&b.delta))
            .then(a.smoothing.cmp(&b.smoothing))
            .then(a.tau.total_cmp(&b.tau))
    });
    for c in by_series {
        match curves.last_mut() {
            Some(curve) if curve.theta == c.theta && curve.delta == c.delta && curve.smoothing == c.smoothing => {
                curve.points.push((c.tau, c.median_test_map));
            }
            _ => curves.push(Curve {
                theta: c.theta,
                delta: c.delta,
                smoothing: c.smoothing,
                points: vec![(c.tau, c.median_test_map)],
            }),
        }
    }
    Ok(SweepSummary {
        best_cell,
        curves,
        cells,
    })
}

/// Writes one `tau,median_map` CSV per curve into `dir`; returns the paths.
pub fn write_curve_files(dir: &Path, summary: &SweepSummary) -> std::io::Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(summary.curves.len());
    for c in &summary.curves {
        let name = format!(
            "curve_theta_{}_delta_{}_{}.csv",
            c.theta,
            c.delta,
            if c.smoothing { "ls" } else { "nols" }
        );
        let mut out = String::from("tau,median_map\n");
        for (tau, map) in &c.points {
            out.push_str(&format!("{tau},{map}\n"));
        }
        let path = dir.join(name);
        fs::write(&path, out)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(tau: f64, theta: f64, seed: u64, val: f64) -> SweepRow {
        SweepRow {
            tau,
            theta,
            delta: 0.0,
            smoothing: true,
            seed,
            val_map: val,
            test_map: val - 1.0,
            pseudo_precision: None,
            pseudo_recall: None,
        }
    }

    #[test]
    fn grid_cardinality() {
        let spec = SweepSpec::default();
        assert_eq!(spec.grid().len(), 45);
        let single = SweepSpec {
            taus: vec![0.03],
            thetas: vec![0.3],
            repeats: 1,
            ..SweepSpec::default()
        };
        assert_eq!(single.grid().len(), 1);
        assert!(SweepSpec { thetas: vec![], ..SweepSpec::default() }.validate().is_err());
        assert!(SweepSpec { repeats: 0, ..SweepSpec::default() }.validate().is_err());
    }

    #[test]
    fn negative_cells_use_full_loss() {
        let spec = SweepSpec::default();
        let cell = SweepCell {
            tau: 0.03,
            theta: 0.3,
            delta: 20.0,
            smoothing: false,
            seed: 4,
        };
        let cfg = spec.train_config(&cell);
        assert_eq!(cfg.loss.variant, LossVariant::VlplFull);
        assert!(!cfg.loss.smoothing_enabled);
        assert_eq!(cfg.seed, 4);
        assert!(spec.pseudo_config(&cell).use_negatives);
    }

    #[test]
    fn singleton_and_argmax() {
        let one = SweepResult {
            rows: vec![row(0.03, 0.3, 0, 50.0)],
            failures: vec![],
        };
        assert_eq!(summarize(&one).unwrap().best_cell.tau, 0.03);
        let two = SweepResult {
            rows: vec![row(0.01, 0.3, 0, 50.0), row(0.05, 0.3, 0, 60.0)],
            failures: vec![],
        };
        assert_eq!(summarize(&two).unwrap().best_cell.tau, 0.05);
        assert!(matches!(summarize(&SweepResult::default()), Err(SweepError::EmptyResult)));
    }

    #[test]
    fn ties_prefer_smaller_tau_then_theta() {
        let rows = vec![
            row(0.05, 0.1, 0, 60.0),
            row(0.03, 0.3, 0, 60.0),
            row(0.03, 0.2, 0, 60.0),
        ];
        let best = summarize(&SweepResult { rows, failures: vec![] }).unwrap().best_cell;
        assert_eq!((best.tau, best.theta), (0.03, 0.2));
    }

    #[test]
    fn median_aggregation_and_curves() {
        let rows = vec![
            row(0.01, 0.1, 0, 10.0),
            row(0.01, 0.1, 1, 90.0),
            row(0.01, 0.1, 2, 20.0),
            row(0.03, 0.1, 0, 30.0),
            row(0.01, 0.2, 0, 40.0),
        ];
        let s = summarize(&SweepResult { rows, failures: vec![] }).unwrap();
        assert_eq!(s.curves.len(), 2);
        assert_eq!(s.curves[0].points, vec![(0.01, 19.0), (0.03, 29.0)]);
        assert_eq!(s.best_cell.theta, 0.2);
    }

    #[test]
    fn journal_line_round_trip() {
        let row = JournalRow {
            cell: SweepCell {
                tau: 0.07,
                theta: 0.1,
                delta: 30.0,
                smoothing: false,
                seed: 12,
            },
            status: CellStatus::Ok(CellMetrics {
                val_map: 81.25,
                test_map: 79.5,
                pseudo_precision: Some(0.75),
                pseudo_recall: None,
            }),
        };
        let text = format!("{JOURNAL_HEADER}\n{}", row.to_csv_line());
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let rec = rdr.records().next().unwrap().unwrap();
        assert_eq!(JournalRow::from_record(&rec).unwrap(), row);
    }
}
