//! Average precision and mean average precision.
//!
//! AP is the mean of precision@k over the ranks k that hold a positive, with
//! scores sorted descending and ties broken by sample index. The sum is
//! accumulated as an exact rational and rounded to `f64` once, so the result
//! does not depend on summation order.

use std::fs;
use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no positive labels")]
    NoPositives,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no class has a positive label")]
    NoEvaluableClass,
}

/// Sample indices sorted by descending score, ties by ascending index.
pub fn ranking<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

pub fn average_precision_exact<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<BigRational, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} scores, {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut hits = 0u64;
    let mut sum = BigRational::zero();
    for (k, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += BigRational::new(BigInt::from(hits), BigInt::from(k as u64 + 1));
        }
    }
    Ok(sum / BigRational::from_integer(BigInt::from(n_pos)))
}

pub fn average_precision<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<f64, MetricsError> {
    let ap = average_precision_exact(scores, labels)?;
    Ok(ap.to_f64().expect("AP lies in [0, 1]"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `None` for classes without positives.
    pub per_class_ap: Vec<Option<f64>>,
    /// Mean over evaluable classes, in [0, 1].
    pub map: f64,
    pub n_samples: usize,
    pub excluded_classes: Vec<usize>,
}

impl EvalReport {
    /// mAP on the 0–100 scale, rounded to two decimals.
    pub fn map_pct(&self) -> f64 {
        to_pct(self.map)
    }
}

pub fn to_pct(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

/// `scores` and `labels` are row-major `n_samples x n_labels`.
pub fn mean_average_precision<T: Scalar>(
    scores: &[T],
    labels: &[bool],
    n_labels: usize,
) -> Result<EvalReport, MetricsError> {
    if scores.len() != labels.len() || n_labels == 0 || scores.len() % n_labels != 0 {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} scores, {} labels, {n_labels} classes",
            scores.len(),
            labels.len()
        )));
    }
    let n = scores.len() / n_labels;
    let per_class_ap: Vec<Option<f64>> = (0..n_labels)
        .into_par_iter()
        .map(|c| {
            let col_scores: Vec<T> = (0..n).map(|i| scores[i * n_labels + c]).collect();
            let col_labels: Vec<bool> = (0..n).map(|i| labels[i * n_labels + c]).collect();
            match average_precision(&col_scores, &col_labels) {
                Ok(ap) => Some(ap),
                Err(_) => None,
            }
        })
        .collect();
    let excluded_classes: Vec<usize> = per_class_ap
        .iter()
        .enumerate()
        .filter(|(_, ap)| ap.is_none())
        .map(|(c, _)| c)
        .collect();
    let evaluable: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    if evaluable.is_empty() {
        return Err(MetricsError::NoEvaluableClass);
    }
    let map = evaluable.iter().sum::<f64>() / evaluable.len() as f64;
    Ok(EvalReport {
        per_class_ap,
        map,
        n_samples: n,
        excluded_classes,
    })
}

/// On-disk report; AP and mAP values on the 0–100 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub excluded_classes: Vec<usize>,
    pub n_samples: usize,
}

impl From<&EvalReport> for ReportFile {
    fn from(r: &EvalReport) -> Self {
        Self {
            map: r.map_pct(),
            per_class_ap: r.per_class_ap.iter().map(|ap| ap.map(to_pct)).collect(),
            excluded_classes: r.excluded_classes.clone(),
            n_samples: r.n_samples,
        }
    }
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> std::io::Result<()> {
    let json = serde_json::to_vec_pretty(&ReportFile::from(report))?;
    fs::write(path, json)
}

pub fn write_report_csv(path: &Path, report: &EvalReport, class_names: &[String]) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["class_name", "ap"])?;
    for (c, ap) in report.per_class_ap.iter().enumerate() {
        let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
        let ap = ap.map(|v| format!("{:.2}", to_pct(v))).unwrap_or_default();
        w.write_record([name, ap])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking() {
        let ap = average_precision(&[0.9f64, 0.8, 0.1, 0.0], &[true, true, false, false]).unwrap();
        assert_eq!(ap, 1.0);
        assert_eq!(average_precision(&[0.3f64], &[true]).unwrap(), 1.0);
    }

    #[test]
    fn hand_example_is_seven_twelfths() {
        let exact = average_precision_exact(&[0.9f64, 0.8, 0.7], &[false, true, true]).unwrap();
        assert_eq!(exact, BigRational::new(7.into(), 12.into()));
        assert_eq!(average_precision(&[0.9f64, 0.8, 0.7], &[false, true, true]).unwrap(), 7.0 / 12.0);
    }

    #[test]
    fn ties_break_by_index() {
        // negative at index 0 ties with the positive at index 1 and wins
        let ap = average_precision(&[0.5f32, 0.5], &[false, true]).unwrap();
        assert_eq!(ap, 0.5);
        let ap = average_precision(&[0.5f32, 0.5], &[true, false]).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn no_positives() {
        assert_eq!(average_precision(&[0.1f64], &[false]), Err(MetricsError::NoPositives));
    }

    #[test]
    fn map_of_two_classes() {
        // class 0 perfect, class 1 AP 0.5
        let scores = [0.9f64, 0.8, 0.1, 0.2];
        let labels = [true, false, false, true];
        let r = mean_average_precision(&scores, &labels, 2).unwrap();
        assert_eq!(r.per_class_ap, vec![Some(1.0), Some(0.5)]);
        assert_eq!(r.map, 0.75);
        assert_eq!(r.map_pct(), 75.0);
    }

    #[test]
    fn excluded_classes_reported() {
        let scores = [0.9f64, 0.2, 0.1, 0.8];
        let labels = [true, false, false, false];
        let r = mean_average_precision(&scores, &labels, 2).unwrap();
        assert_eq!(r.excluded_classes, vec![1]);
        assert_eq!(r.map, 1.0);
        assert_eq!(
            mean_average_precision(&scores, &[false; 4], 2),
            Err(MetricsError::NoEvaluableClass)
        );
        assert!(mean_average_precision(&scores, &labels, 3).is_err());
    }

    #[test]
    fn oracle_scores_give_full_map() {
        let labels = [true, false, true, true, false, false];
        let scores: Vec<f64> = labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
        assert_eq!(mean_average_precision(&scores, &labels, 3).unwrap().map, 1.0);
    }
}
