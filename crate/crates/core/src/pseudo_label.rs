//! Vision-language pseudo-labels.
//!
//! Image/label similarities go through a temperature softmax across labels.
//! Labels whose probability exceeds `theta` become pseudo-positives; if
//! negatives are enabled, the `floor(delta_pct * L / 100)` least similar
//! labels that are not already pseudo-positive become pseudo-negatives.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding_store::EmbeddingMatrix;
use crate::scalar::{dot, Scalar};
use crate::spml_dataset::{AnnotationMatrix, LabelState};

#[derive(Debug, Error, PartialEq)]
pub enum PseudoLabelError {
    #[error("dimension mismatch: image dim {image}, label dim {label}")]
    DimensionMismatch { image: usize, label: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("conflicting shape: {0}")]
    ConflictingShape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoLabelConfig {
    pub tau: f64,
    pub theta: f64,
    pub delta_pct: f64,
    #[serde(default)]
    pub use_negatives: bool,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self::voc()
    }
}

impl PseudoLabelConfig {
    pub const fn voc() -> Self {
        Self::preset(0.03, 0.3)
    }

    pub const fn coco() -> Self {
        Self::preset(0.01, 0.3)
    }

    pub const fn nus_wide() -> Self {
        Self::preset(0.03, 0.1)
    }

    pub const fn cub() -> Self {
        Self::preset(0.03, 0.01)
    }

    const fn preset(tau: f64, theta: f64) -> Self {
        Self {
            tau,
            theta,
            delta_pct: 0.0,
            use_negatives: false,
        }
    }

    pub fn validate(&self) -> Result<(), PseudoLabelError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(PseudoLabelError::NonPositiveTemperature(self.tau));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(PseudoLabelError::InvalidConfig(format!("theta {} not in (0,1)", self.theta)));
        }
        if !(self.delta_pct >= 0.0 && self.delta_pct < 100.0) {
            return Err(PseudoLabelError::InvalidConfig(format!(
                "delta_pct {} not in [0,100)",
                self.delta_pct
            )));
        }
        Ok(())
    }

    /// Number of pseudo-negative slots for `n_labels` labels.
    pub fn negative_budget(&self, n_labels: usize) -> usize {
        if !self.use_negatives {
            return 0;
        }
        (self.delta_pct * n_labels as f64 / 100.0).floor() as usize
    }
}

/// Temperature softmax over raw dot products, with max subtraction.
pub fn softmax_from_dots<T: Scalar>(dots: &[T], tau: f64) -> Result<Vec<T>, PseudoLabelError> {
    if !(tau > 0.0) {
        return Err(PseudoLabelError::NonPositiveTemperature(tau));
    }
    let tau = T::lit(tau);
    let max = dots.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = dots.iter().map(|&d| ((d - max) / tau).exp()).collect();
    let total: T = out.iter().copied().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// Probability of each label appearing in the image, from unit-norm embeddings.
pub fn similarity_probs<T: Scalar>(
    image: &[T],
    labels: &EmbeddingMatrix<T>,
    tau: f64,
) -> Result<Vec<T>, PseudoLabelError> {
    if image.len() != labels.dim() {
        return Err(PseudoLabelError::DimensionMismatch {
            image: image.len(),
            label: labels.dim(),
        });
    }
    let dots: Vec<T> = labels.iter_rows().map(|l| dot(image, l)).collect();
    softmax_from_dots(&dots, tau)
}

pub fn assign_pseudo_labels<T: Scalar>(probs: &[T], cfg: &PseudoLabelConfig) -> Vec<LabelState> {
    let theta = T::lit(cfg.theta);
    let mut states: Vec<LabelState> = probs
        .iter()
        .map(|&p| {
            if p > theta {
                LabelState::PseudoPositive
            } else {
                LabelState::Unknown
            }
        })
        .collect();

    let budget = cfg.negative_budget(probs.len());
    if budget > 0 {
        let mut pool: Vec<usize> = (0..probs.len())
            .filter(|&i| states[i] != LabelState::PseudoPositive)
            .collect();
        // stable sort keeps lower indices first among ties
        pool.sort_by(|&a, &b| probs[a].partial_cmp(&probs[b]).expect("finite probabilities"));
        for &i in pool.iter().take(budget) {
            states[i] = LabelState::PseudoNegative;
        }
    }
    states
}

/// Observed positives take precedence; every other slot takes the pseudo state.
pub fn merge_with_observed(
    observed: &[LabelState],
    pseudo: &[LabelState],
) -> Result<Vec<LabelState>, PseudoLabelError> {
    if observed.len() != pseudo.len() {
        return Err(PseudoLabelError::ConflictingShape(format!(
            "observed has {} labels, pseudo has {}",
            observed.len(),
            pseudo.len()
        )));
    }
    Ok(observed
        .iter()
        .zip(pseudo)
        .map(|(&o, &p)| if o == LabelState::ObservedPositive { o } else { p })
        .collect())
}

/// Pseudo-labels for every image row, merged with `observed`.
/// Returns the merged matrix and the per-row probabilities.
pub fn pseudo_label_dataset<T: Scalar>(
    images: &EmbeddingMatrix<T>,
    labels: &EmbeddingMatrix<T>,
    observed: &AnnotationMatrix,
    cfg: &PseudoLabelConfig,
) -> Result<(AnnotationMatrix, Vec<Vec<T>>), PseudoLabelError> {
    cfg.validate()?;
    if images.rows() != observed.n_samples() || labels.rows() != observed.n_labels() {
        return Err(PseudoLabelError::ConflictingShape(format!(
            "{} images x {} labels vs annotations {}x{}",
            images.rows(),
            labels.rows(),
            observed.n_samples(),
            observed.n_labels()
        )));
    }
    let per_row: Vec<(Vec<LabelState>, Vec<T>)> = (0..images.rows())
        .into_par_iter()
        .map(|i| {
            let probs = similarity_probs(images.row(i), labels, cfg.tau)?;
            let pseudo = assign_pseudo_labels(&probs, cfg);
            Ok((merge_with_observed(observed.row(i), &pseudo)?, probs))
        })
        .collect::<Result<_, PseudoLabelError>>()?;

    let mut states = Vec::with_capacity(observed.states().len());
    let mut probs = Vec::with_capacity(per_row.len());
    for (row, p) in per_row {
        states.extend(row);
        probs.push(p);
    }
    let merged = AnnotationMatrix::new(observed.n_samples(), observed.n_labels(), states)
        .map_err(|e| PseudoLabelError::ConflictingShape(e.to_string()))?;
    Ok((merged, probs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PseudoLabelQuality {
    pub n_pseudo_positive: usize,
    pub n_pseudo_negative: usize,
    /// Fraction of pseudo-positives that are true positives; 1.0 when none were assigned.
    pub precision: f64,
    /// Fraction of unobserved true positives recovered; 1.0 when there is nothing to recover.
    pub recall: f64,
    /// Fraction of pseudo-negatives that are truly positive; 0.0 when none were assigned.
    pub negative_false_rate: f64,
}

pub fn pseudo_label_quality(
    merged: &AnnotationMatrix,
    ground_truth: &AnnotationMatrix,
) -> Result<PseudoLabelQuality, PseudoLabelError> {
    if merged.n_samples() != ground_truth.n_samples() || merged.n_labels() != ground_truth.n_labels() {
        return Err(PseudoLabelError::ConflictingShape(format!(
            "{}x{} vs {}x{}",
            merged.n_samples(),
            merged.n_labels(),
            ground_truth.n_samples(),
            ground_truth.n_labels()
        )));
    }
    let (mut pp, mut pp_hit, mut pn, mut pn_hit, mut hidden) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (&m, &g) in merged.states().iter().zip(ground_truth.states()) {
        let truly = g.is_positive();
        match m {
            LabelState::PseudoPositive => {
                pp += 1;
                pp_hit += truly as usize;
            }
            LabelState::PseudoNegative => {
                pn += 1;
                pn_hit += truly as usize;
            }
            _ => {}
        }
        if truly && m != LabelState::ObservedPositive {
            hidden += 1;
        }
    }
    let ratio = |num: usize, den: usize, empty: f64| if den == 0 { empty } else { num as f64 / den as f64 };
    Ok(PseudoLabelQuality {
        n_pseudo_positive: pp,
        n_pseudo_negative: pn,
        precision: ratio(pp_hit, pp, 1.0),
        recall: ratio(pp_hit, hidden, 1.0),
        negative_false_rate: ratio(pn_hit, pn, 0.0),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub id: String,
    pub pseudo_positives: Vec<usize>,
    pub pseudo_negatives: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
}

/// Writes one JSON line per row with pseudo-positive/negative indices.
pub fn write_pseudo_labels<T: Scalar>(
    path: &Path,
    ids: &[String],
    merged: &AnnotationMatrix,
    probs: Option<&[Vec<T>]>,
) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, id) in ids.iter().enumerate() {
        let row = merged.row(i);
        let pick = |state| {
            row.iter()
                .enumerate()
                .filter(|(_, s)| **s == state)
                .map(|(l, _)| l)
                .collect()
        };
        let rec = PseudoLabelRecord {
            id: id.clone(),
            pseudo_positives: pick(LabelState::PseudoPositive),
            pseudo_negatives: pick(LabelState::PseudoNegative),
            probs: probs.map(|p| p[i].iter().map(|v| v.as_f64()).collect()),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use LabelState::*;

    #[test]
    fn uniform_dots_give_uniform_probs() {
        let p = softmax_from_dots(&[0.3f64; 7], 0.03).unwrap();
        for v in p {
            assert!((v - 1.0 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_way_sharp_softmax() {
        let p = softmax_from_dots(&[1.0f64, 0.0], 0.03).unwrap();
        let expected = 1.0 / (1.0 + (-1.0f64 / 0.03).exp());
        assert!((p[0] - expected).abs() < 1e-12);
        assert!((p[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn high_temperature_flattens() {
        let p = softmax_from_dots(&[0.9f64, 0.1, -0.4, 0.0], 1e6).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-5));
    }

    #[test]
    fn non_positive_temperature() {
        assert_eq!(
            softmax_from_dots(&[0.0f64], 0.0),
            Err(PseudoLabelError::NonPositiveTemperature(0.0))
        );
    }

    #[test]
    fn hand_worked_assignment() {
        let cfg = PseudoLabelConfig {
            tau: 0.03,
            theta: 0.3,
            delta_pct: 25.0,
            use_negatives: true,
        };
        let states = assign_pseudo_labels(&[0.5f64, 0.3, 0.15, 0.05], &cfg);
        assert_eq!(states, vec![PseudoPositive, Unknown, Unknown, PseudoNegative]);
    }

    #[test]
    fn threshold_above_max_and_empty_budget() {
        let cfg = PseudoLabelConfig {
            tau: 0.03,
            theta: 0.999,
            delta_pct: 0.0,
            use_negatives: true,
        };
        let states = assign_pseudo_labels(&[0.6f64, 0.3, 0.1], &cfg);
        assert!(states.iter().all(|s| *s == Unknown));
    }

    #[test]
    fn negatives_respect_disabled_flag() {
        let cfg = PseudoLabelConfig {
            delta_pct: 50.0,
            ..PseudoLabelConfig::voc()
        };
        assert_eq!(cfg.negative_budget(20), 0);
        let on = PseudoLabelConfig { use_negatives: true, ..cfg };
        assert_eq!(on.negative_budget(20), 10);
        assert_eq!(PseudoLabelConfig { delta_pct: 12.5, ..on }.negative_budget(20), 2);
    }

    #[test]
    fn merge_precedence() {
        let observed = [Unknown, Unknown, ObservedPositive];
        let pseudo = [PseudoPositive, Unknown, PseudoNegative];
        assert_eq!(
            merge_with_observed(&observed, &pseudo).unwrap(),
            vec![PseudoPositive, Unknown, ObservedPositive]
        );
        assert_eq!(
            merge_with_observed(&observed, &[Unknown; 3]).unwrap(),
            observed.to_vec()
        );
        assert_eq!(
            merge_with_observed(&[ObservedPositive, Unknown], &[PseudoPositive, Unknown]).unwrap()[0],
            ObservedPositive
        );
        assert!(merge_with_observed(&observed, &[Unknown]).is_err());
    }

    #[test]
    fn quality_conventions() {
        let gt = AnnotationMatrix::from_positive_lists(3, &[vec![0, 1]]).unwrap();
        let none = AnnotationMatrix::new(1, 3, vec![ObservedPositive, Unknown, Unknown]).unwrap();
        let q = pseudo_label_quality(&none, &gt).unwrap();
        assert_eq!((q.precision, q.recall), (1.0, 0.0));

        let good = AnnotationMatrix::new(1, 3, vec![ObservedPositive, PseudoPositive, PseudoNegative]).unwrap();
        let q = pseudo_label_quality(&good, &gt).unwrap();
        assert_eq!((q.precision, q.recall, q.negative_false_rate), (1.0, 1.0, 0.0));

        let bad = AnnotationMatrix::filled(2, 3, Unknown);
        assert!(pseudo_label_quality(&bad, &gt).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PseudoLabelConfig::cub().validate().is_ok());
        assert!(PseudoLabelConfig { theta: 1.0, ..Default::default() }.validate().is_err());
        assert!(PseudoLabelConfig { delta_pct: 100.0, ..Default::default() }.validate().is_err());
        assert!(PseudoLabelConfig { tau: -1.0, ..Default::default() }.validate().is_err());
    }
}
