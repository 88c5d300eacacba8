//! Per-sample multi-label losses over pre-sigmoid scores.
//!
//! Every loss is a mean over the `L` labels of a per-label term chosen by the
//! label's state:
//!
//! | state            | AN          | EM        | VLPL                          |
//! |------------------|-------------|-----------|-------------------------------|
//! | ObservedPositive | `-log f`    | `-log f`  | `-log f`                      |
//! | Unknown          | `-log(1-f)` | `-a H(f)` | `-a H(f)`                     |
//! | PseudoPositive   | `-log(1-f)` | error     | `b S(f; rho)`                 |
//! | PseudoNegative   | `-log(1-f)` | error     | `g S(f; 1-rho)` (full only)   |
//!
//! where `S(f; t) = -[t log f + (1-t) log(1-f)]` is cross-entropy toward the
//! soft target `t` and `H` is binary entropy. The positive-only variant
//! treats pseudo-negatives as unknown.
//!
//! Values use probabilities clamped to `[1e-7, 1 - 1e-7]`; gradients are the
//! exact derivatives of the unclamped terms, which coincide with the clamped
//! ones wherever the clamp is inactive.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::spml_dataset::LabelState;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("non-finite score at label {0}")]
    NonFiniteScore(usize),
    #[error("label state {state:?} at index {index} is not valid for {variant:?}")]
    UnexpectedState {
        state: LabelState,
        index: usize,
        variant: LossVariant,
    },
    #[error("{scores} scores for {labels} labels")]
    ShapeMismatch { scores: usize, labels: usize },
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    AssumeNegative,
    EntropyMax,
    VlplFull,
    VlplPositiveOnly,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::AssumeNegative,
        LossVariant::EntropyMax,
        LossVariant::VlplFull,
        LossVariant::VlplPositiveOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::AssumeNegative => "assume_negative",
            LossVariant::EntropyMax => "entropy_max",
            LossVariant::VlplFull => "vlpl_full",
            LossVariant::VlplPositiveOnly => "vlpl_positive_only",
        }
    }
}

impl std::str::FromStr for LossVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown loss variant {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Weight of the entropy term on unknown labels.
    pub alpha: f64,
    /// Weight of the pseudo-positive term.
    pub beta: f64,
    /// Weight of the pseudo-negative term.
    pub gamma: f64,
    /// Soft target for pseudo-positives when smoothing is enabled.
    pub rho: f64,
    pub smoothing_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::VlplPositiveOnly,
            alpha: 0.2,
            beta: 1.0,
            gamma: 1.0,
            rho: 0.9,
            smoothing_enabled: true,
        }
    }
}

impl LossConfig {
    pub fn with_variant(variant: LossVariant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::InvalidConfig(format!("{name} = {v}")));
            }
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(LossError::InvalidConfig(format!("rho = {} not in (0,1]", self.rho)));
        }
        Ok(())
    }

    /// Pseudo-positive target actually used; `1` with smoothing off.
    pub fn effective_rho(&self) -> f64 {
        if self.smoothing_enabled {
            self.rho
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult<T> {
    pub value: T,
    /// d value / d score, one entry per label.
    pub grad_scores: Vec<T>,
}

/// Overflow-safe logistic function.
#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn clamp_prob<T: Scalar>(f: T) -> T {
    let eps = T::lit(PROB_CLAMP);
    f.max(eps).min(T::one() - eps)
}

/// Clamped per-label probabilities.
pub fn sigmoid_probs<T: Scalar>(scores: &[T]) -> Result<Vec<T>, LossError> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            if z.is_finite() {
                Ok(clamp_prob(sigmoid(z)))
            } else {
                Err(LossError::NonFiniteScore(i))
            }
        })
        .collect()
}

/// Binary entropy of a clamped probability.
#[inline]
pub fn entropy_term<T: Scalar>(f: T) -> T {
    -(f * f.ln() + (T::one() - f) * (T::one() - f).ln())
}

/// Cross-entropy toward soft target `rho`; minimized at `f = rho`.
#[inline]
pub fn smoothed_pseudo_term<T: Scalar>(f: T, rho: T) -> T {
    -(rho * f.ln() + (T::one() - rho) * (T::one() - f).ln())
}

#[derive(Debug, Clone, Copy)]
enum Term<T> {
    Positive,
    Negative,
    /// `-weight * H(f)`
    Entropy(T),
    /// `weight * S(f; target)`
    Soft { weight: T, target: T },
}

impl<T: Scalar> Term<T> {
    /// (value, d value / d z) for clamped probability `f`, raw probability `s`, score `z`.
    #[inline]
    fn eval(self, f: T, s: T, z: T) -> (T, T) {
        match self {
            Term::Positive => (-f.ln(), s - T::one()),
            Term::Negative => (-(T::one() - f).ln(), s),
            // dH/dz = -z s (1 - s), since log((1-s)/s) = -z
            Term::Entropy(w) => (-w * entropy_term(f), w * z * s * (T::one() - s)),
            Term::Soft { weight, target } => (weight * smoothed_pseudo_term(f, target), weight * (s - target)),
        }
    }
}

fn accumulate<T: Scalar>(
    scores: &[T],
    row: &[LabelState],
    mut term_for: impl FnMut(usize, LabelState) -> Result<Term<T>, LossError>,
) -> Result<LossResult<T>, LossError> {
    if scores.len() != row.len() {
        return Err(LossError::ShapeMismatch {
            scores: scores.len(),
            labels: row.len(),
        });
    }
    let inv_l = T::one() / T::from_usize(row.len().max(1)).unwrap();
    let mut value = T::zero();
    let mut grad_scores = Vec::with_capacity(row.len());
    for (i, (&z, &state)) in scores.iter().zip(row).enumerate() {
        if !z.is_finite() {
            return Err(LossError::NonFiniteScore(i));
        }
        let s = sigmoid(z);
        let (v, g) = term_for(i, state)?.eval(clamp_prob(s), s, z);
        value += v;
        grad_scores.push(g * inv_l);
    }
    Ok(LossResult {
        value: value * inv_l,
        grad_scores,
    })
}

/// Every label that is not an observed positive is treated as negative.
pub fn assume_negative_loss<T: Scalar>(scores: &[T], row: &[LabelState]) -> Result<LossResult<T>, LossError> {
    accumulate(scores, row, |_, state| {
        Ok(if state == LabelState::ObservedPositive {
            Term::Positive
        } else {
            Term::Negative
        })
    })
}

pub fn em_loss<T: Scalar>(scores: &[T], row: &[LabelState], alpha: f64) -> Result<LossResult<T>, LossError> {
    let alpha = T::lit(alpha);
    accumulate(scores, row, |index, state| match state {
        LabelState::ObservedPositive => Ok(Term::Positive),
        LabelState::Unknown => Ok(Term::Entropy(alpha)),
        state => Err(LossError::UnexpectedState {
            state,
            index,
            variant: LossVariant::EntropyMax,
        }),
    })
}

/// Pseudo-label loss on a merged row; `cfg.variant` picks full or positive-only.
pub fn vlpl_loss<T: Scalar>(scores: &[T], row: &[LabelState], cfg: &LossConfig) -> Result<LossResult<T>, LossError> {
    let variant = cfg.variant;
    let alpha = T::lit(cfg.alpha);
    let rho = T::lit(cfg.effective_rho());
    let positive = Term::Soft {
        weight: T::lit(cfg.beta),
        target: rho,
    };
    let negative = Term::Soft {
        weight: T::lit(cfg.gamma),
        target: T::one() - rho,
    };
    accumulate(scores, row, |index, state| match (state, variant) {
        (LabelState::ObservedPositive, _) => Ok(Term::Positive),
        (LabelState::Unknown, _) => Ok(Term::Entropy(alpha)),
        (LabelState::PseudoPositive, _) => Ok(positive),
        (LabelState::PseudoNegative, LossVariant::VlplFull) => Ok(negative),
        (LabelState::PseudoNegative, LossVariant::VlplPositiveOnly) => Ok(Term::Entropy(alpha)),
        (state, variant) => Err(LossError::UnexpectedState { state, index, variant }),
    })
}

/// Dispatches on `cfg.variant`.
pub fn compute_loss<T: Scalar>(scores: &[T], row: &[LabelState], cfg: &LossConfig) -> Result<LossResult<T>, LossError> {
    match cfg.variant {
        LossVariant::AssumeNegative => assume_negative_loss(scores, row),
        LossVariant::EntropyMax => em_loss(scores, row, cfg.alpha),
        LossVariant::VlplFull | LossVariant::VlplPositiveOnly => vlpl_loss(scores, row, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use LabelState::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn sigmoid_basics() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid_probs(&[40.0f64]).unwrap()[0], 1.0 - 1e-7);
        assert_eq!(sigmoid_probs(&[-800.0f64]).unwrap()[0], 1e-7);
        for z in [-3.7f64, -0.2, 0.9, 12.0] {
            assert!((sigmoid(z) + sigmoid(-z) - 1.0).abs() < 1e-12);
        }
        assert_eq!(sigmoid_probs(&[0.0, f64::NAN]), Err(LossError::NonFiniteScore(1)));
    }

    #[test]
    fn entropy_values() {
        assert!((entropy_term(0.5f64) - LN2).abs() < 1e-12);
        let f = 1.0 - 1e-7;
        let expected = -(f * f64::ln(f) + 1e-7 * f64::ln(1e-7));
        assert!((entropy_term(f) - expected).abs() < 1e-15);
        assert!((entropy_term(f) - 1.71e-6).abs() < 0.01e-6);
        for f in [0.1f64, 0.33, 0.77] {
            assert!((entropy_term(f) - entropy_term(1.0 - f)).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothed_term_reductions() {
        assert!((smoothed_pseudo_term(0.5f64, 1.0) - LN2).abs() < 1e-12);
        assert!((smoothed_pseudo_term(0.5f64, 0.5) - entropy_term(0.5)).abs() < 1e-12);
        for f in [0.2f64, 0.6, 0.95] {
            assert_eq!(smoothed_pseudo_term(f, 1.0), -f.ln());
        }
    }

    #[test]
    fn assume_negative_examples() {
        let r = assume_negative_loss(&[40.0f64], &[ObservedPositive]).unwrap();
        assert!((r.value - 1e-7).abs() < 1e-12);
        let r = assume_negative_loss(&[0.0f64, 0.0], &[ObservedPositive, Unknown]).unwrap();
        assert!((r.value - LN2).abs() < 1e-12);
    }

    #[test]
    fn em_examples() {
        let r = em_loss(&[0.0f64; 5], &[Unknown; 5], 1.0).unwrap();
        assert!((r.value + LN2).abs() < 1e-12);
        assert!(r.grad_scores.iter().all(|&g| g == 0.0));

        let r = em_loss(&[40.0f64, 0.0, 0.0], &[ObservedPositive, Unknown, Unknown], 0.0).unwrap();
        assert!(r.value.abs() < 1e-7);

        assert!(matches!(
            em_loss(&[0.0f64, 0.0], &[ObservedPositive, TrueNegative], 1.0),
            Err(LossError::UnexpectedState { index: 1, .. })
        ));
        assert!(matches!(
            em_loss(&[0.0f64, 0.0], &[ObservedPositive, PseudoPositive], 1.0),
            Err(LossError::UnexpectedState { .. })
        ));
    }

    #[test]
    fn vlpl_hand_example() {
        let z = (0.9f64 / 0.1).ln();
        let cfg = LossConfig {
            beta: 1.0,
            rho: 0.9,
            ..LossConfig::default()
        };
        let r = vlpl_loss(&[z, z], &[ObservedPositive, PseudoPositive], &cfg).unwrap();
        let expected = (-(0.9f64.ln()) + (-0.9 * 0.9f64.ln() - 0.1 * 0.1f64.ln())) / 2.0;
        assert!((r.value - expected).abs() < 1e-12);
        // the smoothed term is stationary at f = rho
        assert!(r.grad_scores[1].abs() < 1e-12);
    }

    #[test]
    fn vlpl_without_pseudo_states_is_em() {
        let scores = [0.3f64, -1.2, 2.0, 0.0];
        let row = [Unknown, ObservedPositive, Unknown, Unknown];
        for variant in [LossVariant::VlplFull, LossVariant::VlplPositiveOnly] {
            let cfg = LossConfig {
                variant,
                alpha: 0.7,
                ..LossConfig::default()
            };
            assert_eq!(vlpl_loss(&scores, &row, &cfg).unwrap(), em_loss(&scores, &row, 0.7).unwrap());
        }
    }

    #[test]
    fn positive_only_treats_pseudo_negative_as_unknown() {
        let scores = [0.3f64, -1.2, 2.0];
        let cfg = LossConfig::default();
        let a = vlpl_loss(&scores, &[ObservedPositive, PseudoNegative, Unknown], &cfg).unwrap();
        let b = vlpl_loss(&scores, &[ObservedPositive, Unknown, Unknown], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn smoothing_disabled_uses_hard_targets() {
        let scores = [0.4f64, -0.3];
        let row = [PseudoPositive, PseudoNegative];
        let off = LossConfig {
            variant: LossVariant::VlplFull,
            smoothing_enabled: false,
            ..LossConfig::default()
        };
        let hard = LossConfig {
            rho: 1.0,
            smoothing_enabled: true,
            ..off
        };
        assert_eq!(vlpl_loss(&scores, &row, &off).unwrap(), vlpl_loss(&scores, &row, &hard).unwrap());
    }

    #[test]
    fn shape_and_config_errors() {
        assert!(matches!(
            assume_negative_loss(&[0.0f64], &[Unknown, Unknown]),
            Err(LossError::ShapeMismatch { .. })
        ));
        assert!(LossConfig { rho: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { alpha: -1.0, ..Default::default() }.validate().is_err());
        assert_eq!("vlpl_full".parse::<LossVariant>(), Ok(LossVariant::VlplFull));
    }
}
