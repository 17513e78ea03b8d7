//! Black-box classifier contract.
//!
//! A [`Scorer`] maps a batch of samples to per-class scores; a
//! [`PredictionRule`] turns one score vector into a label. The pair is
//! bundled as a [`ClassifierHandle`], which validates shapes going in and
//! scores coming out so that nothing downstream sees a malformed vector.

mod builtin;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::BridgeError;
use crate::series::{MultivariateSeries, Shape};

pub use builtin::{make_builtin, BuiltinSpec, IntervalRule};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("sample {index} has shape {got:?}, classifier expects {expected:?}")]
    ShapeMismatch {
        index: usize,
        expected: Shape,
        got: Shape,
    },
    #[error("model returned {got} score vectors for a batch of {expected}")]
    BatchLength { expected: usize, got: usize },
    #[error("model returned {got} scores for sample {index}, expected {expected}")]
    ScoreLength {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("model returned non-finite score {value} for sample {index}, class {class}")]
    NonFinite {
        index: usize,
        class: usize,
        value: f64,
    },
    #[error("model returned score {value} outside [0, 1] for sample {index}, class {class}")]
    OutOfRange {
        index: usize,
        class: usize,
        value: f64,
    },
    #[error("invalid classifier: {0}")]
    InvalidModel(String),
    #[error("invalid prediction rule: {0}")]
    InvalidRule(String),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
}

/// One score per class, finite and in `[0, 1]`. Entries need not sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Self {
        Self(scores)
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Maps a score vector to a single class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictionRule {
    /// Highest score, ties to the lowest index.
    Argmax,
    /// Largest margin `score - threshold` among non-background classes
    /// reaching their threshold; `background` when none does.
    Thresholded {
        thresholds: Vec<f64>,
        background: usize,
    },
}

impl PredictionRule {
    pub fn validate(&self, class_count: usize) -> Result<(), ScoreError> {
        match self {
            PredictionRule::Argmax => Ok(()),
            PredictionRule::Thresholded {
                thresholds,
                background,
            } => {
                if thresholds.len() != class_count {
                    return Err(ScoreError::InvalidRule(format!(
                        "{} thresholds for {class_count} classes",
                        thresholds.len()
                    )));
                }
                if *background >= class_count {
                    return Err(ScoreError::InvalidRule(format!(
                        "background class {background} out of range"
                    )));
                }
                if thresholds.iter().any(|t| !t.is_finite()) {
                    return Err(ScoreError::InvalidRule("non-finite threshold".into()));
                }
                Ok(())
            }
        }
    }

    pub fn apply(&self, scores: &ScoreVector) -> usize {
        match self {
            PredictionRule::Argmax => {
                let mut best = 0;
                for (c, &s) in scores.as_slice().iter().enumerate().skip(1) {
                    if s > scores.get(best) {
                        best = c;
                    }
                }
                best
            }
            PredictionRule::Thresholded {
                thresholds,
                background,
            } => {
                let mut best: Option<(usize, f64)> = None;
                for (c, (&s, &th)) in scores.as_slice().iter().zip(thresholds).enumerate() {
                    if c == *background || s < th {
                        continue;
                    }
                    let margin = s - th;
                    if best.is_none_or(|(_, m)| margin > m) {
                        best = Some((c, margin));
                    }
                }
                best.map(|(c, _)| c).unwrap_or(*background)
            }
        }
    }

    /// Threshold a target class must reach, if the rule implies one.
    pub fn target_threshold(&self, class: usize) -> Option<f64> {
        match self {
            PredictionRule::Thresholded {
                thresholds,
                background,
            } if class != *background => Some(thresholds[class]),
            _ => None,
        }
    }
}

/// Backend behind a [`ClassifierHandle`]: built-in models, the process
/// bridge, or anything a caller implements.
///
/// Implementations must be deterministic and return one vector per input,
/// in input order.
pub trait Scorer: Send + Sync {
    fn class_count(&self) -> usize;

    fn shape(&self) -> Shape;

    fn score_batch(&self, batch: &[MultivariateSeries]) -> Result<Vec<Vec<f64>>, ScoreError>;
}

/// Shared, thread-safe classifier: scorer plus prediction rule.
#[derive(Clone)]
pub struct ClassifierHandle {
    scorer: Arc<dyn Scorer>,
    rule: PredictionRule,
}

impl fmt::Debug for ClassifierHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClassifierHandle")
            .field("classes", &self.scorer.class_count())
            .field("shape", &self.scorer.shape())
            .field("rule", &self.rule)
            .finish()
    }
}

impl ClassifierHandle {
    pub fn new(scorer: Arc<dyn Scorer>, rule: PredictionRule) -> Result<Self, ScoreError> {
        rule.validate(scorer.class_count())?;
        Ok(Self { scorer, rule })
    }

    pub fn with_rule(self, rule: PredictionRule) -> Result<Self, ScoreError> {
        Self::new(self.scorer, rule)
    }

    pub fn rule(&self) -> &PredictionRule {
        &self.rule
    }

    pub fn class_count(&self) -> usize {
        self.scorer.class_count()
    }

    pub fn shape(&self) -> Shape {
        self.scorer.shape()
    }

    pub fn predict_scores(
        &self,
        batch: &[MultivariateSeries],
    ) -> Result<Vec<ScoreVector>, ScoreError> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let expected = self.shape();
        for (index, s) in batch.iter().enumerate() {
            if s.shape() != expected {
                return Err(ScoreError::ShapeMismatch {
                    index,
                    expected,
                    got: s.shape(),
                });
            }
        }
        let raw = self.scorer.score_batch(batch)?;
        if raw.len() != batch.len() {
            return Err(ScoreError::BatchLength {
                expected: batch.len(),
                got: raw.len(),
            });
        }
        let classes = self.class_count();
        raw.into_iter()
            .enumerate()
            .map(|(index, scores)| {
                if scores.len() != classes {
                    return Err(ScoreError::ScoreLength {
                        index,
                        expected: classes,
                        got: scores.len(),
                    });
                }
                for (class, &value) in scores.iter().enumerate() {
                    if !value.is_finite() {
                        return Err(ScoreError::NonFinite {
                            index,
                            class,
                            value,
                        });
                    }
                    if !(0.0..=1.0).contains(&value) {
                        return Err(ScoreError::OutOfRange {
                            index,
                            class,
                            value,
                        });
                    }
                }
                Ok(ScoreVector(scores))
            })
            .collect()
    }

    pub fn label_of(&self, scores: &ScoreVector) -> usize {
        self.rule.apply(scores)
    }

    pub fn predict_label(&self, sample: &MultivariateSeries) -> Result<usize, ScoreError> {
        let scores = self.predict_scores(std::slice::from_ref(sample))?;
        Ok(self.label_of(&scores[0]))
    }

    pub fn predict_labels(&self, batch: &[MultivariateSeries]) -> Result<Vec<usize>, ScoreError> {
        Ok(self
            .predict_scores(batch)?
            .iter()
            .map(|s| self.label_of(s))
            .collect())
    }
}
