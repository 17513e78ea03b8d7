//! Reference classifiers that need no external process.
//!
//! Encoded as JSON objects tagged by `kind`:
//!
//! ```json
//! {"kind":"nearest_centroid","centroids":[[...V*T...], ...]}
//! {"kind":"interval_rule","positive_class":1,
//!  "rules":[{"variable":2,"start":0,"end":32,"threshold":0.5,"gain":10}]}
//! {"kind":"linear_means","weights":[...V...],"bias":0.0}
//! ```

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ClassifierHandle, PredictionRule, ScoreError, Scorer};
use crate::par::{self, Execution};
use crate::series::{MultivariateSeries, Shape};

// batches at least this large are scored on the thread pool
const PARALLEL_BATCH: usize = 64;

/// `positive = logistic(gain * (mean(variable[start..end]) - threshold))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRule {
    pub variable: usize,
    pub start: usize,
    pub end: usize,
    pub threshold: f64,
    pub gain: f64,
}

impl IntervalRule {
    fn score(&self, sample: &MultivariateSeries) -> f64 {
        let mean = sample.window_mean(self.variable, self.start, self.end);
        logistic(self.gain * (mean - self.threshold))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BuiltinSpec {
    /// Softmax over negative Euclidean distances to per-class centroids of
    /// the flattened sample.
    NearestCentroid { centroids: Vec<Vec<f64>> },
    /// Binary; the positive class score is the minimum over a conjunction
    /// of interval rules, the other class gets the complement.
    IntervalRule {
        rules: Vec<IntervalRule>,
        #[serde(default = "default_positive")]
        positive_class: usize,
    },
    /// Binary; class 1 scores `logistic(bias + sum_v weight_v * mean_v)`.
    LinearMeans { weights: Vec<f64>, bias: f64 },
}

fn default_positive() -> usize {
    1
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Builtin {
    spec: BuiltinSpec,
    shape: Shape,
}

impl Builtin {
    fn score_one(&self, sample: &MultivariateSeries) -> Vec<f64> {
        match &self.spec {
            BuiltinSpec::NearestCentroid { centroids } => {
                let x = sample.as_flat();
                let d: Vec<f64> = centroids
                    .iter()
                    .map(|c| {
                        c.iter()
                            .zip(x)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect();
                let d_min = d.iter().copied().fold(f64::INFINITY, f64::min);
                let w: Vec<f64> = d.iter().map(|di| (d_min - di).exp()).collect();
                let z: f64 = w.iter().sum();
                w.into_iter().map(|wi| wi / z).collect()
            }
            BuiltinSpec::IntervalRule {
                rules,
                positive_class,
            } => {
                let pos = rules
                    .iter()
                    .map(|r| r.score(sample))
                    .fold(f64::INFINITY, f64::min);
                let mut out = vec![1.0 - pos; 2];
                out[*positive_class] = pos;
                out
            }
            BuiltinSpec::LinearMeans { weights, bias } => {
                let t = sample.timesteps();
                let z = bias
                    + weights
                        .iter()
                        .enumerate()
                        .map(|(v, w)| w * sample.window_mean(v, 0, t))
                        .sum::<f64>();
                let p = logistic(z);
                vec![1.0 - p, p]
            }
        }
    }
}

impl Scorer for Builtin {
    fn class_count(&self) -> usize {
        match &self.spec {
            BuiltinSpec::NearestCentroid { centroids } => centroids.len(),
            _ => 2,
        }
    }

    fn shape(&self) -> Shape {
        self.shape
    }

    fn score_batch(&self, batch: &[MultivariateSeries]) -> Result<Vec<Vec<f64>>, ScoreError> {
        let exec = if batch.len() >= PARALLEL_BATCH {
            Execution::default()
        } else {
            Execution::Sequential
        };
        Ok(par::map(exec, batch, |s| self.score_one(s)))
    }
}

impl BuiltinSpec {
    pub fn validate(&self, shape: Shape) -> Result<(), ScoreError> {
        let bad = |m: String| Err(ScoreError::InvalidModel(m));
        match self {
            BuiltinSpec::NearestCentroid { centroids } => {
                if centroids.len() < 2 {
                    return bad("nearest_centroid needs at least two centroids".into());
                }
                for (c, centroid) in centroids.iter().enumerate() {
                    if centroid.len() != shape.len() {
                        return bad(format!(
                            "centroid {c} has length {}, expected {}",
                            centroid.len(),
                            shape.len()
                        ));
                    }
                    if centroid.iter().any(|x| !x.is_finite()) {
                        return bad(format!("centroid {c} has a non-finite entry"));
                    }
                }
            }
            BuiltinSpec::IntervalRule {
                rules,
                positive_class,
            } => {
                if rules.is_empty() {
                    return bad("interval_rule needs at least one rule".into());
                }
                if *positive_class > 1 {
                    return bad(format!("positive_class {positive_class} must be 0 or 1"));
                }
                for (i, r) in rules.iter().enumerate() {
                    if r.variable >= shape.variables {
                        return bad(format!("rule {i}: variable {} out of range", r.variable));
                    }
                    if r.start >= r.end || r.end > shape.timesteps {
                        return bad(format!(
                            "rule {i}: window [{}, {}) out of range for {} timesteps",
                            r.start, r.end, shape.timesteps
                        ));
                    }
                    if !(r.threshold.is_finite() && r.gain.is_finite()) {
                        return bad(format!("rule {i}: non-finite parameter"));
                    }
                }
            }
            BuiltinSpec::LinearMeans { weights, bias } => {
                if weights.len() != shape.variables {
                    return bad(format!(
                        "{} weights for {} variables",
                        weights.len(),
                        shape.variables
                    ));
                }
                if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
                    return bad("non-finite weight or bias".into());
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ScoreError> {
        serde_json::from_str(text).map_err(|e| ScoreError::InvalidModel(e.to_string()))
    }
}

/// Build an argmax [`ClassifierHandle`] for a built-in model over samples of `shape`.
pub fn make_builtin(spec: BuiltinSpec, shape: Shape) -> Result<ClassifierHandle, ScoreError> {
    spec.validate(shape)?;
    ClassifierHandle::new(Arc::new(Builtin { spec, shape }), PredictionRule::Argmax)
}
