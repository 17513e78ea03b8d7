//! A single multivariate sample: `V` named variables by `T` timesteps.

use serde::{Deserialize, Serialize};

use crate::data::DataError;

/// Number of variables and timesteps shared by every sample of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub variables: usize,
    pub timesteps: usize,
}

impl Shape {
    pub fn new(variables: usize, timesteps: usize) -> Self {
        Self {
            variables,
            timesteps,
        }
    }

    /// Length of the flattened vector.
    pub fn len(&self) -> usize {
        self.variables * self.timesteps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Variable-major matrix of finite values with named rows.
///
/// Immutable once constructed; every constructor validates the invariants
/// (rectangular, finite, unique names, `V >= 1`, `T >= 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateSeries {
    variables: Vec<String>,
    // row-major, variable after variable
    values: Vec<f64>,
    timesteps: usize,
    sample_rate_hz: Option<f64>,
}

impl MultivariateSeries {
    pub fn new(variables: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self, DataError> {
        if rows.len() != variables.len() {
            return Err(DataError::Shape(format!(
                "{} variable names for {} rows",
                variables.len(),
                rows.len()
            )));
        }
        let timesteps = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != timesteps) {
            return Err(DataError::Shape("rows have unequal lengths".into()));
        }
        let values = rows.into_iter().flatten().collect();
        Self::from_flat(variables, timesteps, values)
    }

    /// Build a sample from a flattened vector (inverse of [`flatten`](Self::flatten)).
    pub fn from_flat(
        variables: Vec<String>,
        timesteps: usize,
        values: Vec<f64>,
    ) -> Result<Self, DataError> {
        if variables.is_empty() || timesteps == 0 {
            return Err(DataError::Shape(
                "a sample needs at least one variable and one timestep".into(),
            ));
        }
        if values.len() != variables.len() * timesteps {
            return Err(DataError::Shape(format!(
                "expected {} values for {}x{}, got {}",
                variables.len() * timesteps,
                variables.len(),
                timesteps,
                values.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &variables {
            if !seen.insert(name.as_str()) {
                return Err(DataError::Shape(format!("duplicate variable name {name}")));
            }
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Shape(format!(
                "non-finite value at variable {} t={}",
                variables[pos / timesteps],
                pos % timesteps
            )));
        }
        Ok(Self {
            variables,
            values,
            timesteps,
            sample_rate_hz: None,
        })
    }

    /// Convenience constructor with generated names `v0..v{V-1}`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, DataError> {
        let names = (0..rows.len()).map(|i| format!("v{i}")).collect();
        Self::new(names, rows)
    }

    pub fn with_sample_rate(mut self, hz: f64) -> Result<Self, DataError> {
        if !(hz.is_finite() && hz > 0.0) {
            return Err(DataError::Shape(format!("invalid sample rate {hz}")));
        }
        self.sample_rate_hz = Some(hz);
        Ok(self)
    }

    pub fn sample_rate_hz(&self) -> Option<f64> {
        self.sample_rate_hz
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.variables.len(), self.timesteps)
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn num_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn row(&self, variable: usize) -> &[f64] {
        let start = variable * self.timesteps;
        &self.values[start..start + self.timesteps]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.timesteps)
    }

    /// Flattened view: rows concatenated in variable order.
    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    /// Copy with a closure applied to the raw storage; used to splice rows.
    pub(crate) fn map_values(&self, f: impl FnOnce(&mut [f64])) -> Self {
        let mut out = self.clone();
        f(&mut out.values);
        out
    }

    /// Mean of one variable over `[start, end)`.
    pub fn window_mean(&self, variable: usize, start: usize, end: usize) -> f64 {
        let row = &self.row(variable)[start..end];
        row.iter().sum::<f64>() / row.len() as f64
    }
}

/// Population standard deviation (divides by `N`).
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}
