//! Fixed per-component affine maps between physical and normalized scales.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Min-max scaling layer.
///
/// `normalize` maps `[min, max]` onto `[0, 1]` componentwise; `denormalize`
/// is its inverse. A degenerate component with `max == min` gets gain 1 and
/// offset `-min`, so the pair still round-trips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineScale {
    min: Vec<f64>,
    max: Vec<f64>,
}

impl AffineScale {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() {
            return Err(Error::DimensionMismatch {
                context: "affine scale min/max".into(),
                expected: min.len(),
                got: max.len(),
            });
        }
        for i in 0..min.len() {
            if !min[i].is_finite() || !max[i].is_finite() {
                return Err(Error::InvalidValue(format!(
                    "scale component {i} is not finite: min {}, max {}",
                    min[i], max[i]
                )));
            }
            if max[i] < min[i] {
                return Err(Error::InvalidValue(format!(
                    "scale component {i} has max {} < min {}",
                    max[i], min[i]
                )));
            }
        }
        Ok(Self { min, max })
    }

    /// Identity map: min 0, max 1 in every component.
    pub fn identity(dim: usize) -> Self {
        Self {
            min: vec![0.0; dim],
            max: vec![1.0; dim],
        }
    }

    /// Componentwise min/max fitted over data rows.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Result<Self> {
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        let mut seen = 0usize;
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "scale fit row".into(),
                    expected: dim,
                    got: row.len(),
                });
            }
            for (i, v) in row.iter().enumerate() {
                min[i] = min[i].min(*v);
                max[i] = max[i].max(*v);
            }
            seen += 1;
        }
        if seen == 0 {
            return Err(Error::EmptyInput("scale fit needs at least one row".into()));
        }
        Self::new(min, max)
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn min(&self) -> &[f64] {
        &self.min
    }

    pub fn max(&self) -> &[f64] {
        &self.max
    }

    /// Width of component `i`; 1 for degenerate components.
    pub fn span(&self, i: usize) -> f64 {
        let d = self.max[i] - self.min[i];
        if d == 0.0 {
            1.0
        } else {
            d
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim());
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - self.min[i]) / self.span(i))
            .collect()
    }

    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.dim());
        y.iter()
            .enumerate()
            .map(|(i, v)| v * self.span(i) + self.min[i])
            .collect()
    }
}
