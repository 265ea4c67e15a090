//! Rectangular parameter grids (1D or 2D) with row-major flattening.

use crate::error::{GeomError, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Grid {
    pub ranges: Vec<(f64, f64)>,
    pub counts: Vec<usize>,
}

impl Grid {
    pub fn new(ranges: Vec<(f64, f64)>, counts: Vec<usize>) -> Result<Self> {
        if ranges.is_empty() || ranges.len() != counts.len() {
            return Err(GeomError::InvalidScene(
                "grid ranges and counts must be nonempty and match".into(),
            ));
        }
        if ranges.len() > 2 {
            return Err(GeomError::InvalidScene("grids are 1D or 2D".into()));
        }
        if counts.iter().any(|&c| c < 2) {
            return Err(GeomError::InvalidScene(
                "each grid axis needs at least 2 points".into(),
            ));
        }
        if ranges.iter().any(|(a, b)| !(b > a) || !a.is_finite() || !b.is_finite()) {
            return Err(GeomError::InvalidScene("grid ranges must be increasing".into()));
        }
        Ok(Self { ranges, counts })
    }

    pub fn dims(&self) -> usize {
        self.ranges.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        let (a, b) = self.ranges[axis];
        (b - a) / (self.counts[axis] - 1) as f64
    }

    pub fn coordinate(&self, axis: usize, j: usize) -> f64 {
        self.ranges[axis].0 + self.spacing(axis) * j as f64
    }

    pub fn point(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .enumerate()
            .map(|(axis, &j)| self.coordinate(axis, j))
            .collect()
    }

    pub fn flatten(&self, idx: &[usize]) -> usize {
        match idx.len() {
            1 => idx[0],
            2 => idx[0] * self.counts[1] + idx[1],
            _ => unreachable!(),
        }
    }

    pub fn unflatten(&self, flat: usize) -> Vec<usize> {
        match self.dims() {
            1 => vec![flat],
            2 => vec![flat / self.counts[1], flat % self.counts[1]],
            _ => unreachable!(),
        }
    }

    /// All multi-indices in row-major order.
    pub fn indices(&self) -> Vec<Vec<usize>> {
        (0..self.len()).map(|f| self.unflatten(f)).collect()
    }

    /// All parameter points in row-major order.
    pub fn points(&self) -> Vec<Vec<f64>> {
        self.indices().iter().map(|i| self.point(i)).collect()
    }

    /// True when the index is at least `margin` cells from every boundary.
    pub fn is_interior(&self, idx: &[usize], margin: usize) -> bool {
        idx.iter()
            .zip(&self.counts)
            .all(|(&j, &c)| j >= margin && j + margin < c)
    }
}
