//! Cumulative selection path: the fraction of steps at which `|t_{k,j}| > lambda`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scaling::ScalingAccumulator;

pub const DEFAULT_LAMBDA: f64 = 6.747;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionPath {
    pub lambda: f64,
    pub counts: Vec<u64>,
    pub steps: u64,
}

impl SelectionPath {
    pub fn new(d: usize, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("selection threshold must be positive, got {lambda}")));
        }
        Ok(Self {
            lambda,
            counts: vec![0; d],
            steps: 0,
        })
    }

    /// Record step `i` with per-coordinate statistics `t_values`.
    pub fn update(&mut self, t_values: &[f64], i: u64) -> Result<()> {
        if t_values.len() != self.counts.len() {
            return Err(Error::DimensionMismatch {
                expected: self.counts.len(),
                got: t_values.len(),
            });
        }
        if i != self.steps + 1 {
            return Err(Error::OutOfOrder {
                expected: self.steps + 1,
                got: i,
            });
        }
        for (c, t) in self.counts.iter_mut().zip(t_values) {
            if t.abs() > self.lambda {
                *c += 1;
            }
        }
        self.steps = i;
        Ok(())
    }

    pub fn fractions(&self) -> Vec<f64> {
        if self.steps == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / self.steps as f64).collect()
    }
}

/// Feeds a [`SelectionPath`] from a path's running average using a diagonal accumulator.
///
/// At step `i` the statistic is `sqrt(i) * avg_j / sqrt(V_i,jj)`; steps where the
/// diagonal entry is zero (including `i = 1`) count as unselected.
#[derive(Debug, Clone)]
pub struct SelectionTracker {
    acc: ScalingAccumulator,
    path: SelectionPath,
    diag: Vec<f64>,
    t: Vec<f64>,
}

impl SelectionTracker {
    pub fn new(lambda: f64, beta_ref: &[f64]) -> Result<Self> {
        let d = beta_ref.len();
        let coords: Vec<usize> = (0..d).collect();
        Ok(Self {
            acc: ScalingAccumulator::diagonal(&coords, beta_ref)?,
            path: SelectionPath::new(d, lambda)?,
            diag: vec![0.0; d],
            t: vec![0.0; d],
        })
    }

    pub fn observe(&mut self, beta_bar: &[f64], i: u64) -> Result<()> {
        self.acc.accumulate(beta_bar, i)?;
        if i >= 2 {
            self.acc.diagonal_into(beta_bar, &mut self.diag)?;
            let root = (i as f64).sqrt();
            for ((t, v), b) in self.t.iter_mut().zip(&self.diag).zip(beta_bar) {
                *t = if *v > 0.0 { root * b / v.sqrt() } else { 0.0 };
            }
        } else {
            self.t.iter_mut().for_each(|t| *t = 0.0);
        }
        self.path.update(&self.t, i)
    }

    pub fn path(&self) -> &SelectionPath {
        &self.path
    }

    pub fn into_path(self) -> SelectionPath {
        self.path
    }
}
