//! Two-quantile homogeneity test: are the selected coefficients equal at `tau1` and `tau2`?
//!
//! Both paths see the same stream in one pass. The stacked averages
//! `theta_i = (avg1_i[coords], avg2_i[coords])` feed one full scaling accumulator, and the
//! statistic is `n d' (G V G')^{-1} d` with `G = (I, -I)` and `d = avg1 - avg2`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::critical::{CriticalValues, StatForm};
use crate::inference::{quadratic_form, TestResult};
use crate::scaling::{RandomScalingMatrix, ScalingAccumulator};
use crate::sgd::{LearningRate, Observation, PathState, QuantileLevel};

#[derive(Debug, Clone)]
pub struct HomogeneityTracker {
    taus: [QuantileLevel; 2],
    schedules: [LearningRate; 2],
    paths: [PathState; 2],
    coords: Vec<usize>,
    acc: ScalingAccumulator,
    stacked: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct HomogeneityResult {
    pub n: u64,
    pub taus: [f64; 2],
    pub coords: Vec<usize>,
    pub beta_bar: [Vec<f64>; 2],
    /// `avg1 - avg2` over `coords`.
    pub difference: Vec<f64>,
    /// Stacked `2s x 2s` scaling matrix.
    pub scaling: RandomScalingMatrix,
    pub test: TestResult,
}

impl HomogeneityTracker {
    pub fn new(
        taus: [QuantileLevel; 2],
        schedules: [LearningRate; 2],
        beta0: [Vec<f64>; 2],
        coords: &[usize],
    ) -> Result<Self> {
        if taus[0] == taus[1] {
            return Err(Error::InvalidConfig(
                "homogeneity test needs two distinct quantile levels".into(),
            ));
        }
        let [b1, b2] = beta0;
        if b1.len() != b2.len() {
            return Err(Error::DimensionMismatch {
                expected: b1.len(),
                got: b2.len(),
            });
        }
        // Validates coords against the first path; the stacked reference reuses them.
        let r1 = ScalingAccumulator::subvector(coords, &b1)?;
        let mut reference = r1.reference().to_vec();
        reference.extend(coords.iter().map(|&c| b2[c]));
        let acc = ScalingAccumulator::full(&reference);
        Ok(Self {
            taus,
            schedules,
            paths: [PathState::new(b1)?, PathState::new(b2)?],
            coords: coords.to_vec(),
            stacked: vec![0.0; 2 * coords.len()],
            acc,
        })
    }

    pub fn steps(&self) -> u64 {
        self.paths[0].steps()
    }

    pub fn observe(&mut self, x: &[f64], y: f64) -> Result<()> {
        for k in 0..2 {
            self.paths[k].step(x, y, &self.schedules[k], self.taus[k])?;
        }
        let s = self.coords.len();
        for k in 0..2 {
            let avg = self.paths[k].beta_bar().expect("stepped");
            for (j, &c) in self.coords.iter().enumerate() {
                self.stacked[k * s + j] = avg[c];
            }
        }
        self.acc.accumulate(&self.stacked, self.steps())
    }

    pub fn finish(self, level: f64, cvs: &CriticalValues) -> Result<HomogeneityResult> {
        let n = self.steps();
        if n < 2 {
            return Err(Error::InsufficientObservations { n, required: 2 });
        }
        let scaling = self.acc.finalize(&self.stacked)?;
        let s = self.coords.len();
        let diff: Vec<f64> = (0..s).map(|j| self.stacked[j] - self.stacked[s + j]).collect();
        let mut m = DMatrix::<f64>::zeros(s, s);
        for j in 0..s {
            for k in 0..s {
                let g = |a: usize, b: usize| scaling.get(a, b).unwrap();
                m[(j, k)] = g(j, k) - g(j, s + k) - g(s + j, k) + g(s + j, s + k);
            }
        }
        let (q, near_singular) = quadratic_form(&m, &DVector::from_column_slice(&diff)).map_err(|e| match e {
            Error::Singular(msg) => Error::DegenerateScaling(format!("G V G' is singular: {msg}")),
            other => other,
        })?;
        let (cv, source) = cvs.lookup(level, s, StatForm::Wald)?;
        let mut test = TestResult::new(n as f64 * q, cv, level, s, source);
        test.near_singular = near_singular;
        let [p1, p2] = self.paths;
        Ok(HomogeneityResult {
            n,
            taus: [self.taus[0].value(), self.taus[1].value()],
            coords: self.coords,
            beta_bar: [
                p1.beta_bar().expect("n >= 2").to_vec(),
                p2.beta_bar().expect("n >= 2").to_vec(),
            ],
            difference: diff,
            scaling,
            test,
        })
    }
}

/// One synchronized pass over `stream` followed by the test at `level`.
#[allow(clippy::too_many_arguments)]
pub fn homogeneity_test<I>(
    stream: I,
    taus: [QuantileLevel; 2],
    schedules: [LearningRate; 2],
    beta0: [Vec<f64>; 2],
    coords: &[usize],
    level: f64,
    cvs: &CriticalValues,
) -> Result<HomogeneityResult>
where
    I: IntoIterator<Item = Result<Observation>>,
{
    let mut tr = HomogeneityTracker::new(taus, schedules, beta0, coords)?;
    for obs in stream {
        let obs = obs?;
        tr.observe(&obs.x, obs.y)?;
    }
    tr.finish(level, cvs)
}
