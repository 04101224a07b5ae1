//! Stochastic subgradient descent for the check loss.
//!
//! One pass, one observation per step:
//!
//! ```text
//! beta_i = beta_{i-1} - gamma_i * x_i * (1{y_i <= x_i' beta_{i-1}} - tau),   gamma_i = gamma0 * i^(-a)
//! ```
//!
//! [`SgdPath`] drives the iterate, keeps the running (Polyak-Ruppert) average
//! and feeds that average to any registered [`ScalingAccumulator`]s.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::selection::{SelectionPath, SelectionTracker};
use crate::init::InitSpec;
use crate::scaling::{update_average_in_place, RandomScalingMatrix, ScalingAccumulator};

/// Iterates larger than this in absolute value abort the pass.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Default learning-rate exponent.
pub const DEFAULT_EXPONENT: f64 = 0.501;

/// One row of data: regressors `x` (intercept included by the caller) and response `y`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Observation {
    pub x: Vec<f64>,
    pub y: f64,
}

impl Observation {
    pub fn new(x: Vec<f64>, y: f64) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::InvalidConfig("observation has no regressors".into()));
        }
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation contains a non-finite entry".into()));
        }
        Ok(Self { x, y })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// Quantile level, strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
#[serde(transparent)]
pub struct QuantileLevel(f64);

impl QuantileLevel {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau < 1.0 {
            Ok(Self(tau))
        } else {
            Err(Error::InvalidConfig(format!("tau must lie in (0, 1), got {tau}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `gamma_i = gamma0 * i^(-a)` with `gamma0 > 0` and `a` in (1/2, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LearningRate {
    gamma0: f64,
    a: f64,
}

impl LearningRate {
    pub fn new(gamma0: f64, a: f64) -> Result<Self> {
        if !(gamma0.is_finite() && gamma0 > 0.0) {
            return Err(Error::InvalidConfig(format!("gamma0 must be positive, got {gamma0}")));
        }
        if !(a > 0.5 && a < 1.0) {
            return Err(Error::InvalidConfig(format!("a must lie in (0.5, 1), got {a}")));
        }
        Ok(Self { gamma0, a })
    }

    pub fn gamma0(&self) -> f64 {
        self.gamma0
    }

    pub fn exponent(&self) -> f64 {
        self.a
    }

    pub fn rate(&self, i: u64) -> Result<f64> {
        if i == 0 {
            return Err(Error::ZeroStep);
        }
        Ok(self.rate_unchecked(i))
    }

    #[inline]
    fn rate_unchecked(&self, i: u64) -> f64 {
        self.gamma0 * (i as f64).powf(-self.a)
    }
}

/// Free-function form of [`LearningRate::rate`].
pub fn learning_rate(schedule: &LearningRate, i: u64) -> Result<f64> {
    schedule.rate(i)
}

/// Everything needed to run one quantile path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SgdConfig {
    pub tau: QuantileLevel,
    pub schedule: LearningRate,
    pub seed: u64,
    pub init: InitSpec,
}

impl SgdConfig {
    pub fn new(tau: f64, gamma0: f64, a: f64) -> Result<Self> {
        Ok(Self {
            tau: QuantileLevel::new(tau)?,
            schedule: LearningRate::new(gamma0, a)?,
            seed: 0,
            init: InitSpec::Zero,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_init(mut self, init: InitSpec) -> Self {
        self.init = init;
        self
    }
}

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// The scalar `1{y <= x'beta} - tau`; the subgradient is this times `x`.
#[inline]
fn subgradient_weight(beta: &[f64], x: &[f64], y: f64, tau: f64) -> f64 {
    let fitted: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
    if y <= fitted {
        1.0 - tau
    } else {
        -tau
    }
}

/// Subgradient of the check loss at `beta` for one observation.
pub fn subgradient(beta: &[f64], x: &[f64], y: f64, tau: QuantileLevel) -> Result<Vec<f64>> {
    check_dims(beta.len(), x.len())?;
    let w = subgradient_weight(beta, x, y, tau.value());
    Ok(x.iter().map(|v| v * w).collect())
}

/// Iterate, running average and centering reference of one path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathState {
    i: u64,
    beta: Vec<f64>,
    beta_bar: Vec<f64>,
    beta_ref: Vec<f64>,
}

impl PathState {
    pub fn new(beta0: Vec<f64>) -> Result<Self> {
        if beta0.is_empty() {
            return Err(Error::InvalidConfig("initial iterate is empty".into()));
        }
        if beta0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial iterate".into()));
        }
        Ok(Self {
            i: 0,
            beta_bar: vec![0.0; beta0.len()],
            beta_ref: beta0.clone(),
            beta: beta0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.i
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// Running average of `beta_1..beta_i`; `None` before the first step.
    pub fn beta_bar(&self) -> Option<&[f64]> {
        (self.i > 0).then_some(self.beta_bar.as_slice())
    }

    /// The initial iterate, used to center the scaling accumulators.
    pub fn beta_ref(&self) -> &[f64] {
        &self.beta_ref
    }

    /// One S-subGD step on `(x, y)` followed by the average update.
    pub fn step(&mut self, x: &[f64], y: f64, schedule: &LearningRate, tau: QuantileLevel) -> Result<()> {
        check_dims(self.beta.len(), x.len())?;
        let next = self.i + 1;
        let w = subgradient_weight(&self.beta, x, y, tau.value());
        let scale = schedule.rate_unchecked(next) * w;
        let mut diverged = false;
        for (b, xv) in self.beta.iter_mut().zip(x) {
            *b -= scale * xv;
            // NaN fails the comparison too.
            diverged |= !(b.abs() <= DIVERGENCE_LIMIT);
        }
        if diverged {
            return Err(Error::Diverged {
                step: next,
                limit: DIVERGENCE_LIMIT,
            });
        }
        self.i = next;
        update_average_in_place(&mut self.beta_bar, &self.beta, next);
        Ok(())
    }
}

/// Final state of a pass.
#[derive(Debug, Clone, Serialize)]
pub struct PathResult {
    pub n: u64,
    pub beta_bar: Vec<f64>,
    pub beta_last: Vec<f64>,
    pub scaling: Vec<RandomScalingMatrix>,
    pub selection: Option<SelectionPath>,
    #[serde(serialize_with = "serialize_millis")]
    pub elapsed: Duration,
}

pub(crate) fn serialize_millis<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64() * 1e3)
}

/// Single-pass driver: iterate, average, and scaling observers.
#[derive(Debug, Clone)]
pub struct SgdPath {
    tau: QuantileLevel,
    schedule: LearningRate,
    state: PathState,
    accumulators: Vec<ScalingAccumulator>,
    selection: Option<SelectionTracker>,
    started: Option<Instant>,
}

impl SgdPath {
    pub fn new(tau: QuantileLevel, schedule: LearningRate, beta0: Vec<f64>) -> Result<Self> {
        Ok(Self {
            tau,
            schedule,
            state: PathState::new(beta0)?,
            accumulators: Vec::new(),
            selection: None,
            started: None,
        })
    }

    pub fn from_config(config: &SgdConfig, beta0: Vec<f64>) -> Result<Self> {
        Self::new(config.tau, config.schedule, beta0)
    }

    pub fn with_accumulator(mut self, acc: ScalingAccumulator) -> Result<Self> {
        if acc.steps() != 0 {
            return Err(Error::InvalidConfig("accumulator has already been fed".into()));
        }
        if let Some(&max) = acc.coords().iter().max() {
            if max >= self.state.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.state.dim(),
                    got: max + 1,
                });
            }
        }
        self.accumulators.push(acc);
        Ok(self)
    }

    /// Track the cumulative selection path with threshold `lambda`.
    pub fn with_selection(mut self, lambda: f64) -> Result<Self> {
        self.selection = Some(SelectionTracker::new(lambda, self.state.beta_ref())?);
        Ok(self)
    }

    pub fn state(&self) -> &PathState {
        &self.state
    }

    pub fn tau(&self) -> QuantileLevel {
        self.tau
    }

    pub fn schedule(&self) -> &LearningRate {
        &self.schedule
    }

    pub fn observe(&mut self, x: &[f64], y: f64) -> Result<()> {
        self.started.get_or_insert_with(Instant::now);
        self.state.step(x, y, &self.schedule, self.tau)?;
        let i = self.state.steps();
        let avg = &self.state.beta_bar;
        for acc in &mut self.accumulators {
            acc.accumulate(avg, i)?;
        }
        if let Some(sel) = &mut self.selection {
            sel.observe(avg, i)?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<PathResult> {
        let n = self.state.steps();
        if n < 2 {
            return Err(Error::InsufficientObservations { n, required: 2 });
        }
        let scaling = self
            .accumulators
            .iter()
            .map(|acc| acc.finalize(&self.state.beta_bar))
            .collect::<Result<Vec<_>>>()?;
        // Wall clock from the first observation through finalization.
        let elapsed = self.started.map_or(Duration::ZERO, |t| t.elapsed());
        Ok(PathResult {
            n,
            beta_bar: self.state.beta_bar,
            beta_last: self.state.beta,
            scaling,
            selection: self.selection.map(SelectionTracker::into_path),
            elapsed,
        })
    }
}

/// Run one pass over `stream` from `beta0`, feeding `accumulators` after every step.
pub fn run_path<I>(
    stream: I,
    config: &SgdConfig,
    beta0: Vec<f64>,
    accumulators: Vec<ScalingAccumulator>,
) -> Result<PathResult>
where
    I: IntoIterator<Item = Result<Observation>>,
{
    let mut path = SgdPath::from_config(config, beta0)?;
    for acc in accumulators {
        path = path.with_accumulator(acc)?;
    }
    for obs in stream {
        let obs = obs?;
        path.observe(&obs.x, obs.y)?;
    }
    path.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tau(t: f64) -> QuantileLevel {
        QuantileLevel::new(t).unwrap()
    }

    #[test]
    fn subgradient_examples() {
        assert_eq!(subgradient(&[0.0, 0.0], &[1.0, 2.0], 3.0, tau(0.5)).unwrap(), vec![-0.5, -1.0]);
        assert_eq!(subgradient(&[0.0], &[1.0], 0.0, tau(0.25)).unwrap(), vec![0.75]);
        let g = subgradient(&[1.0, 1.0], &[2.0, -1.0], -5.0, tau(0.9)).unwrap();
        assert!((g[0] - 0.2).abs() < 1e-15 && (g[1] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn subgradient_rejects_dimension_mismatch() {
        assert!(matches!(
            subgradient(&[0.0], &[1.0, 2.0], 0.0, tau(0.5)),
            Err(Error::DimensionMismatch { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn quantile_level_bounds() {
        assert!(QuantileLevel::new(0.0).is_err());
        assert!(QuantileLevel::new(1.0).is_err());
        assert!(QuantileLevel::new(f64::NAN).is_err());
        assert!(QuantileLevel::new(0.3).is_ok());
    }

    #[test]
    fn learning_rate_examples() {
        let s = LearningRate::new(1.0, 0.75).unwrap();
        assert_eq!(s.rate(1).unwrap(), 1.0);
        assert!((s.rate(2).unwrap() - 0.594_603_557_501_360_5).abs() < 1e-12);
        let s = LearningRate::new(0.798, 0.501).unwrap();
        // 0.798 * 100^-0.501 evaluated directly
        assert!((s.rate(100).unwrap() - 0.079_433_352_304_651_86).abs() < 1e-12);
        assert!(matches!(s.rate(0), Err(Error::ZeroStep)));
    }

    #[test]
    fn learning_rate_rejects_bad_parameters() {
        assert!(LearningRate::new(0.0, 0.75).is_err());
        assert!(LearningRate::new(-1.0, 0.75).is_err());
        assert!(LearningRate::new(1.0, 0.5).is_err());
        assert!(LearningRate::new(1.0, 1.0).is_err());
    }

    #[test]
    fn step_hand_trace() {
        let s = LearningRate::new(1.0, 0.75).unwrap();
        let mut st = PathState::new(vec![0.0]).unwrap();
        assert!(st.beta_bar().is_none());
        st.step(&[1.0], 1.0, &s, tau(0.5)).unwrap();
        assert_eq!(st.beta(), &[0.5]);
        assert_eq!(st.beta_bar().unwrap(), &[0.5]);
        st.step(&[1.0], 0.0, &s, tau(0.5)).unwrap();
        let expected = 0.5 - 2f64.powf(-0.75) * 0.5;
        assert!((st.beta()[0] - expected).abs() < 1e-15);
        assert!((st.beta()[0] - 0.20270).abs() < 1e-5);
        assert!((st.beta_bar().unwrap()[0] - (0.5 + expected) / 2.0).abs() < 1e-15);
        assert_eq!(st.steps(), 2);
    }

    #[test]
    fn step_reports_divergence() {
        let s = LearningRate::new(1e13, 0.6).unwrap();
        let mut st = PathState::new(vec![0.0]).unwrap();
        let err = st.step(&[1.0], 1.0, &s, tau(0.5)).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 1, .. }));
    }

    #[test]
    fn run_path_requires_two_observations() {
        let cfg = SgdConfig::new(0.5, 1.0, 0.75).unwrap();
        let stream = vec![Observation::new(vec![1.0], 1.0)];
        let err = run_path(stream, &cfg, vec![0.0], vec![]).unwrap_err();
        assert!(matches!(err, Error::InsufficientObservations { n: 1, .. }));
        let err = run_path(Vec::new(), &cfg, vec![0.0], vec![]).unwrap_err();
        assert!(matches!(err, Error::InsufficientObservations { n: 0, .. }));
    }

    #[test]
    fn run_path_detects_dimension_drift() {
        let cfg = SgdConfig::new(0.5, 1.0, 0.75).unwrap();
        let stream = vec![
            Observation::new(vec![1.0, 0.5], 1.0),
            Observation::new(vec![1.0], 1.0),
        ];
        let err = run_path(stream, &cfg, vec![0.0, 0.0], vec![]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn run_path_average_excludes_initial_iterate() {
        let cfg = SgdConfig::new(0.5, 1.0, 0.75).unwrap();
        let stream = vec![
            Observation::new(vec![1.0], 1.0),
            Observation::new(vec![1.0], 0.0),
        ];
        let acc = ScalingAccumulator::full(&[0.0]);
        let res = run_path(stream, &cfg, vec![0.0], vec![acc]).unwrap();
        let b2 = 0.5 - 2f64.powf(-0.75) * 0.5;
        assert_eq!(res.n, 2);
        assert!((res.beta_bar[0] - (0.5 + b2) / 2.0).abs() < 1e-15);
        assert_eq!(res.scaling.len(), 1);
    }

    proptest! {
        #[test]
        fn subgradient_takes_one_of_two_values(
            t in 0.01f64..0.99,
            x in prop::collection::vec(-10.0f64..10.0, 1..6),
            seed_beta in prop::collection::vec(-10.0f64..10.0, 6),
            y in -20.0f64..20.0,
        ) {
            let beta = &seed_beta[..x.len()];
            let g = subgradient(beta, &x, y, tau(t)).unwrap();
            let lo: Vec<f64> = x.iter().map(|v| v * -t).collect();
            let hi: Vec<f64> = x.iter().map(|v| v * (1.0 - t)).collect();
            prop_assert!(g == lo || g == hi);
        }

        #[test]
        fn schedule_is_strictly_decreasing(g0 in 0.01f64..10.0, a in 0.51f64..0.99, i in 1u64..1_000_000) {
            let s = LearningRate::new(g0, a).unwrap();
            prop_assert!(s.rate(i + 1).unwrap() < s.rate(i).unwrap());
        }
    }
}
