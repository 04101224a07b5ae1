//! Starting values: the initial iterate and the learning-rate scale.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::numeric::{normal_cdf, normal_pdf, normal_quantile};
use crate::sgd::{LearningRate, PathState, QuantileLevel};

pub const DEFAULT_SUBSAMPLE_FRACTION: f64 = 0.10;
pub const DEFAULT_MAX_ITERS: usize = 500;
const MIN_BANDWIDTH: f64 = 0.01;
const ARMIJO: f64 = 1e-4;
const SHRINK: f64 = 0.5;

/// How the initial iterate is produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum InitSpec {
    Zero,
    User { beta: Vec<f64> },
    /// Convolution-smoothed QR on the first `fraction` of the shuffled stream.
    SmoothedQr { fraction: f64, bandwidth: Option<f64> },
    /// Plain S-subGD over the first `count` shuffled rows, which are then dropped.
    BurnIn { count: usize },
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec::SmoothedQr {
            fraction: DEFAULT_SUBSAMPLE_FRACTION,
            bandwidth: None,
        }
    }
}

impl InitSpec {
    pub fn validate(&self, n: usize, d: usize) -> Result<()> {
        match self {
            InitSpec::Zero => Ok(()),
            InitSpec::User { beta } if beta.len() != d => Err(Error::DimensionMismatch {
                expected: d,
                got: beta.len(),
            }),
            InitSpec::User { beta } if beta.iter().any(|v| !v.is_finite()) => {
                Err(Error::NonFinite("user-supplied initial iterate".into()))
            }
            InitSpec::User { .. } => Ok(()),
            InitSpec::SmoothedQr { fraction, bandwidth } => {
                if !(*fraction > 0.0 && *fraction <= 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "subsample fraction must lie in (0, 1], got {fraction}"
                    )));
                }
                if let Some(h) = bandwidth {
                    if !(*h > 0.0 && h.is_finite()) {
                        return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {h}")));
                    }
                }
                Ok(())
            }
            InitSpec::BurnIn { count: 0 } => Err(Error::InvalidConfig("burn-in needs at least one row".into())),
            InitSpec::BurnIn { count } if *count >= n => Err(Error::InvalidConfig(format!(
                "burn-in of {count} rows leaves nothing of a {n}-row stream"
            ))),
            InitSpec::BurnIn { .. } => Ok(()),
        }
    }

    /// Rows of the shuffled stream consumed by initialization, out of `n`.
    pub fn rows_used(&self, n: usize) -> usize {
        match self {
            InitSpec::SmoothedQr { fraction, .. } => subsample_size(n, *fraction),
            InitSpec::BurnIn { count } => *count,
            _ => 0,
        }
    }
}

/// `ceil(fraction * n)`, clamped to `[min(n, 2), n]`.
pub fn subsample_size(n: usize, fraction: f64) -> usize {
    let m = (fraction * n as f64).ceil() as usize;
    m.clamp(n.min(2), n)
}

/// Sample standard deviation with divisor `m - 1`.
pub fn estimate_sigma(y: &[f64]) -> Result<f64> {
    let m = y.len();
    if m < 2 {
        return Err(Error::InsufficientObservations {
            n: m as u64,
            required: 2,
        });
    }
    let mean = y.iter().sum::<f64>() / m as f64;
    let ss: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    let sd = (ss / (m - 1) as f64).sqrt();
    if !(sd > 0.0) {
        return Err(Error::DegenerateScaling(
            "response has zero variance in the subsample; rule-of-thumb gamma0 is undefined".into(),
        ));
    }
    Ok(sd)
}

/// `gamma0 = phi(Phi^{-1}(tau)) / (sigma * sqrt(tau (1 - tau)))`.
pub fn rule_of_thumb_gamma0(sigma_hat: f64, tau: QuantileLevel) -> Result<f64> {
    if !(sigma_hat > 0.0 && sigma_hat.is_finite()) {
        return Err(Error::InvalidConfig(format!("sigma must be positive, got {sigma_hat}")));
    }
    let t = tau.value();
    Ok(normal_pdf(normal_quantile(t)) / (sigma_hat * (t * (1.0 - t)).sqrt()))
}

/// `max(((d + ln m) / m)^0.4, 0.01)`.
pub fn default_bandwidth(d: usize, m: usize) -> f64 {
    let m = m.max(2) as f64;
    ((d as f64 + m.ln()) / m).powf(0.4).max(MIN_BANDWIDTH)
}

/// Mean Gaussian-smoothed check loss and its gradient.
///
/// With `u = y - x'beta` and `z = u / h`, the smoothed loss is
/// `h phi(z) + u (tau - 1 + Phi(z))` and its `beta`-gradient is
/// `x (Phi(-z) - tau)`.
pub fn smoothed_loss_and_gradient(beta: &[f64], data: &Dataset, tau: f64, h: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; beta.len()];
    let mut loss = 0.0;
    for (x, y) in data.rows() {
        let u = y - dot(x, beta);
        let z = u / h;
        let cdf = normal_cdf(z);
        loss += h * normal_pdf(z) + u * (tau - 1.0 + cdf);
        let w = (1.0 - cdf) - tau;
        for (g, xv) in grad.iter_mut().zip(x) {
            *g += w * xv;
        }
    }
    let m = data.len() as f64;
    grad.iter_mut().for_each(|g| *g /= m);
    (loss / m, grad)
}

pub fn smoothed_loss(beta: &[f64], data: &Dataset, tau: f64, h: f64) -> f64 {
    let total: f64 = data
        .rows()
        .map(|(x, y)| {
            let u = y - dot(x, beta);
            let z = u / h;
            h * normal_pdf(z) + u * (tau - 1.0 + normal_cdf(z))
        })
        .sum();
    total / data.len() as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Result of the smoothed-QR initializer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothedFit {
    pub beta: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub loss: f64,
    pub bandwidth: f64,
}

/// Gradient descent with Armijo backtracking on the smoothed check loss, from zero.
/// Each line search starts from the Barzilai-Borwein step.
///
/// `tol` defaults to `1e-6 * sqrt(d)` and `bandwidth` to [`default_bandwidth`].
pub fn smoothed_qr_init(
    subsample: &Dataset,
    tau: QuantileLevel,
    bandwidth: Option<f64>,
    max_iters: usize,
    tol: Option<f64>,
) -> Result<SmoothedFit> {
    let d = subsample.dim();
    let m = subsample.len();
    if m == 0 {
        return Err(Error::InsufficientObservations { n: 0, required: 1 });
    }
    let h = bandwidth.unwrap_or_else(|| default_bandwidth(d, m));
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {h}")));
    }
    let tol = tol.unwrap_or(1e-6 * (d as f64).sqrt());
    let t = tau.value();

    let mut beta = vec![0.0; d];
    let (mut loss, mut grad) = smoothed_loss_and_gradient(&beta, subsample, t, h);
    let mut gnorm = norm(&grad);
    let mut step = 1.0;
    let mut iterations = 0;
    let mut trial = vec![0.0; d];
    while gnorm >= tol && iterations < max_iters {
        if !loss.is_finite() {
            return Err(Error::NonFinite("smoothed loss during initialization".into()));
        }
        let g2 = gnorm * gnorm;
        loop {
            for ((tr, b), g) in trial.iter_mut().zip(&beta).zip(&grad) {
                *tr = b - step * g;
            }
            let candidate = smoothed_loss(&trial, subsample, t, h);
            if candidate <= loss - ARMIJO * step * g2 {
                break;
            }
            step *= SHRINK;
            if step < 1e-20 {
                // No representable decrease left along -grad.
                break;
            }
        }
        if step < 1e-20 {
            break;
        }
        std::mem::swap(&mut beta, &mut trial);
        let (new_loss, new_grad) = smoothed_loss_and_gradient(&beta, subsample, t, h);
        // Barzilai-Borwein trial step for the next iteration; `trial` holds the old iterate.
        let (mut sy, mut ss) = (0.0, 0.0);
        for j in 0..d {
            let s = beta[j] - trial[j];
            sy += s * (new_grad[j] - grad[j]);
            ss += s * s;
        }
        step = if sy > 0.0 { (ss / sy).clamp(1e-10, 1e10) } else { step * 2.0 };
        loss = new_loss;
        grad = new_grad;
        gnorm = norm(&grad);
        iterations += 1;
    }
    if !loss.is_finite() || beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::NonFinite("smoothed loss during initialization".into()));
    }
    let converged = gnorm < tol;
    if !converged && design_is_singular(subsample) {
        return Err(Error::Singular(
            "initialization subsample has a rank-deficient design; use a larger subsample fraction".into(),
        ));
    }
    Ok(SmoothedFit {
        beta,
        converged,
        iterations,
        gradient_norm: gnorm,
        loss,
        bandwidth: h,
    })
}

fn design_is_singular(data: &Dataset) -> bool {
    let d = data.dim();
    let mut gram = DMatrix::<f64>::zeros(d, d);
    for (x, _) in data.rows() {
        for j in 0..d {
            for k in 0..d {
                gram[(j, k)] += x[j] * x[k];
            }
        }
    }
    let eig = SymmetricEigen::new(gram).eigenvalues;
    let max = eig.iter().cloned().fold(0.0, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    !(max > 0.0) || min <= 1e-12 * max
}

/// S-subGD from zero over `prefix`; returns the last iterate.
pub fn burn_in_init(prefix: &Dataset, tau: QuantileLevel, schedule: &LearningRate) -> Result<Vec<f64>> {
    if prefix.is_empty() {
        return Err(Error::InvalidConfig("burn-in prefix is empty".into()));
    }
    let mut state = PathState::new(vec![0.0; prefix.dim()])?;
    for (x, y) in prefix.rows() {
        state.step(x, y, schedule, tau)?;
    }
    Ok(state.beta().to_vec())
}

/// Learning-rate scale: fixed, or the rule of thumb on the initialization subsample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Gamma0Spec {
    Auto,
    Fixed(f64),
}

impl Default for Gamma0Spec {
    fn default() -> Self {
        Gamma0Spec::Fixed(1.0)
    }
}

/// Leading rows of the shuffled stream needed before the main pass starts.
pub fn prefix_len(spec: &InitSpec, gamma0: Gamma0Spec, n: usize) -> usize {
    let sigma_rows = match gamma0 {
        Gamma0Spec::Auto => subsample_size(n, DEFAULT_SUBSAMPLE_FRACTION),
        Gamma0Spec::Fixed(_) => 0,
    };
    spec.rows_used(n).max(sigma_rows)
}

/// Everything decided before the main pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitOutcome {
    pub beta0: Vec<f64>,
    /// Rows at the head of the stream the main pass must skip (burn-in only).
    pub skip: usize,
    pub schedule: LearningRate,
    pub sigma_hat: Option<f64>,
    pub smoothed: Option<SmoothedFit>,
}

/// Resolve the learning rate and the initial iterate from `prefix`, the first
/// [`prefix_len`] rows of the shuffled stream of length `n`.
pub fn initialize(
    spec: &InitSpec,
    gamma0: Gamma0Spec,
    a: f64,
    tau: QuantileLevel,
    prefix: &Dataset,
    n: usize,
) -> Result<InitOutcome> {
    let d = prefix.dim();
    spec.validate(n, d)?;
    let (g0, sigma_hat) = match gamma0 {
        Gamma0Spec::Fixed(g) => (g, None),
        Gamma0Spec::Auto => {
            let m = subsample_size(n, DEFAULT_SUBSAMPLE_FRACTION).min(prefix.len());
            let sigma = estimate_sigma(&prefix.response()[..m])?;
            (rule_of_thumb_gamma0(sigma, tau)?, Some(sigma))
        }
    };
    let schedule = LearningRate::new(g0, a)?;
    let take = |m: usize| prefix.select(&(0..m.min(prefix.len())).collect::<Vec<_>>());
    let (beta0, skip, smoothed) = match spec {
        InitSpec::Zero => (vec![0.0; d], 0, None),
        InitSpec::User { beta } => (beta.clone(), 0, None),
        InitSpec::SmoothedQr { fraction, bandwidth } => {
            let sub = take(subsample_size(n, *fraction));
            let fit = smoothed_qr_init(&sub, tau, *bandwidth, DEFAULT_MAX_ITERS, None)?;
            (fit.beta.clone(), 0, Some(fit))
        }
        InitSpec::BurnIn { count } => {
            let sub = take(*count);
            (burn_in_init(&sub, tau, &schedule)?, *count, None)
        }
    };
    Ok(InitOutcome {
        beta0,
        skip,
        schedule,
        sigma_hat,
        smoothed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn tau(t: f64) -> QuantileLevel {
        QuantileLevel::new(t).unwrap()
    }

    #[test]
    fn sigma_examples() {
        assert!((estimate_sigma(&[0.0, 2.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!((estimate_sigma(&[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(estimate_sigma(&[5.0, 5.0, 5.0]), Err(Error::DegenerateScaling(_))));
        assert!(estimate_sigma(&[1.0]).is_err());
    }

    #[test]
    fn sigma_is_permutation_invariant() {
        let a = [3.0, -1.0, 4.5, 0.25, 9.0];
        let b = [9.0, 0.25, 3.0, 4.5, -1.0];
        assert!((estimate_sigma(&a).unwrap() - estimate_sigma(&b).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn rule_of_thumb_constants() {
        assert!((rule_of_thumb_gamma0(1.0, tau(0.5)).unwrap() - 0.798).abs() < 1e-3);
        assert!((rule_of_thumb_gamma0(1.0, tau(0.1)).unwrap() - 0.585).abs() < 1e-3);
        assert!((rule_of_thumb_gamma0(2.0, tau(0.9)).unwrap() - 0.2925).abs() < 1e-3);
        for t in [0.05, 0.2, 0.35, 0.5] {
            let a = rule_of_thumb_gamma0(1.3, tau(t)).unwrap();
            let b = rule_of_thumb_gamma0(1.3, tau(1.0 - t)).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
        assert!(rule_of_thumb_gamma0(0.0, tau(0.5)).is_err());
    }

    #[test]
    fn bandwidth_rule() {
        let h = default_bandwidth(11, 10_000);
        assert!((h - ((11.0 + 10_000f64.ln()) / 10_000.0).powf(0.4)).abs() < 1e-15);
        assert_eq!(default_bandwidth(1, 1_000_000_000), MIN_BANDWIDTH);
    }

    fn random_design(m: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = rng_from_seed(seed);
        let mut ds = Dataset::new(d).unwrap();
        for _ in 0..m {
            let mut x = vec![1.0];
            for _ in 1..d {
                x.push(rng.sample(StandardNormal));
            }
            let e: f64 = rng.sample(StandardNormal);
            let y = x.iter().sum::<f64>() + e;
            ds.push(&x, y).unwrap();
        }
        ds
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ds = random_design(200, 3, 4);
        let mut rng = rng_from_seed(5);
        for _ in 0..10 {
            let beta: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let t = rng.random_range(0.1..0.9);
            let h = rng.random_range(0.05..1.0);
            let (_, grad) = smoothed_loss_and_gradient(&beta, &ds, t, h);
            for j in 0..3 {
                let eps = 1e-6;
                let mut up = beta.clone();
                let mut dn = beta.clone();
                up[j] += eps;
                dn[j] -= eps;
                let fd = (smoothed_loss(&up, &ds, t, h) - smoothed_loss(&dn, &ds, t, h)) / (2.0 * eps);
                assert!((fd - grad[j]).abs() < 1e-5, "j={j} fd={fd} an={}", grad[j]);
            }
        }
    }

    #[test]
    fn symmetric_intercept_only_lands_at_zero() {
        let mut ds = Dataset::new(1).unwrap();
        for v in [-3.0, -1.0, -0.5, 0.5, 1.0, 3.0] {
            ds.push(&[1.0], v).unwrap();
        }
        let fit = smoothed_qr_init(&ds, tau(0.5), Some(0.5), 500, None).unwrap();
        assert!(fit.converged);
        assert!(fit.beta[0].abs() < 1e-5);
    }

    #[test]
    fn converges_on_regression_fixture() {
        let ds = random_design(2000, 3, 9);
        let fit = smoothed_qr_init(&ds, tau(0.5), None, DEFAULT_MAX_ITERS, None).unwrap();
        assert!(fit.converged, "{fit:?}");
        let (_, g) = smoothed_loss_and_gradient(&fit.beta, &ds, 0.5, fit.bandwidth);
        assert!(norm(&g) < 1e-6 * 3f64.sqrt());
        for b in &fit.beta {
            assert!((b - 1.0).abs() < 0.15, "{:?}", fit.beta);
        }
        // Convexity spot check: no descent from the returned point along random lines.
        let mut rng = rng_from_seed(10);
        let f0 = fit.loss;
        for _ in 0..20 {
            let dir: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            for s in [1e-3, -1e-3, 0.1, -0.1] {
                let p: Vec<f64> = fit.beta.iter().zip(&dir).map(|(b, v)| b + s * v).collect();
                assert!(smoothed_loss(&p, &ds, 0.5, fit.bandwidth) >= f0 - 1e-9);
            }
        }
    }

    #[test]
    fn rank_deficient_subsample_is_reported() {
        let mut ds = Dataset::new(2).unwrap();
        let mut rng = rng_from_seed(2);
        for _ in 0..50 {
            let y: f64 = rng.sample(StandardNormal);
            ds.push(&[1.0, 0.0], y).unwrap();
        }
        // Degenerate column: cannot converge in one iteration, and the design is singular.
        let err = smoothed_qr_init(&ds, tau(0.5), None, 1, None).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
    }

    #[test]
    fn burn_in_single_step() {
        let mut ds = Dataset::new(1).unwrap();
        ds.push(&[1.0], 1.0).unwrap();
        let sched = LearningRate::new(1.0, 0.75).unwrap();
        assert_eq!(burn_in_init(&ds, tau(0.5), &sched).unwrap(), vec![0.5]);
        assert!(burn_in_init(&Dataset::new(1).unwrap(), tau(0.5), &sched).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(InitSpec::BurnIn { count: 0 }.validate(10, 1).is_err());
        assert!(InitSpec::BurnIn { count: 10 }.validate(10, 1).is_err());
        assert!(InitSpec::BurnIn { count: 9 }.validate(10, 1).is_ok());
        assert!(InitSpec::SmoothedQr { fraction: 0.0, bandwidth: None }.validate(10, 1).is_err());
        assert!(InitSpec::SmoothedQr { fraction: 1.0, bandwidth: None }.validate(10, 1).is_ok());
        assert!(InitSpec::User { beta: vec![0.0] }.validate(10, 2).is_err());
        assert_eq!(subsample_size(100_000, 0.1), 10_000);
        assert_eq!(subsample_size(5, 0.01), 2);
    }
}
