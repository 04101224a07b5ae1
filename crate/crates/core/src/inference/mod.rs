//! Pivotal statistics, intervals and tests built on a finalized random-scaling matrix.

pub mod critical;
pub mod homogeneity;
pub mod selection;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scaling::RandomScalingMatrix;

pub use critical::{CriticalValues, CvSource, StatForm};

/// Eigenvalue ratio below which `R V R'` is treated as singular.
pub const SINGULAR_RATIO: f64 = 1e-12;

/// `sqrt(n) (beta_bar_j - hypothesized) / sqrt(v_jj)`.
pub fn t_statistic(beta_bar_j: f64, hypothesized: f64, v_jj: f64, n: u64) -> Result<f64> {
    if n < 2 {
        return Err(Error::InsufficientObservations { n, required: 2 });
    }
    if !(v_jj > 0.0) {
        return Err(Error::DegenerateScaling(format!(
            "scaling variance is {v_jj}; the averaged path is constant or n is too small"
        )));
    }
    Ok((n as f64).sqrt() * (beta_bar_j - hypothesized) / v_jj.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    /// Zero-width because the scaling variance was zero.
    pub degenerate: bool,
}

impl Interval {
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// `beta_bar_j +/- cv * sqrt(v_jj / n)` for a given critical value.
pub fn interval_with_cv(beta_bar_j: f64, v_jj: f64, n: u64, cv: f64) -> Result<Interval> {
    if n < 2 {
        return Err(Error::InsufficientObservations { n, required: 2 });
    }
    if v_jj < 0.0 || !v_jj.is_finite() {
        return Err(Error::DegenerateScaling(format!("scaling variance is {v_jj}")));
    }
    let half = cv * (v_jj / n as f64).sqrt();
    Ok(Interval {
        lower: beta_bar_j - half,
        upper: beta_bar_j + half,
        degenerate: v_jj == 0.0,
    })
}

/// Two-sided interval at confidence `level`, using the bundled critical values.
pub fn confidence_interval(beta_bar_j: f64, v_jj: f64, n: u64, level: f64) -> Result<Interval> {
    let (cv, _) = CriticalValues::bundled().two_sided(level)?;
    interval_with_cv(beta_bar_j, v_jj, n, cv)
}

/// Value of a Wald quadratic form and whether the fallback solve was needed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaldValue {
    pub statistic: f64,
    pub near_singular: bool,
}

/// `n (R b - c)' (R V R')^{-1} (R b - c)`.
///
/// `r` is `ell x d` over the full coefficient vector; its nonzero columns must lie in
/// `v.coords()`. Diagonal-mode matrices work only when no off-diagonal entry is needed.
pub fn wald_statistic(
    r: &DMatrix<f64>,
    c: &[f64],
    beta_bar: &[f64],
    v: &RandomScalingMatrix,
    n: u64,
) -> Result<WaldValue> {
    let ell = r.nrows();
    if ell == 0 {
        return Err(Error::InvalidConfig("restriction matrix has no rows".into()));
    }
    if r.ncols() != beta_bar.len() {
        return Err(Error::DimensionMismatch {
            expected: beta_bar.len(),
            got: r.ncols(),
        });
    }
    if c.len() != ell {
        return Err(Error::DimensionMismatch { expected: ell, got: c.len() });
    }
    if n < 2 {
        return Err(Error::InsufficientObservations { n, required: 2 });
    }
    // Columns of R restricted to the selected coordinates.
    let s = v.dim();
    let mut rs = DMatrix::<f64>::zeros(ell, s);
    for col in 0..r.ncols() {
        let used = (0..ell).any(|p| r[(p, col)] != 0.0);
        match v.position(col) {
            Some(pos) => rs.set_column(pos, &r.column(col)),
            None if used => {
                return Err(Error::InvalidConfig(format!(
                    "restriction uses coordinate {col}, which the scaling matrix does not cover"
                )))
            }
            None => {}
        }
    }
    let mut m = DMatrix::<f64>::zeros(ell, ell);
    for p in 0..ell {
        for q in p..ell {
            let mut acc = 0.0;
            for j in 0..s {
                if rs[(p, j)] == 0.0 {
                    continue;
                }
                for k in 0..s {
                    if rs[(q, k)] == 0.0 {
                        continue;
                    }
                    let vjk = v.get(j, k).ok_or_else(|| {
                        Error::InvalidConfig("restriction needs off-diagonal scaling entries; use full or subvector mode".into())
                    })?;
                    acc += rs[(p, j)] * vjk * rs[(q, k)];
                }
            }
            m[(p, q)] = acc;
            m[(q, p)] = acc;
        }
    }
    let mut diff = DVector::<f64>::zeros(ell);
    for p in 0..ell {
        let rb: f64 = (0..beta_bar.len()).map(|j| r[(p, j)] * beta_bar[j]).sum();
        diff[p] = rb - c[p];
    }
    let (q, near_singular) = quadratic_form(&m, &diff)?;
    Ok(WaldValue {
        statistic: n as f64 * q,
        near_singular,
    })
}

/// `x' M^{-1} x` for symmetric `M`. Rank-deficient `M` is an error; otherwise Cholesky,
/// falling back to an eigen pseudo-solve (flagged) if the factorization fails.
pub(crate) fn quadratic_form(m: &DMatrix<f64>, x: &DVector<f64>) -> Result<(f64, bool)> {
    if m.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Wald quadratic form input".into()));
    }
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= SINGULAR_RATIO * max {
        return Err(Error::Singular(format!(
            "R V R' is singular (eigenvalues in [{min:e}, {max:e}])"
        )));
    }
    if let Some(chol) = m.clone().cholesky() {
        let y = chol.solve(x);
        return Ok((x.dot(&y), false));
    }
    let proj = eig.eigenvectors.transpose() * x;
    let q = proj
        .iter()
        .zip(eig.eigenvalues.iter())
        .map(|(p, l)| p * p / l)
        .sum();
    Ok((q, true))
}

/// Decision of a test against a critical value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub critical_value: f64,
    pub level: f64,
    pub reject: bool,
    pub ell: usize,
    pub cv_source: CvSource,
    pub near_singular: bool,
}

impl TestResult {
    pub fn new(statistic: f64, critical_value: f64, level: f64, ell: usize, cv_source: CvSource) -> Self {
        Self {
            statistic,
            critical_value,
            level,
            reject: statistic > critical_value,
            ell,
            cv_source,
            near_singular: false,
        }
    }
}

/// Wald test of `R beta = c` at confidence `level`.
pub fn wald_test(
    r: &DMatrix<f64>,
    c: &[f64],
    beta_bar: &[f64],
    v: &RandomScalingMatrix,
    n: u64,
    level: f64,
    cvs: &CriticalValues,
) -> Result<TestResult> {
    let w = wald_statistic(r, c, beta_bar, v, n)?;
    let ell = r.nrows();
    let (cv, source) = cvs.lookup(level, ell, StatForm::Wald)?;
    let mut out = TestResult::new(w.statistic, cv, level, ell, source);
    out.near_singular = w.near_singular;
    Ok(out)
}

/// Unit row vector `e_j'` of length `d`.
pub fn unit_restriction(d: usize, j: usize) -> DMatrix<f64> {
    let mut r = DMatrix::zeros(1, d);
    r[(0, j)] = 1.0;
    r
}
