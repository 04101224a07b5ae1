//! Slow, independent references used to check the streaming estimator.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::Dataset;

pub const ENUMERATION_MAX_N: usize = 40;
pub const ENUMERATION_MAX_D: usize = 3;

/// `rho_tau(u) = u (tau - 1{u <= 0})`.
#[inline]
pub fn check_loss(u: f64, tau: f64) -> f64 {
    if u <= 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

/// Mean check loss of `beta` on `data`.
pub fn check_objective(beta: &[f64], data: &Dataset, tau: f64) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let total: f64 = data
        .rows()
        .map(|(x, y)| check_loss(y - x.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>(), tau))
        .sum();
    total / data.len() as f64
}

fn solve_basis(data: &Dataset, rows: &[usize]) -> Option<Vec<f64>> {
    let d = data.dim();
    let mut xb = DMatrix::<f64>::zeros(d, d);
    let mut yb = DVector::<f64>::zeros(d);
    for (r, &i) in rows.iter().enumerate() {
        for (c, v) in data.row(i).0.iter().enumerate() {
            xb[(r, c)] = *v;
        }
        yb[r] = data.response()[i];
    }
    let scale = xb.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let lu = xb.lu();
    if !(scale > 0.0) || lu.determinant().abs() <= 1e-12 * scale.powi(d as i32) {
        return None;
    }
    lu.solve(&yb).map(|v| v.iter().copied().collect())
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

/// Exact quantile regression by enumerating every `d`-row interpolant.
///
/// Ties in the objective (within relative `1e-12`) go to the lexicographically
/// smallest coefficient vector.
pub fn exact_qr_small(data: &Dataset, tau: f64) -> Result<Vec<f64>> {
    let n = data.len();
    let d = data.dim();
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidConfig(format!("tau must lie in (0, 1), got {tau}")));
    }
    if n > ENUMERATION_MAX_N || d > ENUMERATION_MAX_D {
        return Err(Error::InvalidConfig(format!(
            "enumeration is limited to n <= {ENUMERATION_MAX_N}, d <= {ENUMERATION_MAX_D} (got n = {n}, d = {d})"
        )));
    }
    if n < d {
        return Err(Error::InsufficientObservations {
            n: n as u64,
            required: d as u64,
        });
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut idx: Vec<usize> = (0..d).collect();
    loop {
        if let Some(beta) = solve_basis(data, &idx) {
            let obj = check_objective(&beta, data, tau);
            let better = match &best {
                None => true,
                Some((bo, bb)) => {
                    let tol = 1e-12 * bo.abs().max(1e-300);
                    obj < bo - tol || ((obj - bo).abs() <= tol && lex_less(&beta, bb))
                }
            };
            if better {
                best = Some((obj, beta));
            }
        }
        // Next combination in lexicographic order.
        let mut k = d;
        loop {
            if k == 0 {
                return best
                    .map(|(_, b)| b)
                    .ok_or_else(|| Error::Singular("every d-row subset has a singular design".into()));
            }
            k -= 1;
            if idx[k] < n - d + k {
                idx[k] += 1;
                for j in k + 1..d {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Output of [`exact_qr`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactFit {
    pub beta: Vec<f64>,
    pub objective: f64,
    pub basis: Vec<usize>,
    pub iterations: usize,
}

/// Exact quantile regression for larger `n` by descent over basic solutions.
///
/// From a vertex (a `d`-row interpolant) each edge releases one basis row; the steepest
/// descending edge is followed to its minimizing breakpoint, which swaps one row into the
/// basis. The objective strictly decreases, so the walk ends at an optimal vertex.
pub fn exact_qr(data: &Dataset, tau: f64) -> Result<ExactFit> {
    let n = data.len();
    let d = data.dim();
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidConfig(format!("tau must lie in (0, 1), got {tau}")));
    }
    if n < d {
        return Err(Error::InsufficientObservations {
            n: n as u64,
            required: d as u64,
        });
    }
    let y = data.response();
    let mut basis = initial_basis(data)?;
    let mut resid = vec![0.0; n];
    let mut c = vec![0.0; n];
    let mut in_basis = vec![false; n];
    let scale = y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let zero = 1e-11 * scale;
    let max_iters = 50 * n + 1000;
    for iterations in 0..max_iters {
        let (beta, dinv) = basis_solution(data, &basis)?;
        for (i, r) in resid.iter_mut().enumerate() {
            *r = y[i] - dot(data.row(i).0, &beta);
        }
        in_basis.iter_mut().for_each(|b| *b = false);
        for &b in &basis {
            in_basis[b] = true;
        }
        // Steepest edge.
        let mut best: Option<(f64, usize, f64)> = None;
        for k in 0..d {
            let col: Vec<f64> = (0..d).map(|r| dinv[(r, k)]).collect();
            for (i, ci) in c.iter_mut().enumerate() {
                *ci = dot(data.row(i).0, &col);
            }
            for sigma in [1.0, -1.0] {
                let mut g = if sigma > 0.0 { 1.0 - tau } else { tau };
                for i in 0..n {
                    if in_basis[i] {
                        continue;
                    }
                    let ci = sigma * c[i];
                    let r = resid[i];
                    g += if r > zero {
                        -tau * ci
                    } else if r < -zero {
                        (1.0 - tau) * ci
                    } else if ci > 0.0 {
                        (1.0 - tau) * ci
                    } else {
                        -tau * ci
                    };
                }
                if g < -1e-12 && best.is_none_or(|(bg, _, _)| g < bg) {
                    best = Some((g, k, sigma));
                }
            }
        }
        let Some((g, k, sigma)) = best else {
            let objective = check_objective(&beta, data, tau);
            return Ok(ExactFit {
                beta,
                objective,
                basis,
                iterations,
            });
        };
        let col: Vec<f64> = (0..d).map(|r| sigma * dinv[(r, k)]).collect();
        let mut breaks: Vec<(f64, f64, usize)> = Vec::new();
        for i in 0..n {
            if in_basis[i] {
                continue;
            }
            let ci = dot(data.row(i).0, &col);
            if ci == 0.0 {
                continue;
            }
            let t = resid[i] / ci;
            if t > 0.0 && resid[i].abs() > zero {
                breaks.push((t, ci.abs(), i));
            }
        }
        breaks.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
        let mut slope = g;
        let mut enter = None;
        for &(_, w, i) in &breaks {
            slope += w;
            if slope >= 0.0 {
                enter = Some(i);
                break;
            }
        }
        let Some(enter) = enter else {
            return Err(Error::Singular("quantile regression objective is unbounded along an edge".into()));
        };
        basis[k] = enter;
    }
    Err(Error::NonFinite(format!("exact quantile regression did not terminate in {max_iters} pivots")))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn basis_solution(data: &Dataset, basis: &[usize]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let d = data.dim();
    let mut xb = DMatrix::<f64>::zeros(d, d);
    let mut yb = DVector::<f64>::zeros(d);
    for (r, &i) in basis.iter().enumerate() {
        for (c, v) in data.row(i).0.iter().enumerate() {
            xb[(r, c)] = *v;
        }
        yb[r] = data.response()[i];
    }
    let inv = xb
        .try_inverse()
        .ok_or_else(|| Error::Singular("basis design became singular".into()))?;
    let beta = (&inv * yb).iter().copied().collect();
    Ok((beta, inv))
}

/// Rows with the smallest least-squares residuals that span the design.
fn initial_basis(data: &Dataset) -> Result<Vec<usize>> {
    let n = data.len();
    let d = data.dim();
    let mut xtx = DMatrix::<f64>::zeros(d, d);
    let mut xty = DVector::<f64>::zeros(d);
    for (x, y) in data.rows() {
        for j in 0..d {
            xty[j] += x[j] * y;
            for k in 0..d {
                xtx[(j, k)] += x[j] * x[k];
            }
        }
    }
    let ls: Vec<f64> = match xtx.cholesky() {
        Some(ch) => ch.solve(&xty).iter().copied().collect(),
        None => vec![0.0; d],
    };
    let mut order: Vec<usize> = (0..n).collect();
    let abs_res: Vec<f64> = (0..n)
        .map(|i| (data.response()[i] - dot(data.row(i).0, &ls)).abs())
        .collect();
    order.sort_by(|&a, &b| abs_res[a].total_cmp(&abs_res[b]).then(a.cmp(&b)));
    // Greedy Gram-Schmidt selection of independent rows.
    let mut basis = Vec::with_capacity(d);
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(d);
    for i in order {
        let mut v = data.row(i).0.to_vec();
        let norm0 = dot(&v, &v).sqrt();
        if norm0 == 0.0 {
            continue;
        }
        for q in &ortho {
            let p = dot(&v, q);
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
        }
        let nv = dot(&v, &v).sqrt();
        if nv > 1e-8 * norm0 {
            v.iter_mut().for_each(|a| *a /= nv);
            ortho.push(v);
            basis.push(i);
            if basis.len() == d {
                return Ok(basis);
            }
        }
    }
    Err(Error::Singular("design matrix does not have full column rank".into()))
}

/// Direct evaluation of the random-scaling matrix from a stored iterate path:
/// `(1/n) sum_s u_s u_s'` with `u_s = n^{-1/2} sum_{i<=s} (beta_i - mean)`.
pub fn batch_random_scaling(path: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = path.len();
    if n < 2 {
        return Err(Error::InsufficientObservations {
            n: n as u64,
            required: 2,
        });
    }
    let d = path[0].len();
    if let Some(bad) = path.iter().find(|b| b.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let mut mean = vec![0.0; d];
    for b in path {
        for (m, v) in mean.iter_mut().zip(b) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut partial = vec![0.0; d];
    let mut v = DMatrix::<f64>::zeros(d, d);
    for b in path {
        for j in 0..d {
            partial[j] += b[j] - mean[j];
        }
        for j in 0..d {
            for k in j..d {
                v[(j, k)] += partial[j] * partial[k];
            }
        }
    }
    let nn = (n as f64) * (n as f64);
    for j in 0..d {
        for k in j..d {
            v[(j, k)] /= nn;
            v[(k, j)] = v[(j, k)];
        }
    }
    Ok(v)
}
