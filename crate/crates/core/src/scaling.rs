//! Online Polyak-Ruppert averaging and the random-scaling matrix.
//!
//! For a path `beta_1..beta_n` with running means `bbar_i`, the random-scaling
//! matrix is
//!
//! ```text
//! V_n = (1/n) sum_s u_s u_s',   u_s = n^(-1/2) sum_{i<=s} (beta_i - bbar_n)
//! ```
//!
//! and it can be assembled from two running sums,
//!
//! ```text
//! A_i = A_{i-1} + i^2 bbar_i bbar_i'      b_i = b_{i-1} + i^2 bbar_i
//! V_n = n^-2 (A_n - bbar_n b_n' - b_n bbar_n' + bbar_n bbar_n' sum_{s<=n} s^2)
//! ```
//!
//! `V_n` is invariant to shifting every iterate by the same vector, so the
//! accumulator runs on `bbar_i - reference` (the initial iterate). Without the
//! shift the terms grow like `n^3 |bbar|^2` and cancel down to `O(n^2)`; with
//! it they stay near the scale of the answer. Both running sums are
//! compensated.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::{two_sum, CompensatedVec};

/// Running mean of `beta_1..beta_i` from the mean of the first `i - 1`.
pub fn update_average(prev: &[f64], beta: &[f64], i: u64) -> Result<Vec<f64>> {
    if i == 0 {
        return Err(Error::ZeroStep);
    }
    if i > 1 && prev.len() != beta.len() {
        return Err(Error::DimensionMismatch {
            expected: prev.len(),
            got: beta.len(),
        });
    }
    let mut out = if i == 1 { vec![0.0; beta.len()] } else { prev.to_vec() };
    update_average_in_place(&mut out, beta, i);
    Ok(out)
}

#[inline]
pub(crate) fn update_average_in_place(avg: &mut [f64], beta: &[f64], i: u64) {
    debug_assert!(i >= 1);
    if i == 1 {
        avg.copy_from_slice(beta);
        return;
    }
    let inv = 1.0 / i as f64;
    for (m, b) in avg.iter_mut().zip(beta) {
        *m += (b - *m) * inv;
    }
}

/// `1^2 + 2^2 + ... + i^2` in exact integer arithmetic.
pub fn sum_of_squares(i: u64) -> u128 {
    let i = i as u128;
    i * (i + 1) * (2 * i + 1) / 6
}

/// Which entries of the scaling matrix are tracked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMode {
    /// Every coordinate, full matrix.
    Full,
    /// A chosen set of coordinates, full matrix over that set.
    Subvector,
    /// A chosen set of coordinates, diagonal only.
    Diagonal,
}

impl ScalingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScalingMode::Full => "full",
            ScalingMode::Subvector => "subvector",
            ScalingMode::Diagonal => "diagonal",
        }
    }
}

/// Running `(A, b)` state of the random-scaling recursion over selected coordinates.
///
/// Full and subvector modes store the upper triangle of `A` packed row by row;
/// diagonal mode stores only `A_jj`. Each stored entry is updated with the same
/// arithmetic in every mode, so a diagonal accumulator reproduces the diagonal
/// of a full one exactly.
#[derive(Debug, Clone)]
pub struct ScalingAccumulator {
    mode: ScalingMode,
    coords: Vec<usize>,
    reference: Vec<f64>,
    a: CompensatedVec,
    b: CompensatedVec,
    i: u64,
    centered: Vec<f64>,
}

impl ScalingAccumulator {
    /// Full-vector accumulator; `reference` is the initial iterate.
    pub fn full(reference: &[f64]) -> Self {
        let coords: Vec<usize> = (0..reference.len()).collect();
        Self::build(ScalingMode::Full, coords, reference.to_vec())
    }

    /// Accumulator over `coords` of a `d`-vector whose initial iterate is `reference`.
    pub fn subvector(coords: &[usize], reference: &[f64]) -> Result<Self> {
        let r = Self::gather_reference(coords, reference)?;
        Ok(Self::build(ScalingMode::Subvector, coords.to_vec(), r))
    }

    pub fn diagonal(coords: &[usize], reference: &[f64]) -> Result<Self> {
        let r = Self::gather_reference(coords, reference)?;
        Ok(Self::build(ScalingMode::Diagonal, coords.to_vec(), r))
    }

    fn gather_reference(coords: &[usize], reference: &[f64]) -> Result<Vec<f64>> {
        if coords.is_empty() {
            return Err(Error::InvalidConfig("no coordinates selected".into()));
        }
        let mut seen = coords.to_vec();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("duplicate coordinate in selection".into()));
        }
        coords
            .iter()
            .map(|&c| {
                reference.get(c).copied().ok_or(Error::DimensionMismatch {
                    expected: reference.len(),
                    got: c + 1,
                })
            })
            .collect()
    }

    fn build(mode: ScalingMode, coords: Vec<usize>, reference: Vec<f64>) -> Self {
        let s = coords.len();
        let stored = match mode {
            ScalingMode::Diagonal => s,
            _ => s * (s + 1) / 2,
        };
        Self {
            mode,
            coords,
            reference,
            a: CompensatedVec::zeros(stored),
            b: CompensatedVec::zeros(s),
            i: 0,
            centered: vec![0.0; s],
        }
    }

    pub fn mode(&self) -> ScalingMode {
        self.mode
    }

    pub fn coords(&self) -> &[usize] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn steps(&self) -> u64 {
        self.i
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    /// Stored (centered) `A` entry at positions `(j, k)` of the selection.
    pub fn a(&self, j: usize, k: usize) -> Option<f64> {
        let (j, k) = if j <= k { (j, k) } else { (k, j) };
        let s = self.dim();
        if k >= s {
            return None;
        }
        match self.mode {
            ScalingMode::Diagonal => (j == k).then(|| self.a.get(j)),
            _ => Some(self.a.get(packed_index(s, j, k))),
        }
    }

    /// Stored (centered) `b` entry at position `j` of the selection.
    pub fn b(&self, j: usize) -> Option<f64> {
        (j < self.dim()).then(|| self.b.get(j))
    }

    /// Fold in the running mean after observation `i`.
    pub fn accumulate(&mut self, beta_bar: &[f64], i: u64) -> Result<()> {
        if i != self.i + 1 {
            return Err(Error::OutOfOrder {
                expected: self.i + 1,
                got: i,
            });
        }
        for ((c, &coord), r) in self.centered.iter_mut().zip(&self.coords).zip(&self.reference) {
            let v = beta_bar.get(coord).ok_or(Error::DimensionMismatch {
                expected: coord + 1,
                got: beta_bar.len(),
            })?;
            *c = v - r;
        }
        let w = (i as f64) * (i as f64);
        let s = self.dim();
        match self.mode {
            ScalingMode::Diagonal => {
                for j in 0..s {
                    let wd = w * self.centered[j];
                    self.b.add(j, wd);
                    self.a.add(j, wd * self.centered[j]);
                }
            }
            _ => {
                let mut idx = 0;
                for j in 0..s {
                    let wd = w * self.centered[j];
                    self.b.add(j, wd);
                    for k in j..s {
                        self.a.add(idx, wd * self.centered[k]);
                        idx += 1;
                    }
                }
            }
        }
        self.i = i;
        Ok(())
    }

    fn centered_mean(&self, beta_bar_n: &[f64]) -> Result<Vec<f64>> {
        self.coords
            .iter()
            .zip(&self.reference)
            .map(|(&c, r)| {
                beta_bar_n.get(c).map(|v| v - r).ok_or(Error::DimensionMismatch {
                    expected: c + 1,
                    got: beta_bar_n.len(),
                })
            })
            .collect()
    }

    fn entry(&self, stored: usize, dj: f64, dk: f64, bj: f64, bk: f64, ssq: f64) -> f64 {
        // A_jk - dj*bk - bj*dk + dj*dk*S, each product split exactly and summed compensated.
        let mut acc = Compensated::default();
        acc.add(self.a.get(stored));
        acc.add_product(-dj, bk);
        acc.add_product(-bj, dk);
        let p = dj * dk;
        let p_err = dj.mul_add(dk, -p);
        acc.add_product(p, ssq);
        acc.add(p_err * ssq);
        acc.value()
    }

    /// Assemble `V_n` from the accumulated sums and the final mean `beta_bar_n`.
    pub fn finalize(&self, beta_bar_n: &[f64]) -> Result<RandomScalingMatrix> {
        let n = self.i;
        if n < 2 {
            return Err(Error::InsufficientObservations { n, required: 2 });
        }
        let delta = self.centered_mean(beta_bar_n)?;
        let bvals = self.b.values();
        let ssq = sum_of_squares(n) as f64;
        let scale = 1.0 / ((n as f64) * (n as f64));
        let s = self.dim();
        let values = match self.mode {
            ScalingMode::Diagonal => (0..s)
                .map(|j| self.entry(j, delta[j], delta[j], bvals[j], bvals[j], ssq) * scale)
                .collect(),
            _ => {
                let mut v = vec![0.0; s * s];
                let mut idx = 0;
                for j in 0..s {
                    for k in j..s {
                        let e = self.entry(idx, delta[j], delta[k], bvals[j], bvals[k], ssq) * scale;
                        v[j * s + k] = e;
                        v[k * s + j] = e;
                        idx += 1;
                    }
                }
                v
            }
        };
        Ok(RandomScalingMatrix {
            mode: self.mode,
            coords: self.coords.clone(),
            n,
            values,
        })
    }

    /// Diagonal of `V_i` at the current step, written into `out`.
    pub(crate) fn diagonal_into(&self, beta_bar: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.i;
        if n < 2 {
            return Err(Error::InsufficientObservations { n, required: 2 });
        }
        let ssq = sum_of_squares(n) as f64;
        let scale = 1.0 / ((n as f64) * (n as f64));
        let s = self.dim();
        for j in 0..s {
            let d = beta_bar[self.coords[j]] - self.reference[j];
            let b = self.b.get(j);
            let stored = match self.mode {
                ScalingMode::Diagonal => j,
                _ => packed_index(s, j, j),
            };
            out[j] = self.entry(stored, d, d, b, b, ssq) * scale;
        }
        Ok(())
    }
}

fn packed_index(s: usize, j: usize, k: usize) -> usize {
    debug_assert!(j <= k && k < s);
    // Row j starts after sum_{r<j} (s - r) entries.
    j * s - j * j.saturating_sub(1) / 2 + (k - j)
}

#[derive(Default)]
struct Compensated {
    sum: f64,
    comp: f64,
}

impl Compensated {
    fn add(&mut self, v: f64) {
        let (s, e) = two_sum(self.sum, v);
        self.sum = s;
        self.comp += e;
    }

    fn add_product(&mut self, x: f64, y: f64) {
        let p = x * y;
        self.add(p);
        self.comp += x.mul_add(y, -p);
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Finalized `V_n` over a coordinate selection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RandomScalingMatrix {
    mode: ScalingMode,
    coords: Vec<usize>,
    n: u64,
    /// `s*s` row-major, or the `s` diagonal entries in diagonal mode.
    values: Vec<f64>,
}

impl RandomScalingMatrix {
    /// Wrap a dense symmetric matrix (used by oracles and tests).
    pub fn from_dense(coords: Vec<usize>, n: u64, m: &DMatrix<f64>) -> Result<Self> {
        let s = coords.len();
        if m.nrows() != s || m.ncols() != s {
            return Err(Error::DimensionMismatch {
                expected: s,
                got: m.nrows(),
            });
        }
        let mut values = vec![0.0; s * s];
        for j in 0..s {
            for k in 0..s {
                values[j * s + k] = 0.5 * (m[(j, k)] + m[(k, j)]);
            }
        }
        Ok(Self {
            mode: ScalingMode::Subvector,
            coords,
            n,
            values,
        })
    }

    pub fn mode(&self) -> ScalingMode {
        self.mode
    }

    pub fn coords(&self) -> &[usize] {
        &self.coords
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn position(&self, coord: usize) -> Option<usize> {
        self.coords.iter().position(|&c| c == coord)
    }

    /// Entry at selection positions `(j, k)`; `None` for off-diagonals in diagonal mode.
    pub fn get(&self, j: usize, k: usize) -> Option<f64> {
        let s = self.dim();
        if j >= s || k >= s {
            return None;
        }
        match self.mode {
            ScalingMode::Diagonal => (j == k).then(|| self.values[j]),
            _ => Some(self.values[j * s + k]),
        }
    }

    /// Entry addressed by original coordinate indices.
    pub fn entry(&self, coord_a: usize, coord_b: usize) -> Option<f64> {
        self.get(self.position(coord_a)?, self.position(coord_b)?)
    }

    /// `V_jj` for original coordinate `coord`.
    pub fn variance(&self, coord: usize) -> Option<f64> {
        self.entry(coord, coord)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|j| self.get(j, j).unwrap()).collect()
    }

    /// Dense copy; `None` in diagonal mode.
    pub fn to_dense(&self) -> Option<DMatrix<f64>> {
        if self.mode == ScalingMode::Diagonal {
            return None;
        }
        let s = self.dim();
        Some(DMatrix::from_row_slice(s, s, &self.values))
    }

    /// Rows of the matrix (diagonal mode yields a single row of variances).
    pub fn rows(&self) -> Vec<Vec<f64>> {
        let s = self.dim();
        match self.mode {
            ScalingMode::Diagonal => vec![self.values.clone()],
            _ => self.values.chunks(s).map(<[f64]>::to_vec).collect(),
        }
    }
}
