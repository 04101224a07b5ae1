//! Small numerical kernels shared across modules.

use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile. `p` must lie in (0, 1).
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Error-free transformation of `a + b` (Knuth's TwoSum): `s + err == a + b` exactly.
#[inline]
pub fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

/// Compensated accumulator for a vector of running sums.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensatedVec {
    sum: Vec<f64>,
    comp: Vec<f64>,
}

impl CompensatedVec {
    pub fn zeros(len: usize) -> Self {
        Self {
            sum: vec![0.0; len],
            comp: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sum.is_empty()
    }

    #[inline]
    pub fn add(&mut self, k: usize, value: f64) {
        let (s, e) = two_sum(self.sum[k], value);
        self.sum[k] = s;
        self.comp[k] += e;
    }

    #[inline]
    pub fn get(&self, k: usize) -> f64 {
        self.sum[k] + self.comp[k]
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.get(k)).collect()
    }
}

/// Linear-interpolation sample quantile (R type 7) of an ascending slice.
pub fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_helpers_agree() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.959_963_984_540_054) - 0.975).abs() < 1e-10);
        assert!((normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-9);
        assert!((normal_pdf(0.0) - INV_SQRT_2PI).abs() < 1e-16);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut acc = CompensatedVec::zeros(1);
        acc.add(0, 1e16);
        for _ in 0..1000 {
            acc.add(0, 1.0);
        }
        acc.add(0, -1e16);
        assert_eq!(acc.get(0), 1000.0);
    }

    #[test]
    fn type7_quantile() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(sorted_quantile(&v, 0.0), 1.0);
        assert_eq!(sorted_quantile(&v, 1.0), 4.0);
        assert!((sorted_quantile(&v, 0.5) - 2.5).abs() < 1e-15);
    }
}
