//! Mixed-effects estimation: Gaussian models via profiled deviance and
//! binomial-logit models via the Laplace approximation.
//!
//! Both estimators share the covariance parameterization in this module and
//! the penalized least-squares solver in [`solver`]: each random term's
//! coefficient covariance (relative to the residual variance) is written as
//! `lambda * lambda'` with `lambda` lower triangular, so the optimizer works
//! on an almost-unconstrained scale (only diagonals are bounded at zero, which
//! makes variance-to-zero boundary fits representable rather than failures).

pub mod glmm;
pub mod lmm;
pub(crate) mod solver;

pub use glmm::{fit_binomial, fit_binomial_design, wald_test, FittedGlmm, GlmmError, WaldTest};
pub use lmm::{
    compare_ladder, compose_coefficients, effect_multiplier, fit_lmm, fit_model_rows, lrt,
    profiled_deviance, BlupTable, ComparisonRow, Criterion, EffectMultiplier, FittedLmm,
    LadderComparison, LmmError, LrtResult, VarComponents,
};

use crate::design::DesignMatrices;
use crate::linalg::DMat;
use crate::optim::Bound;
use crate::scalar::Scalar;

/// A lower-triangular factor, packed by columns (k = 2: `[l00, l10, l11]`).
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular<S> {
    k: usize,
    packed: Vec<S>,
}

impl<S: Scalar> LowerTriangular<S> {
    pub fn identity(k: usize) -> Self {
        let mut lt = Self::zeros(k);
        for j in 0..k {
            let idx = lt.packed_index(j, j);
            lt.packed[idx] = S::one();
        }
        lt
    }

    pub fn zeros(k: usize) -> Self {
        LowerTriangular { k, packed: vec![S::zero(); k * (k + 1) / 2] }
    }

    pub fn from_packed(k: usize, packed: Vec<S>) -> Self {
        assert_eq!(packed.len(), k * (k + 1) / 2, "packed length must be k(k+1)/2");
        LowerTriangular { k, packed }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn packed(&self) -> &[S] {
        &self.packed
    }

    pub fn n_params(&self) -> usize {
        self.packed.len()
    }

    /// Position of entry (i, j), i >= j, in the column-packed layout.
    fn packed_index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i >= j && i < self.k);
        // Column c holds (k - c) entries.
        let offset: usize = (0..j).map(|c| self.k - c).sum();
        offset + (i - j)
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        if i >= j {
            self.packed[self.packed_index(i, j)]
        } else {
            S::zero()
        }
    }

    /// Whether packed slot `idx` holds a diagonal entry (bounded at zero).
    pub fn is_diagonal_slot(&self, idx: usize) -> bool {
        let mut offset = 0;
        for c in 0..self.k {
            if idx == offset {
                return true;
            }
            offset += self.k - c;
        }
        false
    }

    /// Dense k x k matrix (zeros above the diagonal).
    pub fn to_matrix(&self) -> DMat<S> {
        let mut m = DMat::zeros(self.k, self.k);
        for i in 0..self.k {
            for j in 0..=i {
                m[(i, j)] = self.get(i, j);
            }
        }
        m
    }

    /// lambda * lambda', the relative covariance this factor represents.
    pub fn outer(&self) -> DMat<S> {
        let m = self.to_matrix();
        let mut out = DMat::zeros(self.k, self.k);
        for i in 0..self.k {
            for j in 0..self.k {
                let mut s = S::zero();
                for c in 0..self.k {
                    s = s + m[(i, c)] * m[(j, c)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }
}

/// Relative covariance factors for every random term, in design order.
#[derive(Debug, Clone, PartialEq)]
pub struct CovParams<S> {
    pub terms: Vec<LowerTriangular<S>>,
}

impl<S: Scalar> CovParams<S> {
    pub fn identity(dims: &[usize]) -> Self {
        CovParams { terms: dims.iter().map(|&k| LowerTriangular::identity(k)).collect() }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        CovParams { terms: dims.iter().map(|&k| LowerTriangular::zeros(k)).collect() }
    }

    pub fn dims_of<T: Scalar>(design: &DesignMatrices<T>) -> Vec<usize> {
        design.terms.iter().map(|t| t.n_coords()).collect()
    }

    /// Total free parameters across terms.
    pub fn n_params(&self) -> usize {
        self.terms.iter().map(|t| t.n_params()).sum()
    }

    /// Flatten to the optimizer's parameter vector (term-major, column-packed).
    pub fn to_theta(&self) -> Vec<S> {
        self.terms.iter().flat_map(|t| t.packed().iter().copied()).collect()
    }

    pub fn from_theta(dims: &[usize], theta: &[S]) -> Self {
        let expected: usize = dims.iter().map(|&k| k * (k + 1) / 2).sum();
        assert_eq!(theta.len(), expected, "theta length must match term dimensions");
        let mut terms = Vec::with_capacity(dims.len());
        let mut at = 0;
        for &k in dims {
            let len = k * (k + 1) / 2;
            terms.push(LowerTriangular::from_packed(k, theta[at..at + len].to_vec()));
            at += len;
        }
        CovParams { terms }
    }

    /// Box constraints matching the packing: diagonals >= 0, off-diagonals free.
    pub fn bounds(dims: &[usize]) -> Vec<Bound<S>> {
        let mut bounds = Vec::new();
        for &k in dims {
            let probe: LowerTriangular<S> = LowerTriangular::zeros(k);
            for idx in 0..probe.n_params() {
                if probe.is_diagonal_slot(idx) {
                    bounds.push(Bound::at_least(S::zero()));
                } else {
                    bounds.push(Bound::free());
                }
            }
        }
        bounds
    }

    /// True when any diagonal entry sits (numerically) on the zero boundary.
    pub fn on_boundary(&self, tol: S) -> bool {
        self.terms
            .iter()
            .any(|t| (0..t.k()).any(|j| t.get(j, j) <= tol))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packing_round_trips_in_column_order() {
        let lt = LowerTriangular::from_packed(2, vec![1.5, -0.25, 0.75]);
        assert_eq!(lt.get(0, 0), 1.5);
        assert_eq!(lt.get(1, 0), -0.25);
        assert_eq!(lt.get(1, 1), 0.75);
        assert_eq!(lt.get(0, 1), 0.0);
        let cov = CovParams { terms: vec![lt, LowerTriangular::identity(1)] };
        assert_eq!(cov.to_theta(), vec![1.5, -0.25, 0.75, 1.0]);
        let back = CovParams::from_theta(&[2, 1], &cov.to_theta());
        assert_eq!(back, cov);
        assert_eq!(cov.n_params(), 4);
    }

    #[test]
    fn diagonal_slots_are_bounded_and_off_diagonals_free() {
        let bounds: Vec<Bound<f64>> = CovParams::bounds(&[2, 1]);
        // Packed [l00, l10, l11] + [l00]: slots 0, 2, 3 are diagonals.
        let lower: Vec<f64> = bounds.iter().map(|b| b.lower).collect();
        assert_eq!(lower, vec![0.0, f64::NEG_INFINITY, 0.0, 0.0]);
        assert!(bounds.iter().all(|b| b.upper == f64::INFINITY));
    }

    #[test]
    fn outer_reconstructs_relative_covariance() {
        let lt = LowerTriangular::from_packed(2, vec![2.0, -1.0, 0.5]);
        let m = lt.outer();
        assert_eq!(m[(0, 0)], 4.0);
        assert_eq!(m[(1, 0)], -2.0);
        assert_eq!(m[(0, 1)], -2.0);
        assert_eq!(m[(1, 1)], 1.25);
    }

    #[test]
    fn boundary_detection_sees_zero_diagonals() {
        let cov = CovParams::from_theta(&[2], &[1.0, 0.3, 0.0]);
        assert!(cov.on_boundary(1e-8));
        let interior = CovParams::from_theta(&[2], &[1.0, 0.3, 0.2]);
        assert!(!interior.on_boundary(1e-8));
    }

    #[test]
    fn identity_start_matches_dims() {
        let cov: CovParams<f64> = CovParams::identity(&[2, 2]);
        assert_eq!(cov.to_theta(), vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
    }
}
