//! Reduction of the penalized spline problem to the knot-difference variables.
//!
//! With `beta = D alpha` and the extra coordinates `beta'` of the invertible
//! extension, the fit is
//!
//! ```text
//! G(beta, beta') = 1/2 |y - S1 beta - S2 beta'|^2 + c/2 |T1 beta + T2 beta'|^2 + gamma T_K(beta)
//! ```
//!
//! where `S = B Sigma` and `T = Dsm Sigma` are split into their first `l - 1`
//! and last `p + 1` columns. Minimizing over `beta'` in closed form leaves
//!
//! ```text
//! F(beta) = 1/2 |z1 - L1 beta|^2 + c/2 |z2 - L2 beta|^2 + gamma T_K(beta)
//! ```
//!
//! and the minimizer `g(beta) = H1 y - H2 beta` lifts any `beta` back to
//! spline coefficients.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::diff::{ordinary_difference, DifferenceOperators};
use crate::error::{Error, Result};
use crate::knots::{KnotGrid, SplineModel};
use crate::trimmed::trimmed_l1;

/// Safety factor applied to the exact-penalty bound by default.
pub const DEFAULT_GAMMA_SAFETY: f64 = 1.001;

/// Threshold on the singular-value ratio of the column-equilibrated `B Sigma2`.
pub const ASSUMPTION_RATIO_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssumptionCheck {
    pub holds: bool,
    /// `sigma_min / sigma_max` of `B Sigma2` after scaling its columns to unit norm.
    pub ratio: f64,
}

/// Whether `B Sigma2` has full column rank, i.e. whether the degree-`p`
/// polynomial least-squares fit of the data is unique.
pub fn check_assumption(b: &DMatrix<f64>, sigma2: &DMatrix<f64>) -> AssumptionCheck {
    let s2 = b * sigma2;
    if s2.nrows() < s2.ncols() || s2.ncols() == 0 {
        return AssumptionCheck {
            holds: false,
            ratio: 0.0,
        };
    }
    let mut scaled = s2;
    for mut col in scaled.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    let sv = scaled.singular_values();
    let max = sv.max();
    let ratio = if max > 0.0 { sv.min() / max } else { 0.0 };
    AssumptionCheck {
        holds: ratio > ASSUMPTION_RATIO_TOL,
        ratio,
    }
}

/// Ordinary second-order difference matrix on `dim` coefficients, the default
/// smoothing operator `Dsm`.
pub fn default_smoothing_matrix(dim: usize) -> DMatrix<f64> {
    ordinary_difference(dim, 2)
}

#[derive(Debug, Clone)]
pub struct ReducedProblem {
    pub b: DMatrix<f64>,
    pub dsm: DMatrix<f64>,
    pub ops: DifferenceOperators,
    pub c: f64,
    pub y: DVector<f64>,
    pub s1: DMatrix<f64>,
    pub s2: DMatrix<f64>,
    pub t1: DMatrix<f64>,
    pub t2: DMatrix<f64>,
    pub h1: DMatrix<f64>,
    pub h2: DMatrix<f64>,
    pub z1: DVector<f64>,
    pub z2: DVector<f64>,
    pub l1: DMatrix<f64>,
    pub l2: DMatrix<f64>,
    /// `H1 y`, the `beta'` minimizer at `beta = 0`.
    pub h1y: DVector<f64>,
    pub gamma: f64,
}

impl ReducedProblem {
    /// Reduces the problem for the design `b`, smoothing matrix `dsm` and
    /// response `y`; `gamma` is set to the exact-penalty bound times
    /// [`DEFAULT_GAMMA_SAFETY`].
    pub fn reduce(
        b: DMatrix<f64>,
        dsm: DMatrix<f64>,
        ops: DifferenceOperators,
        y: DVector<f64>,
        c: f64,
    ) -> Result<Self> {
        if !(c >= 0.0) || !c.is_finite() {
            return Err(Error::Parameter(format!(
                "smoothing weight c must be >= 0, got {c}"
            )));
        }
        let dim = ops.sigma.nrows();
        if b.ncols() != dim || dsm.ncols() != dim || b.nrows() != y.len() {
            return Err(Error::Dimension(format!(
                "design {}x{}, smoothing {}x{}, response {}, coefficients {dim}",
                b.nrows(),
                b.ncols(),
                dsm.nrows(),
                dsm.ncols(),
                y.len()
            )));
        }
        let check = check_assumption(&b, &ops.sigma2);
        if !check.holds {
            return Err(Error::RankDeficient(format!(
                "B Sigma2 is not of full column rank (singular-value ratio {:.3e}); \
                 the degree-{} polynomial fit is not unique",
                check.ratio,
                ops.grid.order()
            )));
        }

        let s1 = &b * &ops.sigma1;
        let s2 = &b * &ops.sigma2;
        let t1 = &dsm * &ops.sigma1;
        let t2 = &dsm * &ops.sigma2;

        let normal = s2.tr_mul(&s2) + t2.tr_mul(&t2) * c;
        let solver = EquilibratedCholesky::new(normal)?;
        let rhs2 = s2.tr_mul(&s1) + t2.tr_mul(&t1) * c;
        let h1 = solver.solve(&s2.transpose());
        let h2 = solver.solve(&rhs2);

        let h1y = &h1 * &y;
        let z1 = &y - &s2 * &h1y;
        let z2 = &t2 * &h1y;
        let l1 = &s1 - &s2 * &h2;
        let l2 = &t2 * &h2 - &t1;

        let mut rp = Self {
            b,
            dsm,
            ops,
            c,
            y,
            s1,
            s2,
            t1,
            t2,
            h1,
            h2,
            z1,
            z2,
            l1,
            l2,
            h1y,
            gamma: 0.0,
        };
        rp.gamma = rp.exact_penalty_gamma(DEFAULT_GAMMA_SAFETY)?;
        Ok(rp)
    }

    /// Builds the design and operators for `grid` from scratch, with the
    /// default second-difference smoothing matrix.
    pub fn from_data(grid: &KnotGrid, xs: &[f64], y: &[f64], c: f64) -> Result<Self> {
        if xs.len() != y.len() {
            return Err(Error::Dimension(format!(
                "{} x values but {} responses",
                xs.len(),
                y.len()
            )));
        }
        let b = grid.design_matrix(xs)?;
        let ops = DifferenceOperators::new(grid)?;
        let dsm = default_smoothing_matrix(grid.dim());
        Self::reduce(b, dsm, ops, DVector::from_column_slice(y), c)
    }

    /// Number of reduced variables, `l - 1`.
    pub fn dim(&self) -> usize {
        self.l1.ncols()
    }

    pub fn grid(&self) -> &KnotGrid {
        &self.ops.grid
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    /// `max_j (|l1_j| + sqrt(c) |l2_j|) * sqrt(|z1|^2 + c |z2|^2)`.
    pub fn exact_penalty_bound(&self) -> f64 {
        let root_c = self.c.sqrt();
        let col_max = (0..self.l1.ncols())
            .map(|j| {
                let second = if self.c > 0.0 {
                    root_c * self.l2.column(j).norm()
                } else {
                    0.0
                };
                self.l1.column(j).norm() + second
            })
            .fold(0.0, f64::max);
        col_max * (self.z1.norm_squared() + self.c * self.z2.norm_squared()).sqrt()
    }

    /// The exact-penalty bound times `safety`, which must exceed 1.
    pub fn exact_penalty_gamma(&self, safety: f64) -> Result<f64> {
        if !(safety > 1.0) {
            return Err(Error::Parameter(format!(
                "gamma safety factor must exceed 1, got {safety}"
            )));
        }
        Ok(safety * self.exact_penalty_bound())
    }

    /// Residuals `(z1 - L1 beta, z2 - L2 beta)`; the second is empty when `c = 0`.
    pub fn residuals(&self, beta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let r1 = &self.z1 - &self.l1 * beta;
        let r2 = if self.c > 0.0 {
            &self.z2 - &self.l2 * beta
        } else {
            DVector::zeros(0)
        };
        (r1, r2)
    }

    pub(crate) fn smooth_from_residuals(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> f64 {
        let second = if self.c > 0.0 {
            0.5 * self.c * r2.norm_squared()
        } else {
            0.0
        };
        0.5 * r1.norm_squared() + second
    }

    pub(crate) fn grad_from_residuals(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> DVector<f64> {
        let mut g = -self.l1.tr_mul(r1);
        if self.c > 0.0 {
            g -= self.l2.tr_mul(r2) * self.c;
        }
        g
    }

    /// Smooth part `h(beta)` of the reduced objective.
    pub fn smooth(&self, beta: &DVector<f64>) -> f64 {
        let (r1, r2) = self.residuals(beta);
        self.smooth_from_residuals(&r1, &r2)
    }

    /// `grad h(beta) = -L1^T (z1 - L1 beta) - c L2^T (z2 - L2 beta)`.
    pub fn grad_h(&self, beta: &DVector<f64>) -> DVector<f64> {
        let (r1, r2) = self.residuals(beta);
        self.grad_from_residuals(&r1, &r2)
    }

    /// `F(beta) = h(beta) + gamma T_K(beta)`.
    pub fn objective(&self, beta: &DVector<f64>, k: usize) -> Result<f64> {
        Ok(self.smooth(beta) + self.gamma * trimmed_l1(beta.as_slice(), k)?)
    }

    /// `G(beta, beta')` on the unreduced variables.
    pub fn objective_g(&self, beta: &DVector<f64>, beta_prime: &DVector<f64>, k: usize) -> Result<f64> {
        let fit = &self.y - &self.s1 * beta - &self.s2 * beta_prime;
        let rough = &self.t1 * beta + &self.t2 * beta_prime;
        Ok(0.5 * fit.norm_squared()
            + 0.5 * self.c * rough.norm_squared()
            + self.gamma * trimmed_l1(beta.as_slice(), k)?)
    }

    /// `g(beta) = H1 y - H2 beta`, the optimal `beta'` for a given `beta`.
    pub fn partial_minimizer(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.h1y - &self.h2 * beta
    }

    /// Spline coefficients `alpha = Sigma (beta; g(beta))`.
    pub fn lift(&self, beta: &DVector<f64>) -> DVector<f64> {
        self.ops.lift(beta, &self.partial_minimizer(beta))
    }

    pub fn spline(&self, beta: &DVector<f64>) -> SplineModel {
        SplineModel::new(self.grid().clone(), self.lift(beta).as_slice().to_vec())
            .expect("lifted coefficients match the grid dimension")
    }
}

/// Cholesky factorization of a symmetric positive-definite matrix after
/// symmetric diagonal scaling to unit diagonal.
struct EquilibratedCholesky {
    scale: DVector<f64>,
    factor: Cholesky<f64, Dyn>,
}

impl EquilibratedCholesky {
    fn new(m: DMatrix<f64>) -> Result<Self> {
        let scale = DVector::from_iterator(
            m.nrows(),
            m.diagonal().iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 1.0 }),
        );
        let mut scaled = m;
        for i in 0..scaled.nrows() {
            for j in 0..scaled.ncols() {
                scaled[(i, j)] *= scale[i] * scale[j];
            }
        }
        let factor = Cholesky::new(scaled).ok_or_else(|| {
            Error::RankDeficient("reduced normal matrix is not positive definite".into())
        })?;
        Ok(Self { scale, factor })
    }

    fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = rhs.clone();
        for (i, mut row) in x.row_iter_mut().enumerate() {
            row *= self.scale[i];
        }
        self.factor.solve_mut(&mut x);
        for (i, mut row) in x.row_iter_mut().enumerate() {
            row *= self.scale[i];
        }
        x
    }
}
