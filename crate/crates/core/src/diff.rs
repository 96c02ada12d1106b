//! Scaled difference operators on spline coefficients.
//!
//! `D^{(p+1)} = D^{(1)} Delta^{(2)} ... Delta^{(p+1)}` maps the `l + p`
//! coefficients of an order-`p` spline to `l - 1` values, one per interior
//! knot; entry `i` vanishes exactly when the spline's polynomial pieces on
//! either side of `t_i` coincide. The square extension `D_hat` appends `p + 1`
//! rows so that the map becomes invertible, and its inverse `Sigma` is
//! assembled from closed-form triangular factors.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::knots::KnotGrid;

/// `(D_plus, D_minus, D)` of first order, each `(l - 1) x l`.
pub fn first_diff_matrices(l: usize) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    if l < 2 {
        return Err(Error::Dimension(format!(
            "first differences need l >= 2, got {l}"
        )));
    }
    let mut plus = DMatrix::zeros(l - 1, l);
    let mut minus = DMatrix::zeros(l - 1, l);
    for i in 0..l - 1 {
        plus[(i, i + 1)] = 1.0;
        minus[(i, i)] = 1.0;
    }
    let d = &plus - &minus;
    Ok((plus, minus, d))
}

/// Knot span `t_i - t_{i-q}` dividing row `i` (1-based) of `Delta^{(q+1)}`.
#[inline]
fn span(grid: &KnotGrid, i: usize, q: usize) -> f64 {
    grid.t(i as isize) - grid.t(i as isize - q as isize)
}

/// The `(l - 1 + q) x (l + q)` matrix `Delta^{(q+1)}`; row `i` holds
/// `(-1, 1) / (t_i - t_{i-q})` on columns `i, i + 1`.
pub fn delta_matrix(grid: &KnotGrid, q: usize) -> Result<DMatrix<f64>> {
    let p = grid.order();
    if q < 1 || q > p {
        return Err(Error::Dimension(format!(
            "delta order q = {q} outside 1..={p}"
        )));
    }
    let l = grid.intervals();
    let rows = l - 1 + q;
    let mut m = DMatrix::zeros(rows, l + q);
    for r in 0..rows {
        let w = 1.0 / span(grid, r + 1, q);
        m[(r, r)] = -w;
        m[(r, r + 1)] = w;
    }
    Ok(m)
}

/// `(D_plus, D_minus, D)` of order `p + 1`, each `(l - 1) x (l + p)`.
pub fn higher_diff(grid: &KnotGrid) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let (mut plus, mut minus, _) = first_diff_matrices(grid.intervals())?;
    for q in 1..=grid.order() {
        let delta = delta_matrix(grid, q)?;
        plus = &plus * &delta;
        minus = &minus * &delta;
    }
    let d = &plus - &minus;
    Ok((plus, minus, d))
}

/// Difference operators of a grid together with their invertible extension.
#[derive(Debug, Clone)]
pub struct DifferenceOperators {
    pub grid: KnotGrid,
    pub d_plus: DMatrix<f64>,
    pub d_minus: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub d_hat: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub sigma1: DMatrix<f64>,
    pub sigma2: DMatrix<f64>,
    /// Bottom `(p + 1) x (l + p)` block of `d_hat`.
    pub a: DMatrix<f64>,
    pub s: Vec<f64>,
}

impl DifferenceOperators {
    /// Builds the operators with unit expansion scalars.
    pub fn new(grid: &KnotGrid) -> Result<Self> {
        Self::extend_and_invert(grid, &vec![1.0; grid.order() + 1])
    }

    /// Builds `D_hat = D_hat^{(1)} Delta_hat^{(2)} ... Delta_hat^{(p+1)}` using
    /// the nonzero expansion scalars `s_1, ..., s_{p+1}`, and its inverse
    /// `Sigma = Delta_hat^{(p+1)^-1} ... Delta_hat^{(2)^-1} D_hat^{(1)^-1}` from the
    /// closed-form factor inverses.
    pub fn extend_and_invert(grid: &KnotGrid, s: &[f64]) -> Result<Self> {
        let p = grid.order();
        let l = grid.intervals();
        if s.len() != p + 1 {
            return Err(Error::Dimension(format!(
                "expected {} expansion scalars, got {}",
                p + 1,
                s.len()
            )));
        }
        if let Some(i) = s.iter().position(|&v| v == 0.0 || !v.is_finite()) {
            return Err(Error::Singular { index: i + 1 });
        }
        let (d_plus, d_minus, d) = higher_diff(grid)?;
        let n = l + p;

        let mut d_hat = DMatrix::zeros(n, n);
        for r in 0..l - 1 {
            d_hat[(r, r)] = -1.0;
            d_hat[(r, r + 1)] = 1.0;
        }
        for r in l - 1..n {
            d_hat[(r, r)] = s[0];
        }
        for q in 1..=p {
            d_hat = &d_hat * delta_hat(grid, q, s[q]);
        }

        let mut sigma = first_diff_hat_inverse(l, p, s[0]);
        for q in 1..=p {
            apply_delta_hat_inverse(grid, q, s[q], &mut sigma);
        }

        let sigma1 = sigma.columns(0, l - 1).into_owned();
        let sigma2 = sigma.columns(l - 1, p + 1).into_owned();
        let a = d_hat.rows(l - 1, p + 1).into_owned();
        Ok(Self {
            grid: grid.clone(),
            d_plus,
            d_minus,
            d,
            d_hat,
            sigma,
            sigma1,
            sigma2,
            a,
            s: s.to_vec(),
        })
    }

    /// `Sigma (beta; beta_prime)`.
    pub fn lift(&self, beta: &DVector<f64>, beta_prime: &DVector<f64>) -> DVector<f64> {
        &self.sigma1 * beta + &self.sigma2 * beta_prime
    }

    /// Knots in use by the spline with coefficients `alpha`, using the
    /// default tolerance of `1e-8` times the largest row magnitude
    /// `sum_j |D_ij alpha_j|`.
    pub fn active_knots(&self, alpha: &DVector<f64>) -> Vec<usize> {
        let scale = (0..self.d.nrows())
            .map(|i| {
                self.d
                    .row(i)
                    .iter()
                    .zip(alpha.iter())
                    .map(|(a, b)| (a * b).abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max);
        active_knots(&self.d, alpha, 1e-8 * scale)
    }
}

/// `Delta_hat^{(q+1)}`: `Delta^{(q+1)}` padded to `(l + p) x (l + p)` with `s` on
/// the trailing diagonal.
fn delta_hat(grid: &KnotGrid, q: usize, s: f64) -> DMatrix<f64> {
    let l = grid.intervals();
    let n = l + grid.order();
    let rows = l - 1 + q;
    let mut m = DMatrix::zeros(n, n);
    for r in 0..rows {
        let w = 1.0 / span(grid, r + 1, q);
        m[(r, r)] = -w;
        m[(r, r + 1)] = w;
    }
    for r in rows..n {
        m[(r, r)] = s;
    }
    m
}

/// Closed-form `D_hat^{(1)^-1} = [[-U, S], [0, I / s]]` where `U` is the
/// all-ones upper triangle and `S` has `1 / s` down its first column.
pub fn first_diff_hat_inverse(l: usize, p: usize, s: f64) -> DMatrix<f64> {
    let n = l + p;
    let mut m = DMatrix::zeros(n, n);
    for r in 0..l - 1 {
        for c in r..l - 1 {
            m[(r, c)] = -1.0;
        }
        m[(r, l - 1)] = 1.0 / s;
    }
    for r in l - 1..n {
        m[(r, r)] = 1.0 / s;
    }
    m
}

/// Left-multiplies `m` by the closed-form inverse of `Delta_hat^{(q+1)}`:
/// rows `i <= l - 1 + q` become `-sum_{j >= i} d_j m_j + m_{l+q} / s` with
/// `d_j = t_j - t_{j-q}`, and the remaining rows are scaled by `1 / s`.
fn apply_delta_hat_inverse(grid: &KnotGrid, q: usize, s: f64, m: &mut DMatrix<f64>) {
    let l = grid.intervals();
    let top = l - 1 + q;
    let inv_s = 1.0 / s;
    let pivot = m.row(top).into_owned() * inv_s;
    let mut acc = nalgebra::RowDVector::<f64>::zeros(m.ncols());
    for r in (0..top).rev() {
        acc += m.row(r) * span(grid, r + 1, q);
        m.row_mut(r).copy_from(&(&pivot - &acc));
    }
    for r in top..m.nrows() {
        m.row_mut(r).scale_mut(inv_s);
    }
}

/// 1-based indices `i` of interior knots with `|(D alpha)_i| > tol`.
pub fn active_knots(d: &DMatrix<f64>, alpha: &DVector<f64>, tol: f64) -> Vec<usize> {
    let beta = d * alpha;
    beta.iter()
        .enumerate()
        .filter(|(_, v)| v.abs() > tol)
        .map(|(i, _)| i + 1)
        .collect()
}

/// Ordinary `order`-th difference matrix of size `(dim - order) x dim`
/// (zero rows when `dim <= order`).
pub fn ordinary_difference(dim: usize, order: usize) -> DMatrix<f64> {
    let mut m = DMatrix::identity(dim, dim);
    for _ in 0..order {
        let rows = m.nrows();
        if rows == 0 {
            break;
        }
        let mut next = DMatrix::zeros(rows - 1, dim);
        for r in 0..rows - 1 {
            let diff = m.row(r + 1) - m.row(r);
            next.row_mut(r).copy_from(&diff);
        }
        m = next;
    }
    m
}
