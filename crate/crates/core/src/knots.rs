//! Knot grids, B-spline basis evaluation and design matrices.
//!
//! A grid of order `p` with `l` intervals stores the `l + 2p + 1` knots
//! `t_{-p} < ... < t_0 < ... < t_l < ... < t_{l+p}`. The data interval is the
//! half-open `[t_0, t_l)` and the spline space is spanned by the `l + p`
//! functions `B_{-p}, ..., B_{l-1}` of order `p`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotGrid {
    order: usize,
    intervals: usize,
    knots: Vec<f64>,
}

impl KnotGrid {
    /// Builds a grid from the full knot vector `t_{-p}, ..., t_{l+p}`.
    pub fn new(knots: Vec<f64>, p: usize) -> Result<Self> {
        if knots.len() < 2 * p + 2 {
            return Err(Error::InvalidKnots(format!(
                "order {p} needs at least {} knots, got {}",
                2 * p + 2,
                knots.len()
            )));
        }
        if let Some(i) = knots.iter().position(|t| !t.is_finite()) {
            return Err(Error::InvalidKnots(format!("knot {i} is not finite")));
        }
        if let Some(i) = knots.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::InvalidKnots(format!(
                "knots must be strictly increasing (positions {i} and {})",
                i + 1
            )));
        }
        let intervals = knots.len() - 2 * p - 1;
        Ok(Self {
            order: p,
            intervals,
            knots,
        })
    }

    /// Order `p` (polynomial degree) of the basis.
    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of intervals `l`; the grid has `l - 1` interior knot candidates.
    pub fn intervals(&self) -> usize {
        self.intervals
    }

    /// Number of basis functions, `l + p`.
    pub fn dim(&self) -> usize {
        self.intervals + self.order
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Knot `t_i` for `i` in `-p..=l+p`.
    #[inline]
    pub fn t(&self, i: isize) -> f64 {
        self.knots[(i + self.order as isize) as usize]
    }

    /// Knots `t_0, ..., t_l`.
    pub fn interior(&self) -> &[f64] {
        &self.knots[self.order..=self.order + self.intervals]
    }

    /// Data interval `(t_0, t_l)`; points must satisfy `t_0 <= x < t_l`.
    pub fn domain(&self) -> (f64, f64) {
        (self.t(0), self.t(self.intervals as isize))
    }

    pub fn contains(&self, x: f64) -> bool {
        let (a, b) = self.domain();
        x >= a && x < b
    }

    /// Index `m` in `0..l` of the interval `[t_m, t_{m+1})` holding `x`.
    fn interval_of(&self, x: f64) -> usize {
        let interior = self.interior();
        // partition_point returns the number of knots <= x, which is >= 1 inside the domain
        let m = interior.partition_point(|&t| t <= x) - 1;
        m.min(self.intervals - 1)
    }

    fn check(&self, index: usize, x: f64) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            let (t0, tl) = self.domain();
            Err(Error::Domain { index, x, t0, tl })
        }
    }

    /// The `p + 1` possibly nonzero basis values at `x`, together with the
    /// column index of the first one.
    ///
    /// Starts from the order-0 indicator of the interval containing `x` and
    /// lifts it through the Cox-de Boor recursion, restricted to the window of
    /// functions whose support contains `x`.
    pub fn local_basis(&self, x: f64) -> Result<(usize, Vec<f64>)> {
        self.check(0, x)?;
        Ok(self.local_basis_unchecked(x))
    }

    fn local_basis_unchecked(&self, x: f64) -> (usize, Vec<f64>) {
        let p = self.order;
        let m = self.interval_of(x) as isize;
        // values[k] holds B^{(q)}_{m-q+k}(x) for k = 0..=q
        let mut values = vec![0.0; p + 1];
        values[0] = 1.0;
        for q in 1..=p {
            let qi = q as isize;
            let mut next = vec![0.0; q + 1];
            for (k, slot) in next.iter_mut().enumerate() {
                let j = m - qi + k as isize;
                // B^{(q-1)}_j and B^{(q-1)}_{j+1} from the previous window, which starts at m-q+1
                let lower = if k >= 1 { values[k - 1] } else { 0.0 };
                let upper = if k < q { values[k] } else { 0.0 };
                let left = ratio(x - self.t(j), self.t(j + qi) - self.t(j)) * lower;
                let right =
                    ratio(self.t(j + qi + 1) - x, self.t(j + qi + 1) - self.t(j + 1)) * upper;
                *slot = left + right;
            }
            values = next;
        }
        (m as usize, values)
    }

    /// Values of all `l + p` basis functions `B_{-p}(x), ..., B_{l-1}(x)`.
    pub fn eval_basis(&self, x: f64) -> Result<Vec<f64>> {
        let (first, local) = self.local_basis(x)?;
        let mut out = vec![0.0; self.dim()];
        out[first..first + local.len()].copy_from_slice(&local);
        Ok(out)
    }

    /// The `n x (l + p)` matrix whose row `i` is `eval_basis(xs[i])`.
    pub fn design_matrix(&self, xs: &[f64]) -> Result<DMatrix<f64>> {
        for (i, &x) in xs.iter().enumerate() {
            self.check(i, x)?;
        }
        let mut b = DMatrix::zeros(xs.len(), self.dim());
        for (i, &x) in xs.iter().enumerate() {
            let (first, local) = self.local_basis_unchecked(x);
            for (k, v) in local.into_iter().enumerate() {
                b[(i, first + k)] = v;
            }
        }
        Ok(b)
    }
}

/// `num / den` with the convention `0 / 0 = 0`.
#[inline]
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Equally spaced grid: `t_i = t0 + i (tl - t0) / l` for `i = -p..=l+p`.
pub fn make_equispaced_grid(t0: f64, tl: f64, l: usize, p: usize) -> Result<KnotGrid> {
    if !(t0 < tl) || !t0.is_finite() || !tl.is_finite() {
        return Err(Error::InvalidRange { t0, tl });
    }
    if l == 0 {
        return Err(Error::Parameter("number of intervals l must be >= 1".into()));
    }
    let h = (tl - t0) / l as f64;
    let pi = p as isize;
    let knots = (-pi..=l as isize + pi)
        .map(|i| {
            if i == l as isize {
                tl
            } else {
                t0 + i as f64 * h
            }
        })
        .collect();
    KnotGrid::new(knots, p)
}

/// Grid from the knots `t_0 < ... < t_l`; the `p` exterior knots on each side
/// repeat the spacing of the adjacent boundary interval.
pub fn make_grid_from_interior(interior: &[f64], p: usize) -> Result<KnotGrid> {
    if interior.len() < 2 {
        return Err(Error::InvalidKnots(format!(
            "need at least 2 interior knots, got {}",
            interior.len()
        )));
    }
    if let Some(i) = interior.windows(2).position(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidKnots(format!(
            "interior knots must be strictly increasing (positions {i} and {})",
            i + 1
        )));
    }
    let l = interior.len() - 1;
    let left = interior[1] - interior[0];
    let right = interior[l] - interior[l - 1];
    let mut knots = Vec::with_capacity(l + 2 * p + 1);
    knots.extend((1..=p).rev().map(|k| interior[0] - k as f64 * left));
    knots.extend_from_slice(interior);
    knots.extend((1..=p).map(|k| interior[l] + k as f64 * right));
    KnotGrid::new(knots, p)
}

/// A spline `s(x) = sum_j alpha_{j+p+1} B_j(x)` on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineModel {
    grid: KnotGrid,
    coefficients: Vec<f64>,
}

impl SplineModel {
    pub fn new(grid: KnotGrid, coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() != grid.dim() {
            return Err(Error::Dimension(format!(
                "expected {} coefficients, got {}",
                grid.dim(),
                coefficients.len()
            )));
        }
        Ok(Self { grid, coefficients })
    }

    pub fn grid(&self) -> &KnotGrid {
        &self.grid
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        let (first, local) = self.grid.local_basis(x)?;
        Ok(local
            .iter()
            .zip(&self.coefficients[first..])
            .map(|(b, a)| b * a)
            .sum())
    }

    pub fn eval_many(&self, xs: &[f64]) -> Result<Vec<f64>> {
        xs.iter().map(|&x| self.eval(x)).collect()
    }
}
