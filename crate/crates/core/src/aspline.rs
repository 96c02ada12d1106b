//! Adaptive-ridge (A-spline) baseline and unpenalized re-estimation on a
//! subset of the candidate knots.
//!
//! The adaptive ridge approximates `1/2 |y - B alpha|^2 + lambda/2 |D alpha|_0`
//! by repeatedly solving the weighted ridge problem
//!
//! ```text
//! alpha+ = (B^T B + lambda D^T W(alpha) D)^{-1} B^T y,   w_ii = 1 / ((D alpha)_i^2 + eps^2)
//! ```
//!
//! starting from `W = I`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::knots::{make_grid_from_interior, KnotGrid, SplineModel};

/// Singular-value ratio below which a least-squares design is rank deficient.
pub const RANK_RCOND: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsplineParams {
    pub lambda: f64,
    /// Weight regularizer `eps` in `1 / ((D alpha)^2 + eps^2)`.
    pub epsilon: f64,
    pub max_iter: usize,
    /// Relative change `|alpha+ - alpha| <= tol |alpha|` that ends the iteration.
    pub tol: f64,
}

impl AsplineParams {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            epsilon: 1e-5,
            max_iter: 200,
            tol: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Parameter(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Parameter(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.max_iter < 1 {
            return Err(Error::Parameter("max_iter must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Parameter(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsplineFit {
    pub alpha: DVector<f64>,
    /// 1-based indices of the selected interior knots.
    pub selected: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

/// λ values `i^2 * 1e-4` for `i = 1..=100`.
pub fn lambda_grid() -> Vec<f64> {
    (1..=100).map(|i| (i * i) as f64 * 1e-4).collect()
}

/// Solves the SPD system `a x = rhs` by Cholesky after symmetric diagonal
/// scaling; a factorization that breaks down (the matrix is not numerically
/// positive definite) or a non-finite solution is reported as instability.
fn solve_ridge(a: DMatrix<f64>, rhs: &DVector<f64>, iteration: usize) -> Result<DVector<f64>> {
    let n = a.nrows();
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalInstability(format!(
            "ridge system has non-finite entries at iteration {iteration}"
        )));
    }
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            let d = a[(i, i)];
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * scale[i] * scale[j]);
    let chol = Cholesky::new(scaled).ok_or_else(|| {
        Error::NumericalInstability(format!(
            "ridge system is not numerically positive definite at iteration {iteration}"
        ))
    })?;
    let b = DVector::from_iterator(n, rhs.iter().zip(&scale).map(|(r, s)| r * s));
    let x = chol.solve(&b);
    let x = DVector::from_iterator(n, x.iter().zip(&scale).map(|(v, s)| v * s));
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalInstability(format!(
            "ridge solution is not finite at iteration {iteration}"
        )));
    }
    Ok(x)
}

/// Runs the adaptive ridge on design `b`, difference operator `d` and data
/// `y`. Knot `i` is selected when `w_ii (D alpha)_i^2 > 1/2`.
pub fn adaptive_ridge_fit(
    b: &DMatrix<f64>,
    d: &DMatrix<f64>,
    y: &DVector<f64>,
    params: &AsplineParams,
) -> Result<AsplineFit> {
    params.validate()?;
    if b.ncols() != d.ncols() || b.nrows() != y.len() {
        return Err(Error::Dimension(format!(
            "design {}x{}, difference {}x{}, response {}",
            b.nrows(),
            b.ncols(),
            d.nrows(),
            d.ncols(),
            y.len()
        )));
    }
    let gram = b.tr_mul(b);
    let bty = b.tr_mul(y);
    let eps2 = params.epsilon * params.epsilon;
    let mut weights = DVector::from_element(d.nrows(), 1.0);
    let mut alpha = DVector::zeros(b.ncols());
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..params.max_iter {
        let mut wd = d.clone();
        for (i, mut row) in wd.row_iter_mut().enumerate() {
            row *= weights[i];
        }
        let system = &gram + d.tr_mul(&wd) * params.lambda;
        let next = solve_ridge(system, &bty, it)?;
        let change = (&next - &alpha).norm();
        let size = next.norm();
        alpha = next;
        iterations = it + 1;
        let diffs = d * &alpha;
        weights = diffs.map(|v| 1.0 / (v * v + eps2));
        if it > 0 && change <= params.tol * size {
            converged = true;
            break;
        }
    }
    let diffs = d * &alpha;
    let selected = diffs
        .iter()
        .zip(weights.iter())
        .enumerate()
        .filter(|(_, (v, w))| *w * *v * *v > 0.5)
        .map(|(i, _)| i + 1)
        .collect();
    Ok(AsplineFit {
        alpha,
        selected,
        iterations,
        converged,
    })
}

/// Least-squares coefficients of `y` on `b`, failing on rank deficiency.
pub fn least_squares(b: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    if b.nrows() < b.ncols() {
        return Err(Error::RankDeficient(format!(
            "{} observations for {} coefficients",
            b.nrows(),
            b.ncols()
        )));
    }
    let norms: Vec<f64> = b.column_iter().map(|c| c.norm()).collect();
    if let Some(j) = norms.iter().position(|n| *n == 0.0) {
        return Err(Error::RankDeficient(format!("basis function {} has no data", j + 1)));
    }
    let mut scaled = b.clone();
    for (mut col, n) in scaled.column_iter_mut().zip(&norms) {
        col /= *n;
    }
    let svd = scaled.svd(true, true);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if !(min > RANK_RCOND * max) {
        return Err(Error::RankDeficient(format!(
            "design singular-value ratio {:.3e}",
            min / max
        )));
    }
    let coef = svd
        .solve(y, 0.0)
        .map_err(|m| Error::NumericalFailure { iteration: 0, message: m.into() })?;
    Ok(DVector::from_iterator(coef.len(), coef.iter().zip(&norms).map(|(c, n)| c / n)))
}

/// Refits by unpenalized least squares on the grid built from `t_0`, the
/// selected interior knots (1-based indices into `grid`) and `t_l`.
pub fn reestimate(grid: &KnotGrid, xs: &[f64], y: &[f64], selected: &[usize]) -> Result<SplineModel> {
    if xs.len() != y.len() {
        return Err(Error::Dimension(format!(
            "{} x values but {} responses",
            xs.len(),
            y.len()
        )));
    }
    let l = grid.intervals();
    let mut idx = selected.to_vec();
    idx.sort_unstable();
    idx.dedup();
    if let Some(&bad) = idx.iter().find(|&&i| i == 0 || i >= l) {
        return Err(Error::Parameter(format!(
            "selected knot index {bad} is not an interior knot (1..={})",
            l.saturating_sub(1)
        )));
    }
    let (t0, tl) = grid.domain();
    let mut interior = Vec::with_capacity(idx.len() + 2);
    interior.push(t0);
    interior.extend(idx.iter().map(|&i| grid.t(i as isize)));
    interior.push(tl);
    let reduced = make_grid_from_interior(&interior, grid.order())?;
    let b = reduced.design_matrix(xs)?;
    let coef = least_squares(&b, &DVector::from_column_slice(y))?;
    SplineModel::new(reduced, coef.as_slice().to_vec())
}

/// Sum of squared residuals of `model` on the data.
pub fn ssr(model: &SplineModel, xs: &[f64], y: &[f64]) -> Result<f64> {
    Ok(model
        .eval_many(xs)?
        .iter()
        .zip(y)
        .map(|(f, v)| (v - f).powi(2))
        .sum())
}

/// `n ln(ssr / n) + df ln n`; a non-positive `ssr` (a perfect fit) gives `-inf`.
pub fn bic(n: usize, ssr: f64, df: usize) -> f64 {
    if !(ssr > 0.0) {
        return f64::NEG_INFINITY;
    }
    let nf = n as f64;
    nf * (ssr / nf).ln() + df as f64 * nf.ln()
}

/// Degrees of freedom of a spline with `knots` interior knots and order `p`.
pub fn spline_df(knots: usize, p: usize) -> usize {
    knots + p + 1
}

/// One λ of an A-spline BIC sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaRow {
    pub lambda: f64,
    /// Selected knot locations; empty when the fit failed.
    pub knots: Vec<f64>,
    pub ssr: f64,
    pub bic: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Error tag when this λ could not be fitted.
    pub error: Option<String>,
}

type LambdaOutcome = (f64, Result<(AsplineFit, SplineModel, f64)>);

#[derive(Debug, Clone)]
pub struct AsplineSelection {
    pub best: Option<(usize, SplineModel)>,
    pub rows: Vec<LambdaRow>,
}

/// Fits the A-spline for every λ in `lambdas`, re-estimates on the selected
/// knots and keeps the BIC minimizer. Failed λ values are kept in the table
/// with their error; the selection fails only if every λ fails.
pub fn select_lambda_by_bic(
    grid: &KnotGrid,
    xs: &[f64],
    y: &[f64],
    d: &DMatrix<f64>,
    lambdas: &[f64],
    base: &AsplineParams,
) -> Result<AsplineSelection> {
    let b = grid.design_matrix(xs)?;
    let yv = DVector::from_column_slice(y);
    let outcomes: Vec<LambdaOutcome> = lambdas
        .par_iter()
        .map(|&lambda| {
            let params = AsplineParams { lambda, ..*base };
            let outcome = adaptive_ridge_fit(&b, d, &yv, &params).and_then(|fit| {
                let model = reestimate(grid, xs, y, &fit.selected)?;
                let s = ssr(&model, xs, y)?;
                Ok((fit, model, s))
            });
            (lambda, outcome)
        })
        .collect();
    let mut rows = Vec::with_capacity(lambdas.len());
    let mut best: Option<(usize, SplineModel)> = None;
    let mut best_bic = f64::INFINITY;
    let mut last_err = None;
    for (lambda, outcome) in outcomes {
        match outcome {
            Ok((fit, model, s)) => {
                let score = bic(xs.len(), s, spline_df(fit.selected.len(), grid.order()));
                rows.push(LambdaRow {
                    lambda,
                    knots: fit.selected.iter().map(|&i| grid.t(i as isize)).collect(),
                    ssr: s,
                    bic: score,
                    iterations: fit.iterations,
                    converged: fit.converged,
                    error: None,
                });
                if score < best_bic {
                    best_bic = score;
                    best = Some((rows.len() - 1, model));
                }
            }
            Err(e) => {
                rows.push(LambdaRow {
                    lambda,
                    knots: Vec::new(),
                    ssr: f64::NAN,
                    bic: f64::NAN,
                    iterations: 0,
                    converged: false,
                    error: Some(e.kind().to_string()),
                });
                last_err = Some(e);
            }
        }
    }
    match (&best, last_err) {
        (None, Some(e)) => Err(e),
        _ => Ok(AsplineSelection { best, rows }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::DifferenceOperators;
    use crate::knots::make_equispaced_grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_xs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn bic_examples() {
        assert!((bic(100, 100.0, 4) - 4.0 * 100f64.ln()).abs() < 1e-12);
        assert!(bic(100, 3.0, 5) > bic(100, 3.0, 4));
        assert_eq!(bic(10, 0.0, 4), f64::NEG_INFINITY);
    }

    #[test]
    fn lambda_grid_shape() {
        let g = lambda_grid();
        assert_eq!(g.len(), 100);
        assert_eq!(g[0], 1e-4);
        assert!((g[99] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reestimate_full_set_matches_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = make_equispaced_grid(0.0, 1.0, 8, 3).unwrap();
        let xs = uniform_xs(&mut rng, 120);
        let y: Vec<f64> = xs.iter().map(|x| (5.0 * x).sin() + 0.1 * rng.random::<f64>()).collect();
        let all: Vec<usize> = (1..8).collect();
        let model = reestimate(&grid, &xs, &y, &all).unwrap();
        let b = grid.design_matrix(&xs).unwrap();
        // independent oracle: normal equations via dense inverse
        let yv = DVector::from_column_slice(&y);
        let coef = (b.tr_mul(&b)).try_inverse().unwrap() * b.tr_mul(&yv);
        let full = SplineModel::new(grid, coef.as_slice().to_vec()).unwrap();
        for &x in &xs {
            assert!((model.eval(x).unwrap() - full.eval(x).unwrap()).abs() < 1e-8);
        }
    }

    #[test]
    fn reestimate_empty_is_polynomial_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = make_equispaced_grid(0.0, 1.0, 10, 3).unwrap();
        let xs = uniform_xs(&mut rng, 50);
        let y: Vec<f64> = xs.iter().map(|x| 1.0 - 2.0 * x + 0.5 * x * x * x).collect();
        let model = reestimate(&grid, &xs, &y, &[]).unwrap();
        assert_eq!(model.grid().intervals(), 1);
        for &x in &[0.0, 0.3, 0.77] {
            let truth = 1.0 - 2.0 * x + 0.5 * x * x * x;
            assert!((model.eval(x).unwrap() - truth).abs() < 1e-10);
        }
    }

    #[test]
    fn reestimate_rejects_bad_input() {
        let grid = make_equispaced_grid(0.0, 1.0, 10, 3).unwrap();
        let xs = [0.1, 0.2, 0.3];
        let y = [1.0, 2.0, 3.0];
        assert!(matches!(reestimate(&grid, &xs, &y, &[]), Err(Error::RankDeficient(_))));
        assert!(matches!(reestimate(&grid, &xs, &y, &[10]), Err(Error::Parameter(_))));
    }

    #[test]
    fn small_lambda_approaches_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let grid = make_equispaced_grid(0.0, 1.0, 6, 3).unwrap();
        let xs = uniform_xs(&mut rng, 200);
        let y = DVector::from_iterator(200, xs.iter().map(|x| (6.0 * x).cos()));
        let b = grid.design_matrix(&xs).unwrap();
        let ops = DifferenceOperators::new(&grid).unwrap();
        let params = AsplineParams {
            max_iter: 1,
            ..AsplineParams::new(1e-14)
        };
        let fit = adaptive_ridge_fit(&b, &ops.d, &y, &params).unwrap();
        let ls = least_squares(&b, &y).unwrap();
        assert!((&fit.alpha - &ls).amax() < 1e-6 * ls.amax());
    }

    #[test]
    fn polynomial_data_selects_few_knots() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let grid = make_equispaced_grid(0.0, 1.0, 10, 3).unwrap();
        let xs = uniform_xs(&mut rng, 200);
        let y = DVector::from_iterator(
            200,
            xs.iter().map(|x| 0.5 + x - x * x + 1e-3 * (rng.random::<f64>() - 0.5)),
        );
        let b = grid.design_matrix(&xs).unwrap();
        let ops = DifferenceOperators::new(&grid).unwrap();
        let fit = adaptive_ridge_fit(&b, &ops.d, &y, &AsplineParams::new(1.0)).unwrap();
        assert!(fit.selected.len() <= 1, "{:?}", fit.selected);
    }

    #[test]
    fn underdetermined_tiny_lambda_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid = make_equispaced_grid(0.0, 1.0, 100, 3).unwrap();
        let xs = uniform_xs(&mut rng, 30);
        let y = DVector::from_iterator(30, xs.iter().map(|x| x.sin()));
        let b = grid.design_matrix(&xs).unwrap();
        let ops = DifferenceOperators::new(&grid).unwrap();
        let err = adaptive_ridge_fit(&b, &ops.d, &y, &AsplineParams::new(1e-4)).unwrap_err();
        assert!(matches!(err, Error::NumericalInstability(_)), "{err:?}");
    }

    #[test]
    fn lambda_sweep_keeps_bic_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let grid = make_equispaced_grid(0.0, 1.0, 10, 3).unwrap();
        let xs = uniform_xs(&mut rng, 150);
        let y: Vec<f64> = xs.iter().map(|x| (6.0 * x).sin() + 0.05 * (rng.random::<f64>() - 0.5)).collect();
        let ops = DifferenceOperators::new(&grid).unwrap();
        let lambdas: Vec<f64> = lambda_grid().into_iter().step_by(20).collect();
        let sel = select_lambda_by_bic(&grid, &xs, &y, &ops.d, &lambdas, &AsplineParams::new(1.0)).unwrap();
        assert_eq!(sel.rows.len(), lambdas.len());
        let (i, _) = sel.best.unwrap();
        let min = sel.rows.iter().map(|r| r.bic).filter(|b| b.is_finite()).fold(f64::INFINITY, f64::min);
        assert_eq!(sel.rows[i].bic, min);
    }

    #[test]
    fn params_validation() {
        assert!(AsplineParams::new(0.0).validate().is_err());
        let p = AsplineParams {
            epsilon: 0.0,
            ..AsplineParams::new(1.0)
        };
        assert!(p.validate().is_err());
    }
}
