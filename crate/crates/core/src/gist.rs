//! Proximal-gradient solver (GIST) for the reduced trimmed-l1 problem.
//!
//! Each outer iteration starts from a Barzilai-Borwein curvature estimate and
//! backtracks by `rho` until the nonmonotone sufficient-decrease test
//!
//! ```text
//! F(beta_{t+1}) <= max_{max(t-M+1,0) <= s <= t} F(beta_s) - sigma eta_t / 2 |beta_{t+1} - beta_t|^2
//! ```
//!
//! accepts the proximal step. `M = 1` gives the monotone variant.

use std::collections::VecDeque;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::reduction::ReducedProblem;
use crate::timing::Stopwatch;
use crate::trimmed::{prox_trimmed_l1, trimmed_l1};

/// Upper limit on backtracking steps within one outer iteration.
const MAX_BACKTRACKS: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct GistParams {
    pub rho: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    pub sigma: f64,
    /// Nonmonotone window `M`.
    pub window: usize,
    /// Starting point; `None` means the zero vector.
    pub beta0: Option<DVector<f64>>,
    pub eta0: f64,
    pub max_iter: usize,
    /// Stopping threshold on `|beta_t - beta_{t-1}|_2`; `None` selects
    /// `sqrt(K (l - 1) n) * 1e-6`.
    pub tol: Option<f64>,
}

impl Default for GistParams {
    fn default() -> Self {
        Self {
            rho: 2.0,
            eta_min: 1e-6,
            eta_max: 1e6,
            sigma: 1e-2,
            window: 10,
            beta0: None,
            eta0: 1.0,
            max_iter: 100_000,
            tol: None,
        }
    }
}

impl GistParams {
    pub fn monotone() -> Self {
        Self {
            window: 1,
            ..Self::default()
        }
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if !(self.rho > 1.0) {
            return bad(format!("rho must exceed 1, got {}", self.rho));
        }
        if !(self.eta_min > 0.0 && self.eta_min <= self.eta_max && self.eta_max.is_finite()) {
            return bad(format!(
                "need 0 < eta_min <= eta_max, got [{}, {}]",
                self.eta_min, self.eta_max
            ));
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return bad(format!("sigma must lie in (0, 1), got {}", self.sigma));
        }
        if self.window < 1 {
            return bad("nonmonotone window M must be >= 1".into());
        }
        if !(self.eta0 > 0.0) || !self.eta0.is_finite() {
            return bad(format!("eta0 must be positive, got {}", self.eta0));
        }
        if self.max_iter < 1 {
            return bad("max_iter must be >= 1".into());
        }
        if let Some(tol) = self.tol {
            if !(tol >= 0.0) {
                return bad(format!("tolerance must be >= 0, got {tol}"));
            }
        }
        Ok(())
    }
}

/// `sqrt(K (l - 1) n) * 1e-6`.
pub fn default_tolerance(k: usize, knots: usize, n: usize) -> f64 {
    ((k * knots * n) as f64).sqrt() * 1e-6
}

/// One accepted outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub iteration: usize,
    /// `F(beta_{t+1})`.
    pub objective: f64,
    /// Max of the objective window the step was tested against.
    pub reference: f64,
    /// Accepted `eta_t`.
    pub eta: f64,
    pub backtracks: usize,
    /// `|beta_{t+1} - beta_t|^2`.
    pub step_sq: f64,
}

#[derive(Debug, Clone)]
pub struct SolverResult {
    pub beta: DVector<f64>,
    pub alpha: DVector<f64>,
    /// `F(beta_0), F(beta_1), ...`.
    pub objective_trace: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub iterations: usize,
    pub line_search_total: usize,
    pub converged: bool,
    pub tol: f64,
    pub cpu_seconds: f64,
    pub wall_seconds: f64,
}

impl SolverResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace holds the starting value")
    }

    /// 1-based indices of the nonzero entries of `beta`.
    pub fn support(&self) -> Vec<usize> {
        self.beta
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i + 1)
            .collect()
    }
}

/// Barzilai-Borwein curvature `(g_new - g_old)^T (b_new - b_old) / |b_new - b_old|^2`.
/// A zero displacement yields `eta_min`.
pub fn bb_ratio(
    grad_new: &DVector<f64>,
    grad_old: &DVector<f64>,
    beta_new: &DVector<f64>,
    beta_old: &DVector<f64>,
    eta_min: f64,
) -> f64 {
    let step = beta_new - beta_old;
    let denom = step.norm_squared();
    if denom == 0.0 {
        return eta_min;
    }
    (grad_new - grad_old).dot(&step) / denom
}

/// Minimizes `h(beta) + gamma T_K(beta)` for the reduced problem `rp`.
pub fn gist_solve(rp: &ReducedProblem, gamma: f64, k: usize, params: &GistParams) -> Result<SolverResult> {
    params.validate()?;
    let d = rp.dim();
    if k > d {
        return Err(Error::Parameter(format!(
            "K = {k} exceeds the {d} candidate knots"
        )));
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::Parameter(format!("gamma must be >= 0, got {gamma}")));
    }
    let tol = params
        .tol
        .unwrap_or_else(|| default_tolerance(k, d, rp.y.len()));
    let clock = Stopwatch::start();

    let mut beta = match &params.beta0 {
        Some(b) if b.len() != d => {
            return Err(Error::Dimension(format!(
                "initial point has length {}, expected {d}",
                b.len()
            )))
        }
        Some(b) => b.clone(),
        None => DVector::zeros(d),
    };
    let penalty = |b: &DVector<f64>| -> Result<f64> {
        Ok(if gamma > 0.0 {
            gamma * trimmed_l1(b.as_slice(), k)?
        } else {
            0.0
        })
    };

    let (r1, r2) = rp.residuals(&beta);
    let mut objective = rp.smooth_from_residuals(&r1, &r2) + penalty(&beta)?;
    if !objective.is_finite() {
        return Err(Error::NumericalFailure {
            iteration: 0,
            message: "initial objective is not finite".into(),
        });
    }
    let mut grad = rp.grad_from_residuals(&r1, &r2);

    let mut window: VecDeque<f64> = VecDeque::with_capacity(params.window);
    window.push_back(objective);
    let mut trace = vec![objective];
    let mut steps = Vec::new();
    let mut eta = params.eta0;
    let mut line_search_total = 0;
    let mut converged = false;
    let mut iterations = 0;

    for t in 0..params.max_iter {
        let reference = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut backtracks = 0;
        let (candidate, cand_r1, cand_r2, cand_obj, step_sq) = loop {
            eta *= params.rho;
            if !eta.is_finite() || backtracks > MAX_BACKTRACKS {
                return Err(Error::NumericalFailure {
                    iteration: t,
                    message: "line search did not terminate".into(),
                });
            }
            let forward = &beta - &grad / eta;
            let candidate = if gamma > 0.0 {
                DVector::from_vec(prox_trimmed_l1(forward.as_slice(), gamma / eta, k)?)
            } else {
                forward
            };
            let (c1, c2) = rp.residuals(&candidate);
            let obj = rp.smooth_from_residuals(&c1, &c2) + penalty(&candidate)?;
            if !obj.is_finite() {
                return Err(Error::NumericalFailure {
                    iteration: t,
                    message: format!("objective became {obj}"),
                });
            }
            let step_sq = (&candidate - &beta).norm_squared();
            if obj <= reference - 0.5 * params.sigma * eta * step_sq {
                break (candidate, c1, c2, obj, step_sq);
            }
            backtracks += 1;
        };
        line_search_total += backtracks;
        iterations = t + 1;

        let new_grad = rp.grad_from_residuals(&cand_r1, &cand_r2);
        let curvature = bb_ratio(&new_grad, &grad, &candidate, &beta, params.eta_min);
        steps.push(StepRecord {
            iteration: t,
            objective: cand_obj,
            reference,
            eta,
            backtracks,
            step_sq,
        });
        trace.push(cand_obj);
        if window.len() == params.window {
            window.pop_front();
        }
        window.push_back(cand_obj);
        beta = candidate;
        grad = new_grad;
        objective = cand_obj;

        if step_sq.sqrt() <= tol {
            converged = true;
            break;
        }
        eta = curvature.clamp(params.eta_min, params.eta_max) / params.rho;
    }
    debug_assert_eq!(objective, *trace.last().unwrap());

    let alpha = rp.lift(&beta);
    let (cpu_seconds, wall_seconds) = clock.elapsed();
    Ok(SolverResult {
        beta,
        alpha,
        objective_trace: trace,
        steps,
        iterations,
        line_search_total,
        converged,
        tol,
        cpu_seconds,
        wall_seconds,
    })
}
