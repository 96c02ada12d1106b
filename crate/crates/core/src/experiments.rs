//! Synthetic data, BIC selection of `K`, Monte-Carlo MSE and the
//! monotone/nonmonotone timing study.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::Serialize;

use crate::aspline::{bic, reestimate, select_lambda_by_bic, spline_df, ssr, AsplineParams, AsplineSelection};
use crate::diff::DifferenceOperators;
use crate::error::{Error, Result};
use crate::gist::{gist_solve, GistParams};
use crate::knots::{make_equispaced_grid, KnotGrid, SplineModel};
use crate::reduction::ReducedProblem;
use crate::timing::Stopwatch;

/// Default Monte-Carlo sample size for [`mse_monte_carlo`].
pub const MSE_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    RandomCoef,
    SparseTruth,
    BimodalGauss,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_coef" | "random" => Ok(Self::RandomCoef),
            "sparse_truth" | "sparse" => Ok(Self::SparseTruth),
            "bimodal_gauss" | "bimodal" => Ok(Self::BimodalGauss),
            _ => Err(Error::Parameter(format!(
                "unknown synthetic kind {s:?} (random_coef, sparse_truth, bimodal_gauss)"
            ))),
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RandomCoef => "random_coef",
            Self::SparseTruth => "sparse_truth",
            Self::BimodalGauss => "bimodal_gauss",
        })
    }
}

/// How the knots of a sparse truth are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotRule {
    /// Drawn without replacement from the candidate knots `t_1..t_{l-1}`.
    Candidates,
    /// Independent `U(0,1)` draws, sorted.
    Uniform,
}

impl FromStr for KnotRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "candidates" => Ok(Self::Candidates),
            "uniform" => Ok(Self::Uniform),
            _ => Err(Error::Parameter(format!(
                "unknown knot rule {s:?} (candidates, uniform)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    pub l: usize,
    pub p: usize,
    /// Standard deviation of the Gaussian noise, or the upper end of the
    /// `U(0, noise)` noise for the bimodal kind.
    pub noise: f64,
    pub seed: u64,
    pub knot_rule: KnotRule,
    pub true_knots: usize,
}

impl SyntheticSpec {
    /// Defaults: `p = 3`, noise `0.1`, five true knots drawn from the candidates.
    pub fn new(kind: SyntheticKind, n: usize, l: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            l,
            p: 3,
            noise: 0.1,
            seed,
            knot_rule: KnotRule::Candidates,
            true_knots: 5,
        }
    }

    /// The bimodal example with `n = 80`.
    pub fn bimodal(l: usize, seed: u64) -> Self {
        Self::new(SyntheticKind::BimodalGauss, 80, l, seed)
    }

    pub fn with_knot_rule(mut self, rule: KnotRule) -> Self {
        self.knot_rule = rule;
        self
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Parameter("sample count n must be >= 1".into()));
        }
        if self.l < 2 {
            return Err(Error::Parameter(format!("l must be >= 2, got {}", self.l)));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Parameter(format!("noise must be >= 0, got {}", self.noise)));
        }
        if self.kind == SyntheticKind::SparseTruth
            && self.knot_rule == KnotRule::Candidates
            && self.true_knots > self.l - 1
        {
            return Err(Error::Parameter(format!(
                "{} true knots cannot be drawn from {} candidates",
                self.true_knots,
                self.l - 1
            )));
        }
        Ok(())
    }

    /// The candidate grid: `l` equal intervals on `[0, 1]`.
    pub fn candidate_grid(&self) -> Result<KnotGrid> {
        make_equispaced_grid(0.0, 1.0, self.l, self.p)
    }
}

/// `0.8 exp(-(16(x - 0.35))^2) - 0.8 exp(-(16(x - 0.65))^2)`.
pub fn bimodal(x: f64) -> f64 {
    0.8 * (-(16.0 * (x - 0.35)).powi(2)).exp() - 0.8 * (-(16.0 * (x - 0.65)).powi(2)).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Truth {
    Spline(SplineModel),
    Bimodal,
}

impl Truth {
    pub fn eval(&self, x: f64) -> Result<f64> {
        match self {
            Truth::Spline(m) => m.eval(x),
            Truth::Bimodal => Ok(bimodal(x)),
        }
    }

    /// Interior knots `t_1..t_{l-1}` of a spline truth.
    pub fn knots(&self) -> Option<Vec<f64>> {
        match self {
            Truth::Spline(m) => {
                let interior = m.grid().interior();
                Some(interior[1..interior.len() - 1].to_vec())
            }
            Truth::Bimodal => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub truth: Truth,
}

/// Draws a dataset; the whole stream is fixed by `spec.seed`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let truth = match spec.kind {
        SyntheticKind::RandomCoef => {
            let grid = spec.candidate_grid()?;
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let coef = (0..grid.dim()).map(|_| normal.sample(&mut rng)).collect();
            Truth::Spline(SplineModel::new(grid, coef)?)
        }
        SyntheticKind::SparseTruth => {
            let candidates = spec.candidate_grid()?;
            let mut inner: Vec<f64> = match spec.knot_rule {
                KnotRule::Candidates => sample(&mut rng, spec.l - 1, spec.true_knots)
                    .into_iter()
                    .map(|i| candidates.t(i as isize + 1))
                    .collect(),
                KnotRule::Uniform => (0..spec.true_knots).map(|_| rng.random::<f64>()).collect(),
            };
            inner.sort_by(f64::total_cmp);
            let p = spec.p;
            let all = candidates.knots();
            let mut knots = Vec::with_capacity(inner.len() + 2 * p + 2);
            knots.extend_from_slice(&all[..=p]);
            knots.extend_from_slice(&inner);
            knots.extend_from_slice(&all[all.len() - p - 1..]);
            let grid = KnotGrid::new(knots, p)?;
            let coef = (0..grid.dim()).map(|_| rng.random::<f64>()).collect();
            Truth::Spline(SplineModel::new(grid, coef)?)
        }
        SyntheticKind::BimodalGauss => Truth::Bimodal,
    };
    let xs: Vec<f64> = (0..spec.n).map(|_| rng.random::<f64>()).collect();
    let mut ys = Vec::with_capacity(spec.n);
    match spec.kind {
        SyntheticKind::BimodalGauss => {
            for &x in &xs {
                let e = if spec.noise > 0.0 {
                    Uniform::new(0.0, spec.noise).expect("positive width").sample(&mut rng)
                } else {
                    0.0
                };
                ys.push(truth.eval(x)? + e);
            }
        }
        _ => {
            let noise = Normal::new(0.0, spec.noise).expect("finite noise level");
            for &x in &xs {
                ys.push(truth.eval(x)? + noise.sample(&mut rng));
            }
        }
    }
    Ok(SyntheticData { xs, ys, truth })
}

/// Mean of `(truth(u) - fitted(u))^2` over `samples` uniform draws on the
/// fitted model's data interval.
pub fn mse_monte_carlo(truth: &Truth, fitted: &SplineModel, samples: usize, seed: u64) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Parameter("Monte-Carlo sample count must be >= 1".into()));
    }
    let (a, b) = fitted.grid().domain();
    if let Truth::Spline(m) = truth {
        let (ta, tb) = m.grid().domain();
        if ta > a || tb < b {
            return Err(Error::Domain {
                index: 0,
                x: if ta > a { a } else { b },
                t0: ta,
                tl: tb,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..samples {
        let u = a + (b - a) * rng.random::<f64>();
        total += (truth.eval(u)? - fitted.eval(u)?).powi(2);
    }
    Ok(total / samples as f64)
}

/// One `K` of a BIC sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KRow {
    #[serde(rename = "K")]
    pub k: usize,
    /// Locations of the knots left active by the solver.
    pub knots: Vec<f64>,
    pub ssr: f64,
    pub bic: f64,
    pub objective: f64,
    pub gamma: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(skip)]
    pub cpu_seconds: f64,
    /// Error tag when re-estimation on the selected knots failed.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    #[serde(rename = "K")]
    pub k: usize,
    pub bic: f64,
    /// Re-estimated model on the selected knots.
    pub model: SplineModel,
    pub knots: Vec<f64>,
    pub mse: Option<f64>,
    #[serde(skip)]
    pub cpu_seconds: f64,
    #[serde(skip)]
    pub wall_seconds: f64,
    pub table: Vec<KRow>,
}

/// Solves for every `K` in `k_grid`, re-estimates on the active knots and
/// keeps the BIC minimizer. A `K` whose re-estimate is rank deficient stays in
/// the table with its error and is not eligible.
pub fn select_k_by_bic(
    xs: &[f64],
    ys: &[f64],
    grid: &KnotGrid,
    k_grid: &[usize],
    c: f64,
    gamma_safety: f64,
    params: &GistParams,
) -> Result<FitReport> {
    if k_grid.is_empty() {
        return Err(Error::Parameter("K grid is empty".into()));
    }
    let d = grid.intervals().saturating_sub(1);
    if let Some(&k) = k_grid.iter().find(|&&k| k > d) {
        return Err(Error::Parameter(format!("K = {k} exceeds the {d} candidate knots")));
    }
    let clock = Stopwatch::start();
    let rp = ReducedProblem::from_data(grid, xs, ys, c)?;
    let gamma = rp.exact_penalty_gamma(gamma_safety)?;
    let outcomes: Vec<Result<(KRow, Option<SplineModel>)>> = k_grid
        .par_iter()
        .map(|&k| {
            let res = gist_solve(&rp, gamma, k, params).map_err(|e| Error::AtK {
                k,
                source: Box::new(e),
            })?;
            let support = res.support();
            let knots = support.iter().map(|&i| grid.t(i as isize)).collect();
            let mut row = KRow {
                k,
                knots,
                ssr: f64::NAN,
                bic: f64::NAN,
                objective: res.objective(),
                gamma,
                iterations: res.iterations,
                converged: res.converged,
                cpu_seconds: res.cpu_seconds,
                error: None,
            };
            match reestimate(grid, xs, ys, &support) {
                Ok(model) => {
                    row.ssr = ssr(&model, xs, ys)?;
                    row.bic = bic(xs.len(), row.ssr, spline_df(support.len(), grid.order()));
                    Ok((row, Some(model)))
                }
                Err(e @ Error::RankDeficient(_)) => {
                    row.error = Some(e.to_string());
                    Ok((row, None))
                }
                Err(e) => Err(Error::AtK {
                    k,
                    source: Box::new(e),
                }),
            }
        })
        .collect();
    let mut table = Vec::with_capacity(k_grid.len());
    let mut best: Option<(usize, SplineModel)> = None;
    for outcome in outcomes {
        let (row, model) = outcome?;
        if let Some(model) = model {
            let better = match &best {
                None => true,
                Some((i, _)) => row.bic < table.get(*i).map_or(f64::INFINITY, |r: &KRow| r.bic),
            };
            if better {
                best = Some((table.len(), model));
            }
        }
        table.push(row);
    }
    let (idx, model) = best.ok_or_else(|| {
        Error::RankDeficient("re-estimation failed for every K in the grid".into())
    })?;
    let (cpu_seconds, wall_seconds) = clock.elapsed();
    Ok(FitReport {
        k: table[idx].k,
        bic: table[idx].bic,
        knots: table[idx].knots.clone(),
        model,
        mse: None,
        cpu_seconds,
        wall_seconds,
        table,
    })
}

/// Outcome of an A-spline run that redraws its data on instability.
#[derive(Debug, Clone)]
pub struct AsplineTrial {
    /// Datasets drawn, including the successful one.
    pub attempts: usize,
    pub seed: u64,
    pub data: SyntheticData,
    pub selection: AsplineSelection,
}

/// Runs the A-spline BIC sweep on data from `spec`, discarding the dataset and
/// drawing a new one (seed `derive_seed(spec.seed, 1, attempt)`) whenever every
/// λ fails with a numerical-instability error. Gives up after `max_attempts`.
pub fn aspline_with_regeneration(
    spec: &SyntheticSpec,
    lambdas: &[f64],
    params: &AsplineParams,
    max_attempts: usize,
) -> Result<AsplineTrial> {
    let grid = spec.candidate_grid()?;
    let d = DifferenceOperators::new(&grid)?.d;
    let mut last = None;
    for attempt in 0..max_attempts {
        let seed = if attempt == 0 {
            spec.seed
        } else {
            derive_seed(spec.seed, 1, attempt)
        };
        let data = gen_synthetic(&SyntheticSpec { seed, ..spec.clone() })?;
        match select_lambda_by_bic(&grid, &data.xs, &data.ys, &d, lambdas, params) {
            Ok(selection) => {
                return Ok(AsplineTrial {
                    attempts: attempt + 1,
                    seed,
                    data,
                    selection,
                })
            }
            Err(e @ Error::NumericalInstability(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Parameter("max_attempts must be >= 1".into())))
}

/// `log2(tau_mono / tau_non)`.
pub fn log2_ratio(tau_mono: f64, tau_non: f64) -> f64 {
    (tau_mono / tau_non).log2()
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Settings of one timing instance family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchSpec {
    pub n: usize,
    pub l: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub c: f64,
    pub p: usize,
}

impl BenchSpec {
    pub fn new(n: usize, l: usize, k: usize, c: f64) -> Self {
        Self { n, l, k, c, p: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub spec: usize,
    pub repetition: usize,
    pub seed: u64,
    pub n: usize,
    pub l: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub c: f64,
    pub tau_mono: f64,
    pub tau_non: f64,
    pub iterations_mono: usize,
    pub iterations_non: usize,
    pub converged_mono: bool,
    pub converged_non: bool,
    pub log2_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSummary {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    /// Fraction of instances where the nonmonotone run was faster.
    pub nonmonotone_faster: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
    pub summary: BenchSummary,
}

/// Seed of repetition `rep` of spec `spec` in a study seeded by `base`.
pub fn derive_seed(base: u64, spec: usize, rep: usize) -> u64 {
    base.wrapping_add((spec as u64) << 32).wrapping_add(rep as u64)
}

/// Times GIST with `M = 1` and `M = 10` on random-coefficient data for every
/// spec and repetition. Instances run one after another on the calling thread
/// so that the timings do not compete for cores.
pub fn bench_monotone_vs_nonmonotone(
    specs: &[BenchSpec],
    repetitions: usize,
    base_seed: u64,
    params: &GistParams,
) -> Result<BenchTable> {
    if repetitions < 1 {
        return Err(Error::Parameter("repetitions must be >= 1".into()));
    }
    let mut rows = Vec::with_capacity(specs.len() * repetitions);
    for (si, spec) in specs.iter().enumerate() {
        for rep in 0..repetitions {
            let seed = derive_seed(base_seed, si, rep);
            let synth = SyntheticSpec {
                p: spec.p,
                ..SyntheticSpec::new(SyntheticKind::RandomCoef, spec.n, spec.l, seed)
            };
            let data = gen_synthetic(&synth)?;
            let grid = synth.candidate_grid()?;
            let rp = ReducedProblem::from_data(&grid, &data.xs, &data.ys, spec.c)?;
            let gamma = rp.gamma;
            let mono = gist_solve(&rp, gamma, spec.k, &params.clone().with_window(1))?;
            let non = gist_solve(&rp, gamma, spec.k, &params.clone().with_window(10))?;
            rows.push(BenchRow {
                spec: si,
                repetition: rep,
                seed,
                n: spec.n,
                l: spec.l,
                k: spec.k,
                c: spec.c,
                tau_mono: mono.cpu_seconds,
                tau_non: non.cpu_seconds,
                iterations_mono: mono.iterations,
                iterations_non: non.iterations,
                converged_mono: mono.converged,
                converged_non: non.converged,
                log2_ratio: log2_ratio(mono.cpu_seconds, non.cpu_seconds),
            });
        }
    }
    let ratios: Vec<f64> = rows.iter().map(|r| r.log2_ratio).collect();
    let faster = rows.iter().filter(|r| r.tau_non < r.tau_mono).count();
    let summary = BenchSummary {
        q1: quantile(&ratios, 0.25),
        median: quantile(&ratios, 0.5),
        q3: quantile(&ratios, 0.75),
        nonmonotone_faster: faster as f64 / rows.len() as f64,
    };
    Ok(BenchTable { rows, summary })
}
