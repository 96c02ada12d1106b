//! Command-line driver.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;

use crate::aspline::{
    adaptive_ridge_fit, bic, lambda_grid, reestimate, select_lambda_by_bic, spline_df, ssr, AsplineParams,
    LambdaRow,
};
use crate::diff::DifferenceOperators;
use crate::error::{Error, Result};
use crate::experiments::{
    bench_monotone_vs_nonmonotone, gen_synthetic, select_k_by_bic, BenchSpec, KRow, KnotRule, SyntheticKind,
    SyntheticSpec,
};
use crate::gist::{gist_solve, GistParams};
use crate::io::{knot_range, load_csv, plot_grid, write_csv_file, write_records, write_rows, Dataset, ModelJson};
use crate::knots::{make_equispaced_grid, KnotGrid, SplineModel};
use crate::reduction::{ReducedProblem, DEFAULT_GAMMA_SAFETY};

#[derive(Debug, Parser)]
#[command(name = "knotsel", version, about = "B-spline regression with knot selection by a trimmed-l1 exact penalty")]
struct Cli {
    /// Worker threads for parallel sweeps (default: all cores).
    #[arg(long, global = true, env = "KNOTSEL_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a spline with at most K active knots.
    Fit(FitArgs),
    /// Choose K (proposed method) or lambda (A-spline) by BIC.
    Select(SelectArgs),
    /// Write a synthetic dataset as CSV.
    Synth(SynthArgs),
    /// Time monotone (M=1) against nonmonotone (M=10) line search.
    Bench(BenchArgs),
    /// Fit the adaptive-ridge baseline for one lambda.
    Aspline(AsplineArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// CSV file with a header row, or `-` for standard input.
    #[arg(long)]
    data: String,
    #[arg(long, default_value = "x")]
    x_col: String,
    #[arg(long, default_value = "y")]
    y_col: String,
    /// Keep the response on its original scale instead of standardizing it.
    #[arg(long)]
    no_standardize: bool,
    /// Use the data interval [0, 1) instead of the widened x range.
    #[arg(long)]
    synthetic_range: bool,
}

#[derive(Debug, Args)]
struct GridArgs {
    /// Spline order (3 = cubic).
    #[arg(long, default_value_t = 3)]
    p: usize,
    /// Number of intervals; the candidate knots are the l - 1 interior ones.
    #[arg(long, default_value_t = 50)]
    l: usize,
}

#[derive(Debug, Args, Clone)]
struct SolverArgs {
    /// Weight of the second-difference smoothing penalty.
    #[arg(long, default_value_t = 0.0)]
    c: f64,
    /// Nonmonotone window M (1 = monotone).
    #[arg(long = "window", short = 'M', default_value_t = 10)]
    window: usize,
    /// Multiple of the exact-penalty bound used as gamma; must exceed 1.
    #[arg(long, default_value_t = DEFAULT_GAMMA_SAFETY)]
    gamma_safety: f64,
    /// Explicit gamma, overriding --gamma-safety.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 100_000)]
    max_iter: usize,
    /// Stopping threshold on |beta_t - beta_{t-1}|; default sqrt(K (l-1) n) 1e-6.
    #[arg(long)]
    tol: Option<f64>,
}

impl SolverArgs {
    fn params(&self) -> GistParams {
        GistParams {
            window: self.window,
            max_iter: self.max_iter,
            tol: self.tol,
            ..GistParams::default()
        }
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    grid: GridArgs,
    /// Maximum number of active knots.
    #[arg(long = "K", short = 'K')]
    k: usize,
    #[command(flatten)]
    solver: SolverArgs,
    /// Directory for model.json, knots.csv, residuals.csv and plot.csv.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Also write the per-iteration solver trace to this CSV file.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Over {
    /// Proposed method over a K grid.
    K,
    /// A-spline over the lambda grid i^2 1e-4, i = 1..100.
    Lambda,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, value_enum, default_value_t = Over::K)]
    over: Over,
    /// K values as `a-b` or a comma list.
    #[arg(long, default_value = "1-20")]
    k_grid: String,
    #[command(flatten)]
    solver: SolverArgs,
    /// Directory for model.json, table.csv and plot.csv.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KindArg {
    RandomCoef,
    SparseTruth,
    Bimodal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RuleArg {
    Candidates,
    Uniform,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample count (default 80 for bimodal, 200 otherwise).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 50)]
    l: usize,
    #[arg(long, default_value_t = 3)]
    p: usize,
    /// Noise sd, or the width of the uniform noise for bimodal.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, value_enum, default_value_t = RuleArg::Candidates)]
    knot_rule: RuleArg,
    /// Output file (default: standard output).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Comma list of l values.
    #[arg(long, default_value = "100")]
    l: String,
    /// Comma list of K values.
    #[arg(long = "K", short = 'K', default_value = "10")]
    k: String,
    /// Comma list of c values.
    #[arg(long, default_value = "0")]
    c: String,
    #[arg(long, default_value_t = 20)]
    repetitions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-instance CSV output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AsplineArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Directory for model.json and plot.csv.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
}

#[derive(Serialize)]
struct ErrorObject<'a> {
    error: ErrorBody<'a>,
}

/// Runs the CLI on `args` (program name first) with the process streams.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_cli_with(args, &mut stdout.lock(), &mut stderr.lock())
}

/// [`run_cli`] writing to the given streams. Exit codes: 0 success, 1 runtime
/// error, 2 usage error.
pub fn run_cli_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            report(err, "usage", e.to_string().trim_end().to_string());
            return 2;
        }
    };
    if let Some(n) = cli.threads {
        // a pool that already exists keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(&a, out),
        Command::Select(a) => cmd_select(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Bench(a) => cmd_bench(&a, out),
        Command::Aspline(a) => cmd_aspline(&a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            report(err, e.kind(), e.to_string());
            1
        }
    }
}

fn report(err: &mut dyn Write, kind: &str, message: String) {
    let obj = ErrorObject {
        error: ErrorBody { kind, message },
    };
    let text = serde_json::to_string(&obj).unwrap_or_else(|_| format!("{{\"error\":{{\"kind\":\"{kind}\"}}}}"));
    let _ = writeln!(err, "{text}");
}

fn io_err(path: &Path, e: impl ToString) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    writeln!(out, "{text}").map_err(|e| io_err(Path::new("<stdout>"), e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| io_err(Path::new("<json>"), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, format!("{text}\n")).map_err(|e| io_err(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn load(a: &DataArgs) -> Result<Dataset> {
    load_csv(&a.data, &a.x_col, &a.y_col, !a.no_standardize)
}

fn build_grid(data: &Dataset, a: &DataArgs, g: &GridArgs) -> Result<KnotGrid> {
    let (t0, tl) = knot_range(data, a.synthetic_range)?;
    make_equispaced_grid(t0, tl, g.l, g.p)
}

/// Coefficients on the original response scale: since the basis sums to one,
/// `mean + sd s(x)` has coefficients `mean + sd alpha`.
fn unstandardize(data: &Dataset, alpha: &[f64]) -> Vec<f64> {
    let (mean, sd) = data.y_shift;
    alpha.iter().map(|a| mean + sd * a).collect()
}

fn original_ys(data: &Dataset) -> Vec<f64> {
    let (mean, sd) = data.y_shift;
    data.ys.iter().map(|y| mean + sd * y).collect()
}

fn write_model_files(dir: &Path, model: &SplineModel, data: &Dataset, json: &str, knots: &[f64]) -> Result<()> {
    ensure_dir(dir)?;
    write_text(&dir.join("model.json"), json)?;
    let knot_rows: Vec<Vec<f64>> = knots.iter().map(|&t| vec![t]).collect();
    write_csv_file(&dir.join("knots.csv"), &["knot"], &knot_rows)?;
    let ys = original_ys(data);
    let fitted = model.eval_many(&data.xs)?;
    let resid: Vec<Vec<f64>> = data
        .xs
        .iter()
        .zip(&ys)
        .zip(&fitted)
        .map(|((x, y), f)| vec![*x, *y, *f, y - f])
        .collect();
    write_csv_file(&dir.join("residuals.csv"), &["x", "y", "fitted", "residual"], &resid)?;
    let xs = plot_grid(model);
    let plot: Vec<Vec<f64>> = xs.iter().map(|&x| model.eval(x).map(|s| vec![x, s])).collect::<Result<_>>()?;
    write_csv_file(&dir.join("plot.csv"), &["x", "s"], &plot)
}

fn cmd_fit(a: &FitArgs, out: &mut dyn Write) -> Result<()> {
    let data = load(&a.data)?;
    let grid = build_grid(&data, &a.data, &a.grid)?;
    let rp = ReducedProblem::from_data(&grid, &data.xs, &data.ys, a.solver.c)?;
    let gamma = match a.solver.gamma {
        Some(g) => g,
        None => rp.exact_penalty_gamma(a.solver.gamma_safety)?,
    };
    let res = gist_solve(&rp, gamma, a.k, &a.solver.params())?;
    let active: Vec<f64> = res.support().iter().map(|&i| grid.t(i as isize)).collect();
    let alpha = unstandardize(&data, res.alpha.as_slice());
    let model = SplineModel::new(grid.clone(), alpha.clone())?;
    let mj = ModelJson {
        p: grid.order(),
        knots: grid.knots().to_vec(),
        alpha,
        active_knots: active.clone(),
        k: a.k,
        c: a.solver.c,
        gamma,
        objective: res.objective(),
        converged: res.converged,
        iterations: res.iterations,
    };
    let json = mj.to_json()?;
    if let Some(dir) = &a.out_dir {
        write_model_files(dir, &model, &data, &json, &active)?;
    }
    if let Some(path) = &a.trace {
        write_records(path, &res.steps)?;
    }
    emit(out, &json)
}

#[derive(Serialize)]
struct KSelection<'a> {
    model: ModelJson,
    bic: f64,
    table: &'a [KRow],
}

#[derive(Serialize)]
struct LambdaSelection<'a> {
    model: AsplineJson,
    table: &'a [LambdaRow],
}

#[derive(Serialize)]
struct AsplineJson {
    p: usize,
    knots: Vec<f64>,
    alpha: Vec<f64>,
    active_knots: Vec<f64>,
    lambda: f64,
    bic: f64,
    iterations: usize,
    converged: bool,
}

fn parse_k_grid(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Parameter(format!("cannot parse K grid {s:?}; use `a-b` or `a,b,c`"));
    if let Some((lo, hi)) = s.split_once('-') {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    s.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect()
}

fn parse_list<T: std::str::FromStr>(s: &str, name: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Parameter(format!("cannot parse {name} value {v:?}")))
        })
        .collect()
}

fn cmd_select(a: &SelectArgs, out: &mut dyn Write) -> Result<()> {
    let data = load(&a.data)?;
    let grid = build_grid(&data, &a.data, &a.grid)?;
    match a.over {
        Over::K => {
            let ks = parse_k_grid(&a.k_grid)?;
            let report = select_k_by_bic(
                &data.xs,
                &data.ys,
                &grid,
                &ks,
                a.solver.c,
                a.solver.gamma_safety,
                &a.solver.params(),
            )?;
            let row = report
                .table
                .iter()
                .find(|r| r.k == report.k)
                .expect("selected K is in the table");
            let model = SplineModel::new(
                report.model.grid().clone(),
                unstandardize(&data, report.model.coefficients()),
            )?;
            let mj = ModelJson {
                p: grid.order(),
                knots: model.grid().knots().to_vec(),
                alpha: model.coefficients().to_vec(),
                active_knots: report.knots.clone(),
                k: report.k,
                c: a.solver.c,
                gamma: row.gamma,
                objective: row.objective,
                converged: row.converged,
                iterations: row.iterations,
            };
            if let Some(dir) = &a.out_dir {
                write_model_files(dir, &model, &data, &mj.to_json()?, &report.knots)?;
                write_records(&dir.join("table.csv"), &flatten_k_rows(&report.table))?;
            }
            emit(
                out,
                &to_json(&KSelection {
                    model: mj,
                    bic: report.bic,
                    table: &report.table,
                })?,
            )
        }
        Over::Lambda => {
            let d = DifferenceOperators::new(&grid)?.d;
            let params = AsplineParams::new(1.0);
            let sel = select_lambda_by_bic(&grid, &data.xs, &data.ys, &d, &lambda_grid(), &params)?;
            let (idx, fitted) = sel.best.clone().ok_or_else(|| {
                Error::NumericalInstability("A-spline failed for every lambda".into())
            })?;
            let row = &sel.rows[idx];
            let model = SplineModel::new(fitted.grid().clone(), unstandardize(&data, fitted.coefficients()))?;
            let aj = AsplineJson {
                p: grid.order(),
                knots: model.grid().knots().to_vec(),
                alpha: model.coefficients().to_vec(),
                active_knots: row.knots.clone(),
                lambda: row.lambda,
                bic: row.bic,
                iterations: row.iterations,
                converged: row.converged,
            };
            if let Some(dir) = &a.out_dir {
                write_model_files(dir, &model, &data, &to_json(&aj)?, &row.knots)?;
                write_records(&dir.join("table.csv"), &flatten_lambda_rows(&sel.rows))?;
            }
            emit(
                out,
                &to_json(&LambdaSelection {
                    model: aj,
                    table: &sel.rows,
                })?,
            )
        }
    }
}

#[derive(Serialize)]
struct KCsvRow {
    #[serde(rename = "K")]
    k: usize,
    active: usize,
    ssr: f64,
    bic: f64,
    objective: f64,
    iterations: usize,
    converged: bool,
    knots: String,
    error: String,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

fn flatten_k_rows(rows: &[KRow]) -> Vec<KCsvRow> {
    rows.iter()
        .map(|r| KCsvRow {
            k: r.k,
            active: r.knots.len(),
            ssr: r.ssr,
            bic: r.bic,
            objective: r.objective,
            iterations: r.iterations,
            converged: r.converged,
            knots: join(&r.knots),
            error: r.error.clone().unwrap_or_default(),
        })
        .collect()
}

#[derive(Serialize)]
struct LambdaCsvRow {
    lambda: f64,
    active: usize,
    ssr: f64,
    bic: f64,
    iterations: usize,
    converged: bool,
    knots: String,
    error: String,
}

fn flatten_lambda_rows(rows: &[LambdaRow]) -> Vec<LambdaCsvRow> {
    rows.iter()
        .map(|r| LambdaCsvRow {
            lambda: r.lambda,
            active: r.knots.len(),
            ssr: r.ssr,
            bic: r.bic,
            iterations: r.iterations,
            converged: r.converged,
            knots: join(&r.knots),
            error: r.error.clone().unwrap_or_default(),
        })
        .collect()
}

fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let kind = match a.kind {
        KindArg::RandomCoef => SyntheticKind::RandomCoef,
        KindArg::SparseTruth => SyntheticKind::SparseTruth,
        KindArg::Bimodal => SyntheticKind::BimodalGauss,
    };
    let n = a.n.unwrap_or(if kind == SyntheticKind::BimodalGauss { 80 } else { 200 });
    let spec = SyntheticSpec {
        p: a.p,
        noise: a.noise,
        knot_rule: match a.knot_rule {
            RuleArg::Candidates => KnotRule::Candidates,
            RuleArg::Uniform => KnotRule::Uniform,
        },
        ..SyntheticSpec::new(kind, n, a.l, a.seed)
    };
    let data = gen_synthetic(&spec)?;
    let rows: Vec<Vec<f64>> = data.xs.iter().zip(&data.ys).map(|(x, y)| vec![*x, *y]).collect();
    match &a.output {
        Some(path) => write_csv_file(path, &["x", "y"], &rows),
        None => write_rows(out, &["x", "y"], &rows, "<stdout>"),
    }
}

fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let ls: Vec<usize> = parse_list(&a.l, "l")?;
    let ks: Vec<usize> = parse_list(&a.k, "K")?;
    let cs: Vec<f64> = parse_list(&a.c, "c")?;
    let mut specs = Vec::new();
    for &l in &ls {
        for &k in &ks {
            for &c in &cs {
                specs.push(BenchSpec::new(a.n, l, k, c));
            }
        }
    }
    let table = bench_monotone_vs_nonmonotone(&specs, a.repetitions, a.seed, &GistParams::default())?;
    if let Some(path) = &a.output {
        write_records(path, &table.rows)?;
    }
    emit(out, &to_json(&table)?)
}

fn cmd_aspline(a: &AsplineArgs, out: &mut dyn Write) -> Result<()> {
    let data = load(&a.data)?;
    let grid = build_grid(&data, &a.data, &a.grid)?;
    let b = grid.design_matrix(&data.xs)?;
    let d = DifferenceOperators::new(&grid)?.d;
    let params = AsplineParams {
        lambda: a.lambda,
        epsilon: a.epsilon,
        max_iter: a.max_iter,
        tol: a.tol,
    };
    let fit = adaptive_ridge_fit(&b, &d, &DVector::from_column_slice(&data.ys), &params)?;
    let refit = reestimate(&grid, &data.xs, &data.ys, &fit.selected)?;
    let score = bic(data.len(), ssr(&refit, &data.xs, &data.ys)?, spline_df(fit.selected.len(), grid.order()));
    let model = SplineModel::new(refit.grid().clone(), unstandardize(&data, refit.coefficients()))?;
    let knots: Vec<f64> = fit.selected.iter().map(|&i| grid.t(i as isize)).collect();
    let aj = AsplineJson {
        p: grid.order(),
        knots: model.grid().knots().to_vec(),
        alpha: model.coefficients().to_vec(),
        active_knots: knots.clone(),
        lambda: a.lambda,
        bic: score,
        iterations: fit.iterations,
        converged: fit.converged,
    };
    let json = to_json(&aj)?;
    if let Some(dir) = &a.out_dir {
        write_model_files(dir, &model, &data, &json, &knots)?;
    }
    emit(out, &json)
}
