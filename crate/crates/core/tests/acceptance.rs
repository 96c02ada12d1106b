//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line to
//! stderr (uncaptured) and then asserts. Tests take a shared lock so that the
//! runtime limits and timings are not distorted by other tests.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use knotsel::aspline::{adaptive_ridge_fit, AsplineParams};
use knotsel::diff::DifferenceOperators;
use knotsel::experiments::{
    bench_monotone_vs_nonmonotone, gen_synthetic, median, mse_monte_carlo, select_k_by_bic, BenchSpec, KnotRule,
    SyntheticKind, SyntheticSpec, MSE_SAMPLES,
};
use knotsel::gist::{gist_solve, GistParams};
use knotsel::knots::{make_equispaced_grid, make_grid_from_interior, KnotGrid};
use knotsel::reduction::ReducedProblem;
use knotsel::trimmed::prox_trimmed_l1;
use knotsel::Error;

static SERIAL: Mutex<()> = Mutex::new(());

fn verdict(n: usize, title: &str, pass: bool, detail: &str, elapsed: Duration) {
    let line = format!(
        "criterion {n:>2} ({title}): {} | {detail} | {:.2}s",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(pass, "{line}");
}

// ---------- independent oracles ----------

/// Sum of the `d - k` smallest magnitudes, by full sort.
fn trimmed_oracle(z: &[f64], k: usize) -> f64 {
    let mut m: Vec<f64> = z.iter().map(|v| v.abs()).collect();
    m.sort_by(f64::total_cmp);
    m[..z.len() - k].iter().sum()
}

fn soft(a: f64, t: f64) -> f64 {
    a.signum() * (a.abs() - t).max(0.0)
}

fn prox_objective(z: &[f64], a: &[f64], lambda: f64, k: usize) -> f64 {
    lambda * trimmed_oracle(z, k) + 0.5 * z.iter().zip(a).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
}

/// Minimum of the prox objective over all kept-sets of size `k`.
fn prox_brute_force(a: &[f64], lambda: f64, k: usize) -> f64 {
    let d = a.len();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << d) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let z: Vec<f64> = (0..d)
            .map(|i| if mask >> i & 1 == 1 { a[i] } else { soft(a[i], lambda) })
            .collect();
        best = best.min(prox_objective(&z, a, lambda, k));
    }
    best
}

fn random_interior(rng: &mut ChaCha8Rng, l: usize) -> Vec<f64> {
    let mut t = vec![0.0];
    for _ in 0..l {
        let last = *t.last().unwrap();
        t.push(last + 0.3 + rng.random::<f64>());
    }
    let end = *t.last().unwrap();
    t.iter().map(|v| v / end).collect()
}

/// Least-squares polynomial coefficients in `u = x - center` through the
/// spline values at `p + 1` points of `[a, b)`.
fn local_poly(eval: &dyn Fn(f64) -> f64, a: f64, b: f64, center: f64, p: usize) -> Vec<f64> {
    let m = p + 1;
    let pts: Vec<f64> = (0..m).map(|k| a + (b - a) * (k as f64 + 0.5) / m as f64).collect();
    let v = DMatrix::from_fn(m, m, |r, c| (pts[r] - center).powi(c as i32));
    let y = DVector::from_iterator(m, pts.iter().map(|&x| eval(x)));
    v.lu().solve(&y).expect("distinct nodes").as_slice().to_vec()
}

fn second_difference(dim: usize) -> DMatrix<f64> {
    let rows = dim.saturating_sub(2);
    DMatrix::from_fn(rows, dim, |r, c| match c as isize - r as isize {
        0 | 2 => 1.0,
        1 => -2.0,
        _ => 0.0,
    })
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

fn instance(seed: u64, n: usize, l: usize, c: f64) -> (KnotGrid, Vec<f64>, Vec<f64>, ReducedProblem) {
    let spec = SyntheticSpec::new(SyntheticKind::RandomCoef, n, l, seed);
    let data = gen_synthetic(&spec).unwrap();
    let grid = spec.candidate_grid().unwrap();
    let rp = ReducedProblem::from_data(&grid, &data.xs, &data.ys, c).unwrap();
    (grid, data.xs, data.ys, rp)
}

// ---------- criteria ----------

#[test]
fn criterion_01_prox_matches_brute_force() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let d = rng.random_range(1..=5);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lambda = rng.random_range(0.01..3.0);
        let k = rng.random_range(0..=d);
        let z = prox_trimmed_l1(&a, lambda, k).unwrap();
        let gap = prox_objective(&z, &a, lambda, k) - prox_brute_force(&a, lambda, k);
        worst = worst.max(gap);
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-10 && elapsed < Duration::from_secs(5);
    verdict(1, "prox oracle", pass, &format!("max excess over brute force {worst:.2e}"), elapsed);
}

#[test]
fn criterion_02_exact_penalty_caps_support() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut ok = 0;
    let mut worst_nnz = 0;
    for i in 0..100u64 {
        let c = if i % 2 == 0 { 0.0 } else { 0.1 };
        let (_, _, _, rp) = instance(2000 + i, 50, 20, c);
        let col = (0..rp.l1.ncols())
            .map(|j| rp.l1.column(j).norm() + c.sqrt() * rp.l2.column(j).norm())
            .fold(0.0, f64::max);
        let bound = col * (rp.z1.norm_squared() + c * rp.z2.norm_squared()).sqrt();
        let res = gist_solve(&rp, 1.001 * bound, 5, &GistParams::default()).unwrap();
        let nnz = res.beta.iter().filter(|v| **v != 0.0).count();
        worst_nnz = worst_nnz.max(nnz);
        if nnz <= 5 {
            ok += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = ok == 100 && elapsed < Duration::from_secs(60);
    verdict(2, "exact penalty", pass, &format!("{ok}/100 runs with |beta|_0 <= 5, max {worst_nnz}"), elapsed);
}

#[test]
fn criterion_03_knot_activity_indicator() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_zero = 0.0f64;
    let mut min_jump = f64::INFINITY;
    let mut worst_lemma = 0.0f64;
    for _ in 0..200 {
        let p = rng.random_range(0..=3);
        let l = rng.random_range(3..=12);
        let grid = make_grid_from_interior(&random_interior(&mut rng, l), p).unwrap();
        let ops = DifferenceOperators::new(&grid).unwrap();
        let beta = DVector::from_fn(l - 1, |_, _| {
            if rng.random::<f64>() < 0.5 {
                0.0
            } else {
                let m = rng.random_range(0.5..2.0);
                if rng.random::<bool>() {
                    m
                } else {
                    -m
                }
            }
        });
        let extra = DVector::from_fn(p + 1, |_, _| rng.random_range(-1.0..1.0));
        let alpha = ops.lift(&beta, &extra);
        let coef = alpha.as_slice().to_vec();
        let model = knotsel::knots::SplineModel::new(grid.clone(), coef).unwrap();
        let eval = |x: f64| model.eval(x).unwrap();
        let plus = &ops.d_plus * &alpha;
        let minus = &ops.d_minus * &alpha;
        for i in 1..l {
            let ti = grid.t(i as isize);
            let left = local_poly(&eval, grid.t(i as isize - 1), ti, ti, p);
            let right = local_poly(&eval, ti, grid.t(i as isize + 1), ti, p);
            let scale = left.iter().chain(&right).fold(1.0f64, |m, v| m.max(v.abs()));
            worst_lemma = worst_lemma
                .max((right[p] - plus[i - 1]).abs() / scale)
                .max((left[p] - minus[i - 1]).abs() / scale);
            if beta[i - 1] == 0.0 {
                for k in 0..=p {
                    worst_zero = worst_zero.max((left[k] - right[k]).abs() / scale);
                }
            } else {
                min_jump = min_jump.min((right[p] - left[p]).abs() / scale);
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_zero <= 1e-8 && min_jump > 1e-8 && worst_lemma <= 1e-8 && elapsed < Duration::from_secs(10);
    verdict(
        3,
        "knot activity",
        pass,
        &format!(
            "zeroed: max rel coefficient gap {worst_zero:.2e}; active: min rel leading jump {min_jump:.2e}; \
             D+/D- leading coefficient error {worst_lemma:.2e}"
        ),
        elapsed,
    );
}

#[test]
fn criterion_04_closed_form_inverse() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut parts = Vec::new();
    for p in 0..=3 {
        for l in [5usize, 50, 200] {
            let grid = make_equispaced_grid(0.0, 1.0, l, p).unwrap();
            let ops = DifferenceOperators::new(&grid).unwrap();
            let resid = inf_norm(&(&ops.d_hat * &ops.sigma - DMatrix::identity(l + p, l + p)));
            parts.push(format!("p{p}/l{l}={resid:.1e}"));
            if !(resid <= 1e-10) {
                failures.push(format!("p={p},l={l}"));
            }
        }
    }
    let elapsed = start.elapsed();
    let detail = if failures.is_empty() {
        parts.join(" ")
    } else {
        format!("{} | over 1e-10: {}", parts.join(" "), failures.join(" "))
    };
    verdict(4, "closed-form inverse", failures.is_empty(), &detail, elapsed);
}

#[test]
fn criterion_05_reduction_identity() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let n = rng.random_range(25..80);
        let l = rng.random_range(4..16);
        let c = [0.0, 0.1, 1.0][i as usize % 3];
        let (grid, xs, ys, rp) = instance(5000 + i, n, l, c);
        let k = rng.random_range(0..l);
        let beta = DVector::from_fn(l - 1, |_, _| rng.random_range(-2.0..2.0));
        let f = rp.objective(&beta, k).unwrap();
        // inner minimum over beta' by SVD least squares on the stacked system
        let ops = DifferenceOperators::new(&grid).unwrap();
        let b = grid.design_matrix(&xs).unwrap();
        let dsm = second_difference(grid.dim());
        let s = &b * &ops.sigma;
        let t = &dsm * &ops.sigma;
        let (s1, s2) = (s.columns(0, l - 1), s.columns(l - 1, 4));
        let (t1, t2) = (t.columns(0, l - 1), t.columns(l - 1, 4));
        let rc = c.sqrt();
        let rows = n + t.nrows();
        let mut a = DMatrix::zeros(rows, 4);
        a.rows_mut(0, n).copy_from(&s2);
        a.rows_mut(n, t.nrows()).copy_from(&(t2 * rc));
        let mut rhs = DVector::zeros(rows);
        rhs.rows_mut(0, n).copy_from(&(DVector::from_column_slice(&ys) - s1 * &beta));
        rhs.rows_mut(n, t.nrows()).copy_from(&(-(t1 * &beta) * rc));
        let bp = a.clone().svd(true, true).solve(&rhs, 1e-14).unwrap();
        let fit = DVector::from_column_slice(&ys) - s1 * &beta - s2 * &bp;
        let rough = t1 * &beta + t2 * &bp;
        let g = 0.5 * fit.norm_squared() + 0.5 * c * rough.norm_squared() + rp.gamma * trimmed_oracle(beta.as_slice(), k);
        worst = worst.max((f - g).abs() / (1.0 + f.abs()));
    }
    let elapsed = start.elapsed();
    verdict(5, "reduction identity", worst <= 1e-8, &format!("max |F - min G| / (1 + |F|) = {worst:.2e}"), elapsed);
}

#[test]
fn criterion_06_gradient_finite_differences() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst = 0.0f64;
    for i in 0..50u64 {
        let c = if i % 2 == 0 { 0.0 } else { 0.5 };
        let (_, _, _, rp) = instance(6000 + i, 60, 12, c);
        let beta = DVector::from_fn(rp.dim(), |_, _| rng.random_range(-1.0..1.0));
        let g = rp.grad_h(&beta);
        let h = 1e-6;
        let fd = DVector::from_fn(rp.dim(), |j, _| {
            let mut up = beta.clone();
            let mut dn = beta.clone();
            up[j] += h;
            dn[j] -= h;
            (rp.smooth(&up) - rp.smooth(&dn)) / (2.0 * h)
        });
        worst = worst.max((&g - &fd).norm() / g.norm().max(1e-12));
    }
    let elapsed = start.elapsed();
    verdict(6, "gradient check", worst <= 1e-5, &format!("max relative error {worst:.2e}"), elapsed);
}

#[test]
fn criterion_07_line_search_conditions() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut mono_bad = 0;
    let mut non_bad = 0;
    let mut steps = 0;
    for i in 0..50u64 {
        let (_, _, _, rp) = instance(7000 + i, 80, 25, if i % 2 == 0 { 0.0 } else { 0.1 });
        let k = 1 + (i as usize % 8);
        let mono = gist_solve(&rp, rp.gamma, k, &GistParams::monotone()).unwrap();
        if mono.objective_trace.windows(2).any(|w| w[1] > w[0]) {
            mono_bad += 1;
        }
        let params = GistParams::default();
        let non = gist_solve(&rp, rp.gamma, k, &params).unwrap();
        let trace = &non.objective_trace;
        for (t, s) in non.steps.iter().enumerate() {
            let lo = (t + 1).saturating_sub(params.window);
            let reference = trace[lo..=t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            steps += 1;
            if !(trace[t + 1] <= reference - 0.5 * params.sigma * s.eta * s.step_sq) {
                non_bad += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        7,
        "line search",
        mono_bad == 0 && non_bad == 0,
        &format!("M=1 traces increasing: {mono_bad}/50; M=10 steps violating acceptance: {non_bad}/{steps}"),
        elapsed,
    );
}

#[test]
fn criterion_08_bimodal_fit_beats_cubic() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut proposed = Vec::new();
    let mut cubic = Vec::new();
    for seed in 0..20u64 {
        let spec = SyntheticSpec::bimodal(50, 8000 + seed);
        let data = gen_synthetic(&spec).unwrap();
        let grid = spec.candidate_grid().unwrap();
        let rp = ReducedProblem::from_data(&grid, &data.xs, &data.ys, 0.0).unwrap();
        for (k, out) in [(10, &mut proposed), (0, &mut cubic)] {
            let res = gist_solve(&rp, rp.gamma, k, &GistParams::default()).unwrap();
            let fit = rp.spline(&res.beta);
            out.push(mse_monte_carlo(&data.truth, &fit, MSE_SAMPLES, seed).unwrap());
        }
    }
    let (mp, mc) = (median(&proposed), median(&cubic));
    let elapsed = start.elapsed();
    let pass = mp < mc && elapsed < Duration::from_secs(120);
    verdict(8, "bimodal fit", pass, &format!("median MSE K=10 {mp:.3e} vs K=0 {mc:.3e}"), elapsed);
}

#[test]
fn criterion_09_stable_across_candidate_counts() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let ks: Vec<usize> = (1..=20).collect();
    let mut medians = Vec::new();
    for l in [50usize, 100, 200] {
        let mut logs = Vec::new();
        for seed in 0..20u64 {
            let spec = SyntheticSpec::new(SyntheticKind::SparseTruth, 100, l, 9000 + seed).with_knot_rule(KnotRule::Uniform);
            let data = gen_synthetic(&spec).unwrap();
            let grid = spec.candidate_grid().unwrap();
            let report = select_k_by_bic(&data.xs, &data.ys, &grid, &ks, 0.0, 1.001, &GistParams::default()).unwrap();
            logs.push(mse_monte_carlo(&data.truth, &report.model, MSE_SAMPLES, seed).unwrap().ln());
        }
        medians.push((l, median(&logs)));
    }
    let lo = medians.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
    let hi = medians.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
    let elapsed = start.elapsed();
    let pass = hi - lo < 1.0 && elapsed < Duration::from_secs(600);
    let detail = medians
        .iter()
        .map(|(l, m)| format!("l={l}: {m:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(9, "l stability", pass, &format!("median ln MSE {detail}; spread {:.3}", hi - lo), elapsed);
}

#[test]
fn criterion_10_nonmonotone_speedup() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let table =
        bench_monotone_vs_nonmonotone(&[BenchSpec::new(200, 100, 10, 0.0)], 20, 10_000, &GistParams::default()).unwrap();
    let elapsed = start.elapsed();
    let frac = table.summary.nonmonotone_faster;
    let pass = frac >= 0.5 && elapsed < Duration::from_secs(600);
    verdict(
        10,
        "nonmonotone speedup",
        pass,
        &format!(
            "nonmonotone faster in {:.0}% of 20; log2 ratio quartiles {:.2}/{:.2}/{:.2}",
            100.0 * frac,
            table.summary.q1,
            table.summary.median,
            table.summary.q3
        ),
        elapsed,
    );
}

#[test]
fn criterion_11_aspline_instability_surfaces() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut unstable = 0;
    let mut other = Vec::new();
    for seed in 0..10u64 {
        let spec = SyntheticSpec::new(SyntheticKind::SparseTruth, 30, 100, 11_000 + seed);
        let data = gen_synthetic(&spec).unwrap();
        let grid = spec.candidate_grid().unwrap();
        let b = grid.design_matrix(&data.xs).unwrap();
        let d = DifferenceOperators::new(&grid).unwrap().d;
        match adaptive_ridge_fit(&b, &d, &DVector::from_column_slice(&data.ys), &AsplineParams::new(1e-4)) {
            Err(Error::NumericalInstability(_)) => unstable += 1,
            Err(e) => other.push(e.kind()),
            Ok(_) => {}
        }
    }
    let elapsed = start.elapsed();
    verdict(
        11,
        "A-spline instability",
        unstable >= 1 && other.is_empty(),
        &format!("instability raised in {unstable}/10 seeds; other errors {other:?}"),
        elapsed,
    );
}
