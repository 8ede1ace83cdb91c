//! The acceptance suite: every criterion the artifact must satisfy, with
//! the tolerances pinned in code. Used both by the `acceptance`
//! integration test and by the CLI `selftest` command.
//!
//! All expected values are closed forms: the exponential-decay example
//! kernel (iterated kernels, resolvent, contraction constant, solution
//! curve), the BSDE reduction solved three independent ways, exponential
//! martingale means, Malliavin derivative identities, and the
//! Ornstein-Uhlenbeck cost integrals.

use std::sync::Arc;
use std::time::Instant;

use crate::apps;
use crate::grid::{build_graded_grid, TimeGrid};
use crate::kernels::{
    iterated_kernel_rows_up_to, make_example1_kernel, make_separable_kernel, resolvent_nystrom,
    resolvent_series, weighted_norm_l, KernelDecay,
};
use crate::malliavin::{brownian_malliavin_fd, fd_epsilon, jump_difference, PathFunctional};
use crate::solver::{
    compute_u_deterministic, picard_iterate, solve_y_deterministic, solve_y_mc, solve_zk,
    verify_martingale_representation, BsvieProblem, Driver, DriverDecay,
};
use crate::stochastics::{
    girsanov_weights, novikov_exponent, simulate_paths, JumpSpec, NovikovConfig, PathView,
};
use crate::error::Result;
use crate::grid::weighted_row_l1;

#[derive(Debug, Clone, serde::Serialize)]
pub struct CriterionReport {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed_s: f64,
}

impl CriterionReport {
    pub fn line(&self) -> String {
        format!(
            "criterion {:02} {} ({:6.1} s) {}: {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.elapsed_s,
            self.name,
            self.detail
        )
    }
}

fn run(id: usize, name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CriterionReport {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CriterionReport {
        id,
        name,
        passed,
        detail,
        elapsed_s: start.elapsed().as_secs_f64(),
    }
}

fn example1_grid() -> Arc<TimeGrid> {
    Arc::new(build_graded_grid(16.0, 16, 10, 1.15, 2.0).expect("grid"))
}

/// Criterion 1: both resolvent constructions reproduce
/// `Psi(t,s) = alpha e^{-(gamma - alpha)(s-t)}` to 1e-6 relative at all
/// grid pairs, cross-method max diff 1e-8, within 30 s.
pub fn criterion_1() -> CriterionReport {
    run(1, "example1-resolvent-closed-form", || {
        let start = Instant::now();
        let grid = example1_grid();
        let ex = make_example1_kernel(0.5, 2.0)?;
        let series = resolvent_series(&ex.kernel, 2.0, 1e-12, &grid, false)?;
        let nystrom = resolvent_nystrom(&ex.kernel, &grid, false)?;
        let nodes = grid.nodes();
        let n = grid.n_nodes();
        let mut rel_series = 0.0_f64;
        let mut rel_nystrom = 0.0_f64;
        for i in 0..n {
            for j in i..n {
                let exact = ex.resolvent_closed_form(nodes[i], nodes[j]);
                rel_series = rel_series.max((series.at(i, j) - exact).abs() / exact.abs());
                rel_nystrom = rel_nystrom.max((nystrom.at(i, j) - exact).abs() / exact.abs());
            }
        }
        let cross = series.max_abs_diff(&nystrom);
        let elapsed = start.elapsed().as_secs_f64();
        let pass = rel_series <= 1e-6 && rel_nystrom <= 1e-6 && cross <= 1e-8 && elapsed <= 30.0;
        Ok((
            pass,
            format!(
                "rel(series) {rel_series:.2e} <= 1e-6, rel(nystrom) {rel_nystrom:.2e} <= 1e-6, \
                 cross {cross:.2e} <= 1e-8, t_max {} >= 15, {elapsed:.1} s <= 30 s",
                grid.t_max()
            ),
        ))
    })
}

/// Criterion 2: weighted norms of the iterated kernels observe the
/// induction bound `<= L^n + n 1e-8` for n = 1..6, with `L` matching
/// `alpha / (gamma + lambda/2)` to 1e-10.
pub fn criterion_2() -> CriterionReport {
    run(2, "iterated-kernel-induction-bound", || {
        let grid = example1_grid();
        let ex = make_example1_kernel(0.5, 2.0)?;
        let lambda = 2.0;
        let l = weighted_norm_l(&ex.kernel, lambda, &grid)?;
        let l_err = (l - ex.contraction_closed_form(lambda)).abs();
        let n_nodes = grid.n_nodes();
        let mut sup = vec![0.0_f64; 6];
        for i in 0..n_nodes {
            let rows = iterated_kernel_rows_up_to(&ex.kernel, 6, grid.nodes()[i], &grid)?;
            for (m, row) in rows.iter().enumerate() {
                let mut padded = vec![0.0; n_nodes];
                padded[i..].copy_from_slice(row);
                sup[m] = sup[m].max(weighted_row_l1(&grid, i, 0.5 * lambda, &padded));
            }
        }
        let mut bound_ok = true;
        let mut worst = String::new();
        for (m, &s) in sup.iter().enumerate() {
            let n = m + 1;
            let bound = l.powi(n as i32) + n as f64 * 1e-8;
            if s > bound {
                bound_ok = false;
                worst = format!("n={n}: {s:.3e} > {bound:.3e}");
            }
        }
        let pass = bound_ok && l_err <= 1e-10;
        Ok((
            pass,
            format!(
                "norms within L^n + n*1e-8 for n=1..6 ({}), |L - 1/6| = {l_err:.2e} <= 1e-10",
                if bound_ok { "ok" } else { &worst }
            ),
        ))
    })
}

fn example1_y_problem(lambda: f64) -> Result<BsvieProblem> {
    let ex = make_example1_kernel(0.5, 2.0)?;
    Ok(BsvieProblem::new(
        ex.kernel,
        Driver::deterministic(
            |_t, s| (-s).exp(),
            DriverDecay {
                prefactor: 1.0,
                rate: 1.0,
            },
        ),
        |_| 0.0,
        None,
        lambda,
    ))
}

fn y_grid() -> Arc<TimeGrid> {
    Arc::new(build_graded_grid(20.0, 20, 10, 1.15, 2.0).expect("grid"))
}

/// Criterion 3: explicit Y for Example 1 with mu = 1, f = 1: Y(0) = 1.2 to
/// 1e-6 absolute and the full curve matches the closed-form integral to
/// 1e-6 sup-norm.
pub fn criterion_3() -> CriterionReport {
    run(3, "example1-explicit-y", || {
        let grid = y_grid();
        let problem = example1_y_problem(2.0)?;
        let table = resolvent_nystrom(&problem.kernel, &grid, false)?;
        let y = solve_y_deterministic(&problem, &table)?;
        let y0_err = (y.values[0] - 1.2).abs();
        let mut sup = 0.0_f64;
        for (i, &t) in grid.nodes().iter().enumerate() {
            sup = sup.max((y.values[i] - apps::example1_y_closed_form(t, 0.5, 2.0, 1.0)).abs());
        }
        let pass = y0_err <= 1e-6 && sup <= 1e-6;
        Ok((
            pass,
            format!("|Y(0) - 1.2| = {y0_err:.2e} <= 1e-6, sup-norm {sup:.2e} <= 1e-6"),
        ))
    })
}

/// Criterion 4: Picard iteration converges to the explicit curve within
/// `1e-8` plus quadrature error, with successive weighted-error ratios
/// bounded by `L + 0.05` from the second iteration on.
pub fn criterion_4() -> CriterionReport {
    run(4, "picard-agreement-and-rate", || {
        let grid = y_grid();
        let problem = example1_y_problem(2.0)?;
        let table = resolvent_nystrom(&problem.kernel, &grid, false)?;
        let y_explicit = solve_y_deterministic(&problem, &table)?;
        let pic = picard_iterate(&problem, &grid, 200, 1e-8)?;
        let sup = y_explicit
            .values
            .iter()
            .zip(&pic.y)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        let l = table.l_lambda;
        let mut rate_ok = true;
        let mut worst_ratio = 0.0_f64;
        for w in pic.history.windows(2) {
            if w[0] > 1e-13 {
                let r = w[1] / w[0];
                worst_ratio = worst_ratio.max(r);
                if r > l + 0.05 {
                    rate_ok = false;
                }
            }
        }
        let pass = sup <= 1e-8 + 1e-9 && rate_ok;
        Ok((
            pass,
            format!(
                "|Y_picard - Y_explicit| = {sup:.2e} <= 1e-8 + quad, worst ratio {worst_ratio:.4} \
                 <= L + 0.05 = {:.4}, {} iterations",
                l + 0.05,
                pic.iterations
            ),
        ))
    })
}

/// Criterion 5: Example 2 (phi = -1, h = e^{-s}): Y(0) = 0.5 via the
/// direct formula, the resolvent pipeline, and the backward-ODE oracle,
/// pairwise within 1e-6.
pub fn criterion_5() -> CriterionReport {
    run(5, "example2-triple-agreement", || {
        let grid = Arc::new(build_graded_grid(12.0, 12, 8, 1.0, 6.0)?);
        let sep = make_separable_kernel(|_| -1.0, KernelDecay::bounded(1.0)?, "phi=-1");
        let report = apps::example2_report(
            &sep,
            |s: f64| (-s).exp(),
            DriverDecay {
                prefactor: 1.0,
                rate: 1.0,
            },
            &grid,
            None,
        )?;
        let d_ab = (report.y0_formula - report.y0_resolvent).abs();
        let d_ac = (report.y0_formula - report.y0_ode).abs();
        let d_bc = (report.y0_resolvent - report.y0_ode).abs();
        let d_half = (report.y0_formula - 0.5).abs();
        let pass = d_ab <= 1e-6 && d_ac <= 1e-6 && d_bc <= 1e-6 && d_half <= 1e-6;
        Ok((
            pass,
            format!(
                "Y(0): formula {:.8}, resolvent {:.8}, ode {:.8}; pairwise diffs \
                 {d_ab:.2e}/{d_ac:.2e}/{d_bc:.2e} <= 1e-6, |Y(0)-0.5| = {d_half:.2e}",
                report.y0_formula, report.y0_resolvent, report.y0_ode
            ),
        ))
    })
}

/// Pooled terminal-density mean over chunked path ensembles.
fn mean_m_terminal(
    grid: &Arc<TimeGrid>,
    xi: impl Fn(f64) -> f64 + Send + Sync + Copy,
    jump_spec: Option<&JumpSpec>,
    total_paths: usize,
    chunk: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut done = 0usize;
    let mut chunk_id = 0u64;
    while done < total_paths {
        let m = chunk.min(total_paths - done);
        let paths = simulate_paths(grid, m, jump_spec, seed + chunk_id)?;
        let w = girsanov_weights(&paths, xi, jump_spec)?;
        for p in 0..m {
            let v = w.m_terminal(p);
            sum += v;
            sumsq += v * v;
        }
        done += m;
        chunk_id += 1;
    }
    let n = total_paths as f64;
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Criterion 6: exponential-martingale means are 1 within 3 sigma at 1e5
/// paths for three coefficient configurations, and the Novikov exponent
/// for `xi = xi0 e^{-delta s}` matches `xi0^2 / (4 delta)` to 1e-8; all
/// within 60 s.
pub fn criterion_6() -> CriterionReport {
    run(6, "girsanov-martingale-suite", || {
        let start = Instant::now();
        let grid = Arc::new(build_graded_grid(5.0, 125, 3, 1.0, 2.0)?);
        let total = 100_000;
        let chunk = 10_000;
        let mut all_ok = true;
        let mut parts = Vec::new();

        let js = JumpSpec::constant_beta(vec![1.0], vec![1.0], 0.5)?;
        let results = [
            ("xi=0.3", mean_m_terminal(&grid, |_| 0.3, None, total, chunk, 42)?),
            (
                "beta0=0.5",
                mean_m_terminal(&grid, |_| 0.0, Some(&js), total, chunk, 43)?,
            ),
            (
                "xi=e^{-0.5s},beta0=0.5",
                mean_m_terminal(&grid, |s| (-0.5 * s).exp(), Some(&js), total, chunk, 44)?,
            ),
        ];
        for (label, (mean, sigma)) in &results {
            let dev = (mean - 1.0).abs();
            all_ok &= dev <= 3.0 * sigma;
            parts.push(format!("{label}: E[M] = {mean:.5} ({:.1} sigma)", dev / sigma));
        }

        // Novikov closed form: 1/2 int xi0^2 e^{-2 delta s} = xi0^2/(4 delta).
        let nov_grid = Arc::new(build_graded_grid(40.0, 20, 10, 1.2, 2.0)?);
        let (xi0, delta) = (1.0, 0.5);
        let nov = novikov_exponent(
            |s| xi0 * (-delta * s).exp(),
            None,
            &nov_grid,
            NovikovConfig::default(),
        )?;
        let nov_err = (nov - xi0 * xi0 / (4.0 * delta)).abs();
        all_ok &= nov_err <= 1e-8;
        let elapsed = start.elapsed().as_secs_f64();
        all_ok &= elapsed <= 60.0;
        parts.push(format!("novikov err {nov_err:.2e} <= 1e-8"));
        parts.push(format!("{elapsed:.1} s <= 60 s"));
        Ok((all_ok, parts.join("; ")))
    })
}

/// Criterion 7: Malliavin unit oracles: FD of B(T) is the indicator
/// exactly; FD of B(T)^2 is 2B(T) to 1e-6 per path; the jump-count
/// difference is exactly 1; FD of M(t) matches `M(t) xi(s) 1_{s<=t}` to
/// 1e-4 RMS over 1e4 paths.
pub fn criterion_7() -> CriterionReport {
    run(7, "malliavin-unit-oracles", || {
        let grid = Arc::new(build_graded_grid(4.0, 8, 4, 1.0, 2.0)?);
        let n_last = grid.n_nodes() - 1;
        let t2 = grid.node_index_of(2.0).unwrap();
        let mut ok = true;
        let mut parts = Vec::new();

        // Indicator: D_s B(2) = 1_{s <= 2}; the s > T side is exactly zero,
        // the s <= T side is 1 up to f64 summation of the increments.
        let paths = simulate_paths(&grid, 64, None, 11)?;
        let f_b = PathFunctional::new(move |v: &PathView| v.b_at_node(t2), "B(2)");
        let eps = fd_epsilon(1.0);
        let mut exact_ok = true;
        for p in 0..paths.n_paths() {
            exact_ok &= (brownian_malliavin_fd(&f_b, &paths, p, 1.0, eps)? - 1.0).abs() <= 1e-9;
            exact_ok &= (brownian_malliavin_fd(&f_b, &paths, p, 2.0, eps)? - 1.0).abs() <= 1e-9;
            exact_ok &= brownian_malliavin_fd(&f_b, &paths, p, 3.0, eps)? == 0.0;
        }
        ok &= exact_ok;
        parts.push(format!("D_s B(T) indicator exact: {exact_ok}"));

        // Quadratic: D_s B(T)^2 = 2 B(T) to 1e-6 per path.
        let f_sq = PathFunctional::new(
            move |v: &PathView| v.b_at_node(n_last) * v.b_at_node(n_last),
            "B(T)^2",
        );
        let mut worst_sq = 0.0_f64;
        for p in 0..paths.n_paths() {
            let d = brownian_malliavin_fd(&f_sq, &paths, p, 1.0, eps)?;
            worst_sq = worst_sq.max((d - 2.0 * paths.view(p).b_at_node(n_last)).abs());
        }
        ok &= worst_sq <= 1e-6;
        parts.push(format!("|D B^2 - 2B| max {worst_sq:.2e} <= 1e-6"));

        // Jump-count difference exactly 1.
        let js = JumpSpec::constant_beta(vec![1.0], vec![0.5], 0.25)?;
        let jpaths = simulate_paths(&grid, 64, Some(&js), 12)?;
        let f_count = PathFunctional::new(|v: &PathView| v.jumps.len() as f64, "jump count");
        let mut count_ok = true;
        for p in 0..jpaths.n_paths() {
            count_ok &= jump_difference(&f_count, &jpaths, p, 1.5, 0) == 1.0;
        }
        ok &= count_ok;
        parts.push(format!("jump-count difference exact: {count_ok}"));

        // Density derivative vs Lemma oracle at 1e4 paths.
        let mpaths = simulate_paths(&grid, 10_000, None, 13)?;
        let w = girsanov_weights(&mpaths, |_| 0.3, None)?;
        let t3 = grid.node_index_of(3.0).unwrap();
        let deltas: Vec<f64> = mpaths.deltas().to_vec();
        let f_m = PathFunctional::new(
            move |v: &PathView| {
                let mut log_m = 0.0;
                for i in 0..t3 {
                    log_m += 0.3 * v.db[i] - 0.5 * 0.09 * deltas[i];
                }
                log_m.exp()
            },
            "M(3)",
        );
        let oracle = crate::malliavin::density_malliavin(&w, |_| 0.3, &grid, 1.0, 3.0)?;
        let mut rms = 0.0;
        for p in 0..mpaths.n_paths() {
            let d = brownian_malliavin_fd(&f_m, &mpaths, p, 1.0, eps)?;
            rms += (d - oracle[p]) * (d - oracle[p]);
        }
        rms = (rms / mpaths.n_paths() as f64).sqrt();
        ok &= rms <= 1e-4;
        parts.push(format!("FD(M) vs M xi 1 rms {rms:.2e} <= 1e-4"));
        Ok((ok, parts.join("; ")))
    })
}

fn representation_level(
    pts_per_panel: usize,
    degree: usize,
    n_paths: usize,
    seed: u64,
) -> Result<(f64, f64, usize)> {
    let grid = Arc::new(build_graded_grid(8.0, 25, pts_per_panel, 1.25, 2.0)?);
    let intervals = grid.n_nodes() - 1;
    let ex = make_example1_kernel(0.5, 2.0)?;
    let problem = BsvieProblem::new(
        ex.kernel,
        Driver::stochastic(
            |_t, s, view: &PathView| {
                let idx = view.grid.node_index_of(s).expect("node");
                (-s).exp() * view.b_at_node(idx).cos()
            },
            true,
            DriverDecay {
                prefactor: 1.0,
                rate: 1.0,
            },
        ),
        |_| 0.0,
        None,
        2.0,
    );
    let table = resolvent_nystrom(&problem.kernel, &grid, false)?;
    let paths = simulate_paths(&grid, n_paths, None, seed)?;
    let weights = girsanov_weights(&paths, |_| 0.0, None)?;
    let mc = solve_y_mc(&problem, &table, &paths, &weights, degree)?;
    let zk = solve_zk(&problem, &mc, &table, &paths, &weights, &[0])?;
    let rep = verify_martingale_representation(&problem, &zk, 0, &mc, &paths, 0)?;
    Ok((rep.rms_residual, rep.rms_u, intervals))
}

/// Criterion 8: representation residual for the no-jump stochastic
/// problem: RMS of `U(0) - sum Z dB_Q` decreases when the interval count
/// doubles and the regression degree rises from 2 to 4, with the fine
/// level at most 10% of RMS(U); within 5 minutes at 2e4 paths.
pub fn criterion_8() -> CriterionReport {
    run(8, "representation-residual-refinement", || {
        let start = Instant::now();
        let n_paths = 20_000;
        let (rms_coarse, rms_u_coarse, iv_coarse) = representation_level(5, 2, n_paths, 2024)?;
        let (rms_fine, rms_u_fine, iv_fine) = representation_level(11, 4, n_paths, 2024)?;
        let elapsed = start.elapsed().as_secs_f64();
        let ratio = rms_fine / rms_u_fine;
        let pass = iv_fine == 2 * iv_coarse
            && rms_fine < rms_coarse
            && ratio <= 0.10
            && elapsed <= 300.0;
        Ok((
            pass,
            format!(
                "intervals {iv_coarse} -> {iv_fine}, rms {rms_coarse:.4e} -> {rms_fine:.4e} \
                 (decreasing), fine rms / rms(U) = {:.3} <= 0.10 (rms_u {rms_u_coarse:.3e} -> \
                 {rms_u_fine:.3e}), {elapsed:.1} s <= 300 s",
                ratio
            ),
        ))
    })
}

/// Criterion 9: degenerate exactness: deterministic driver makes U vanish
/// to quadrature tolerance and Z, K vanish to FD tolerance; zero driver
/// makes Y identically zero.
pub fn criterion_9() -> CriterionReport {
    run(9, "degenerate-exactness", || {
        let grid = Arc::new(build_graded_grid(12.0, 10, 6, 1.2, 2.0)?);
        let mut ok = true;
        let mut parts = Vec::new();

        // Deterministic driver through the stochastic pipeline, with jumps
        // present so K surfaces exist.
        let ex = make_example1_kernel(0.5, 2.0)?;
        let js = JumpSpec::constant_beta(vec![1.0], vec![0.5], 0.5)?;
        let problem = BsvieProblem::new(
            ex.kernel.clone(),
            Driver::deterministic(
                |_t, s| (-s).exp(),
                DriverDecay {
                    prefactor: 1.0,
                    rate: 1.0,
                },
            ),
            |_| 0.0,
            Some(js),
            2.0,
        );
        let table = resolvent_nystrom(&problem.kernel, &grid, false)?;
        let y = solve_y_deterministic(&problem, &table)?;
        let u = compute_u_deterministic(&problem, &y.values, &grid)?;
        let u_sup = u.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
        ok &= u_sup <= 1e-8;
        parts.push(format!("deterministic U sup {u_sup:.2e} <= 1e-8"));

        let paths = simulate_paths(&grid, 2000, problem.jump_spec.as_ref(), 31)?;
        let weights = girsanov_weights(&paths, |_| 0.0, problem.jump_spec.as_ref())?;
        let mc = solve_y_mc(&problem, &table, &paths, &weights, 2)?;
        let zk = solve_zk(&problem, &mc, &table, &paths, &weights, &[0])?;
        let mut z_sup = 0.0_f64;
        let mut k_sup = 0.0_f64;
        for k in 0..zk.z_fits[0].len() {
            for p in (0..paths.n_paths()).step_by(97) {
                let (b, nj) = mc.states.state(p, k);
                z_sup = z_sup.max(zk.z_fits[0][k].eval(b, nj).abs());
                for fit in &zk.k_fits[0][k] {
                    k_sup = k_sup.max(fit.eval(b, nj).abs());
                }
            }
        }
        ok &= z_sup <= 1e-7 && k_sup <= 1e-7;
        parts.push(format!("Z sup {z_sup:.2e}, K sup {k_sup:.2e} <= 1e-7"));

        // Zero driver: Y identically zero, exactly.
        let zero = BsvieProblem::new(
            ex.kernel,
            Driver::deterministic(
                |_, _| 0.0,
                DriverDecay {
                    prefactor: 1e-300,
                    rate: 1.0,
                },
            ),
            |_| 0.0,
            None,
            2.0,
        );
        let y0 = solve_y_deterministic(&zero, &table)?;
        let exact_zero = y0.values.iter().all(|&v| v == 0.0);
        let pic = picard_iterate(&zero, &grid, 5, 1e-12)?;
        let pic_zero = pic.y.iter().all(|&v| v == 0.0) && pic.iterations == 1;
        ok &= exact_zero && pic_zero;
        parts.push(format!(
            "zero driver: explicit Y == 0 {exact_zero}, picard Y == 0 at iteration 1 {pic_zero}"
        ));
        Ok((ok, parts.join("; ")))
    })
}

/// Criterion 10: control-demo oracles: the no-noise cost matches
/// `x0^2/(rho - 2a)` to 1e-8, and the stochastic OU cost matches 2/3
/// within 3 sigma at 1e5 paths; within 2 minutes.
pub fn criterion_10() -> CriterionReport {
    run(10, "control-demo-oracles", || {
        let start = Instant::now();
        let grid = Arc::new(build_graded_grid(15.0, 30, 6, 1.0, 2.0)?);
        let zero: apps::ControlLaw = Arc::new(|_, _| 0.0);
        let base = apps::ControlProblem {
            a: -1.0,
            memory: None,
            c: 0.0,
            rho: 1.0,
            sigma: 0.0,
            x0: 1.0,
            grid: Arc::clone(&grid),
            n_paths: 1,
            seed: 7,
            explosion_cap: 1e9,
        };
        // Deterministic case.
        let paths1 = simulate_paths(&grid, 1, None, 7)?;
        let (c_det, _) = apps::control_cost_samples(&base, &zero, &paths1)?;
        let det_err = (c_det[0] - 1.0 / 3.0).abs();

        // Stochastic OU case, pooled over chunks of 2e4 paths.
        let mut stoch = base.clone();
        stoch.sigma = 1.0;
        stoch.n_paths = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for chunk in 0..5u64 {
            let paths = simulate_paths(&grid, 20_000, None, 7 + chunk)?;
            let (costs, _) = apps::control_cost_samples(&stoch, &zero, &paths)?;
            for c in costs {
                sum += c;
                sumsq += c * c;
            }
        }
        let n = 100_000.0;
        let mean = sum / n;
        let var = (sumsq / n - mean * mean).max(0.0) * n / (n - 1.0);
        let sigma = (var / n).sqrt();
        let dev = (mean - 2.0 / 3.0).abs();
        let elapsed = start.elapsed().as_secs_f64();
        let pass = det_err <= 1e-8 && dev <= 3.0 * sigma && elapsed <= 120.0;
        Ok((
            pass,
            format!(
                "deterministic |J - 1/3| = {det_err:.2e} <= 1e-8; OU J = {mean:.5} vs 2/3 \
                 ({:.1} sigma, 1e5 paths); {elapsed:.1} s <= 120 s",
                dev / sigma
            ),
        ))
    })
}

/// Run criteria 1-10 in order. (Criterion 11, byte-identical CLI reruns,
/// lives with the CLI where the output files are produced.)
pub fn run_all() -> Vec<CriterionReport> {
    vec![
        criterion_1(),
        criterion_2(),
        criterion_3(),
        criterion_4(),
        criterion_5(),
        criterion_6(),
        criterion_7(),
        criterion_8(),
        criterion_9(),
        criterion_10(),
    ]
}
