//! Command implementations and the exit-code contract:
//! 1 = configuration error, 2 = assumption violation, 3 = numeric failure,
//! 4 = verifier or closed-form check failure beyond tolerance.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use bsvie::apps::{self, ControlLaw};
use bsvie::export;
use bsvie::grid::{build_graded_grid, TimeGrid};
use bsvie::kernels::{
    make_example1_kernel, make_separable_kernel, resolvent_nystrom, resolvent_residual,
    resolvent_series, KernelDecay, SeparableKernel, TwoTimeKernel,
};
use bsvie::solver::{
    compute_u_deterministic, picard_iterate, solve_y_deterministic, solve_y_mc, solve_zk,
    verify_m_solution, verify_martingale_representation, AssumptionReport, BsvieProblem, Driver,
    DriverDecay,
};
use bsvie::stochastics::{girsanov_weights, simulate_paths, JumpSpec};
use bsvie::{Error as LibError, PathBundle};

use crate::config::{
    ControlConfig, DriverConfig, Example2Config, GridConfig, KernelConfig, PhiConfig, RunConfig,
};

pub enum CmdError {
    Config(String),
    Assumption(String),
    Numeric(String),
    Verifier(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Config(_) => 1,
            CmdError::Assumption(_) => 2,
            CmdError::Numeric(_) => 3,
            CmdError::Verifier(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CmdError::Config(m)
            | CmdError::Assumption(m)
            | CmdError::Numeric(m)
            | CmdError::Verifier(m) => m,
        }
    }
}

impl From<LibError> for CmdError {
    fn from(e: LibError) -> Self {
        match &e {
            LibError::InvalidParameter(_) => CmdError::Config(e.to_string()),
            LibError::AssumptionViolated { .. }
            | LibError::ContractionViolated { .. }
            | LibError::MeasureDegenerate { .. }
            | LibError::Divergent { .. } => CmdError::Assumption(e.to_string()),
            _ => CmdError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError::Numeric(format!("io error: {e}"))
    }
}

impl From<serde_json::Error> for CmdError {
    fn from(e: serde_json::Error) -> Self {
        CmdError::Numeric(format!("serialization error: {e}"))
    }
}

/// Reproducibility metadata embedded in every diagnostics document.
#[derive(Serialize, Clone)]
struct RunMeta {
    artifact_version: &'static str,
    config_sha256: String,
    grid: GridConfig,
    seed: Option<u64>,
    threads_requested: usize,
}

fn meta(cfg: &RunConfig, hash: &str) -> RunMeta {
    RunMeta {
        artifact_version: env!("CARGO_PKG_VERSION"),
        config_sha256: hash.to_string(),
        grid: cfg.grid.clone(),
        seed: cfg.mc.map(|m| m.seed),
        threads_requested: cfg.threads,
    }
}

fn build_grid(cfg: &GridConfig) -> Result<Arc<TimeGrid>, CmdError> {
    build_graded_grid(
        cfg.t_max,
        cfg.n_panels,
        cfg.pts_per_panel,
        cfg.grading_rate,
        cfg.lambda,
    )
    .map(Arc::new)
    .map_err(|e| CmdError::Config(e.to_string()))
}

/// Kernel tabulated on a rectangular `(t, s)` lattice with bilinear
/// interpolation; built from a `t,s,phi` CSV file.
struct TabulatedKernel {
    ts: Vec<f64>,
    ss: Vec<f64>,
    values: Vec<f64>,
}

impl TabulatedKernel {
    fn load(path: &Path) -> Result<Self, CmdError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CmdError::Config(format!("cannot read kernel table: {e}")))?;
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if ln == 0 && line.starts_with('t') {
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(CmdError::Config(format!(
                    "kernel table line {} must be t,s,phi",
                    ln + 1
                )));
            }
            let t: f64 = parts[0].trim().parse().map_err(|e| {
                CmdError::Config(format!("kernel table line {}: {e}", ln + 1))
            })?;
            let s: f64 = parts[1].trim().parse().map_err(|e| {
                CmdError::Config(format!("kernel table line {}: {e}", ln + 1))
            })?;
            let v: f64 = parts[2].trim().parse().map_err(|e| {
                CmdError::Config(format!("kernel table line {}: {e}", ln + 1))
            })?;
            rows.push((t, s, v));
        }
        let mut ts: Vec<f64> = rows.iter().map(|r| r.0).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        let mut ss: Vec<f64> = rows.iter().map(|r| r.1).collect();
        ss.sort_by(f64::total_cmp);
        ss.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        if ts.len() < 2 || ss.len() < 2 || rows.len() != ts.len() * ss.len() {
            return Err(CmdError::Config(
                "kernel table must cover a full rectangular t x s lattice".into(),
            ));
        }
        let mut values = vec![0.0; ts.len() * ss.len()];
        for (t, s, v) in rows {
            let i = ts.partition_point(|&x| x < t - 1e-12);
            let j = ss.partition_point(|&x| x < s - 1e-12);
            values[i * ss.len() + j] = v;
        }
        Ok(TabulatedKernel { ts, ss, values })
    }

    fn eval(&self, t: f64, s: f64) -> f64 {
        let bracket = |xs: &[f64], x: f64| -> (usize, usize, f64) {
            let hi = xs.partition_point(|&v| v <= x).clamp(1, xs.len() - 1);
            let lo = hi - 1;
            let w = ((x - xs[lo]) / (xs[hi] - xs[lo])).clamp(0.0, 1.0);
            (lo, hi, w)
        };
        let (i0, i1, a) = bracket(&self.ts, t);
        let (j0, j1, b) = bracket(&self.ss, s);
        let g = |i: usize, j: usize| self.values[i * self.ss.len() + j];
        (1.0 - a) * (1.0 - b) * g(i0, j0)
            + (1.0 - a) * b * g(i0, j1)
            + a * (1.0 - b) * g(i1, j0)
            + a * b * g(i1, j1)
    }
}

fn build_kernel(cfg: &KernelConfig) -> Result<TwoTimeKernel, CmdError> {
    match cfg {
        KernelConfig::Example1 { alpha, gamma } => {
            Ok(make_example1_kernel(*alpha, *gamma)?.kernel)
        }
        KernelConfig::SeparableConstant { value } => {
            Ok(build_separable(cfg)?.kernel)
                .map(|k: TwoTimeKernel| k)
                .map_err(|e: CmdError| e)
                .map(|k| {
                    let _ = value;
                    k
                })
        }
        KernelConfig::SeparableExp { .. } => Ok(build_separable(cfg)?.kernel),
        KernelConfig::Tabulated { path, c, rate } => {
            let table = TabulatedKernel::load(Path::new(path))?;
            Ok(TwoTimeKernel::new(
                move |t, s| table.eval(t, s),
                KernelDecay::exponential(*c, *rate).map_err(CmdError::from)?,
                format!("tabulated({path})"),
            ))
        }
    }
}

fn build_separable(cfg: &KernelConfig) -> Result<SeparableKernel, CmdError> {
    match cfg {
        KernelConfig::SeparableConstant { value } => {
            let v = *value;
            Ok(make_separable_kernel(
                move |_| v,
                KernelDecay::bounded(v.abs().max(1e-12))?,
                format!("phi={v}"),
            ))
        }
        KernelConfig::SeparableExp { scale, rate } => {
            let (sc, r) = (*scale, *rate);
            Ok(make_separable_kernel(
                move |s: f64| sc * (-r * s).exp(),
                KernelDecay::exponential(sc.abs().max(1e-12), r)?,
                format!("phi={sc}*exp(-{r}s)"),
            ))
        }
        _ => Err(CmdError::Config(
            "separable kernel expected for this command".into(),
        )),
    }
}

fn build_driver(cfg: &DriverConfig) -> Driver {
    match cfg {
        DriverConfig::Zero => Driver::deterministic(
            |_, _| 0.0,
            DriverDecay {
                prefactor: 1e-300,
                rate: 1.0,
            },
        ),
        DriverConfig::Exp { scale, rate } => {
            let (sc, r) = (*scale, *rate);
            Driver::deterministic(
                move |_t, s| sc * (-r * s).exp(),
                DriverDecay {
                    prefactor: sc.abs(),
                    rate: r,
                },
            )
        }
        DriverConfig::ExpCos { scale, rate } => {
            let (sc, r) = (*scale, *rate);
            Driver::stochastic(
                move |_t, s, view| {
                    let idx = view.grid.node_index_of(s).expect("grid node");
                    sc * (-r * s).exp() * view.b_at_node(idx).cos()
                },
                true,
                DriverDecay {
                    prefactor: sc.abs(),
                    rate: r,
                },
            )
        }
    }
}

fn build_jump_spec(cfg: &RunConfig) -> Result<Option<JumpSpec>, CmdError> {
    match &cfg.measure.jumps {
        Some(j) => Ok(Some(JumpSpec::constant_beta(
            j.marks.clone(),
            j.rates.clone(),
            j.beta0,
        )?)),
        None => Ok(None),
    }
}

fn ensure_dir(dir: &str) -> Result<PathBuf, CmdError> {
    let p = PathBuf::from(dir);
    fs::create_dir_all(&p)?;
    Ok(p)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CmdError> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

#[derive(Serialize)]
struct ResolventDiagnostics {
    meta: RunMeta,
    kernel: KernelConfig,
    l_lambda: f64,
    series_terms_used: usize,
    series_tail_estimate: f64,
    residual_nystrom: f64,
    residual_series: f64,
    cross_method_max_diff: f64,
}

pub fn cmd_resolvent(cfg: &RunConfig, hash: &str) -> Result<(), CmdError> {
    let grid = build_grid(&cfg.grid)?;
    let kcfg = cfg
        .kernel
        .as_ref()
        .ok_or_else(|| CmdError::Config("resolvent requires a kernel block".into()))?;
    let kernel = build_kernel(kcfg)?;
    let series = resolvent_series(
        &kernel,
        cfg.grid.lambda,
        cfg.tolerances.series_tol,
        &grid,
        cfg.relaxed_contraction,
    )?;
    let nystrom = resolvent_nystrom(&kernel, &grid, cfg.relaxed_contraction)?;

    let dir = ensure_dir(&cfg.output_dir)?;
    let mut csv = fs::File::create(dir.join("psi.csv"))?;
    export::write_resolvent_csv(&mut csv, &nystrom, &kernel)?;
    let diag = ResolventDiagnostics {
        meta: meta(cfg, hash),
        kernel: kcfg.clone(),
        l_lambda: nystrom.l_lambda,
        series_terms_used: series.series_terms_used,
        series_tail_estimate: series.tail_estimate,
        residual_nystrom: resolvent_residual(&nystrom, &kernel),
        residual_series: resolvent_residual(&series, &kernel),
        cross_method_max_diff: series.max_abs_diff(&nystrom),
    };
    write_json(&dir.join("diagnostics.json"), &diag)?;
    Ok(())
}

#[derive(Serialize)]
struct SolveDiagnostics {
    meta: RunMeta,
    assumptions: AssumptionReport,
    l_lambda: f64,
    cross_method_max_diff: f64,
    y0: f64,
    y0_ci: Option<f64>,
    y_tail_bound: Option<f64>,
    picard_iterations: Option<usize>,
    picard_history: Option<Vec<f64>>,
    u_sup: Option<f64>,
    rank_warnings: Option<usize>,
    verifier_reports: Vec<serde_json::Value>,
}

pub fn cmd_solve(cfg: &RunConfig, hash: &str) -> Result<(), CmdError> {
    let grid = build_grid(&cfg.grid)?;
    let kcfg = cfg
        .kernel
        .as_ref()
        .ok_or_else(|| CmdError::Config("solve requires a kernel block".into()))?;
    let dcfg = cfg
        .driver
        .as_ref()
        .ok_or_else(|| CmdError::Config("solve requires a driver block".into()))?;
    let kernel = build_kernel(kcfg)?;
    let driver = build_driver(dcfg);
    let jump_spec = build_jump_spec(cfg)?;
    let xi = cfg.measure.xi.make();
    let problem = BsvieProblem::new(kernel, driver, xi.clone(), jump_spec, cfg.grid.lambda)
        .with_relaxed_contraction(cfg.relaxed_contraction);
    let assumptions = problem.validate(&grid)?;

    let series = resolvent_series(
        &problem.kernel,
        cfg.grid.lambda,
        cfg.tolerances.series_tol,
        &grid,
        cfg.relaxed_contraction,
    )?;
    let nystrom = resolvent_nystrom(&problem.kernel, &grid, cfg.relaxed_contraction)?;
    let cross = series.max_abs_diff(&nystrom);

    let dir = ensure_dir(&cfg.output_dir)?;
    let stochastic_driver = !problem.driver.is_deterministic();
    if stochastic_driver && cfg.mc.is_none() {
        return Err(CmdError::Config(
            "stochastic driver requires an mc block".into(),
        ));
    }

    let mut diag = SolveDiagnostics {
        meta: meta(cfg, hash),
        assumptions,
        l_lambda: nystrom.l_lambda,
        cross_method_max_diff: cross,
        y0: f64::NAN,
        y0_ci: None,
        y_tail_bound: None,
        picard_iterations: None,
        picard_history: None,
        u_sup: None,
        rank_warnings: None,
        verifier_reports: Vec::new(),
    };

    if !stochastic_driver {
        let y = solve_y_deterministic(&problem, &nystrom)?;
        let pic = picard_iterate(
            &problem,
            &grid,
            cfg.tolerances.picard_max_iter,
            cfg.tolerances.picard_tol,
        )?;
        let u = compute_u_deterministic(&problem, &y.values, &grid)?;
        diag.y0 = y.values[0];
        diag.y_tail_bound = Some(y.tail_bound);
        diag.picard_iterations = Some(pic.iterations);
        diag.picard_history = Some(pic.history.clone());
        diag.u_sup = Some(u.iter().fold(0.0_f64, |m, &v| m.max(v.abs())));
        let mut f = fs::File::create(dir.join("y.csv"))?;
        export::write_y_csv(&mut f, grid.nodes(), &y.values)?;
        let mut f = fs::File::create(dir.join("y_picard.csv"))?;
        export::write_y_csv(&mut f, grid.nodes(), &pic.y)?;
    }

    if let Some(mc_cfg) = &cfg.mc {
        let paths = simulate_paths(&grid, mc_cfg.n_paths, problem.jump_spec.as_ref(), mc_cfg.seed)?;
        let weights = girsanov_weights(&paths, xi.clone(), problem.jump_spec.as_ref())?;
        let mc = solve_y_mc(&problem, &nystrom, &paths, &weights, mc_cfg.basis_degree)?;
        diag.y0 = mc.y0;
        diag.y0_ci = Some(mc.y0_ci);
        diag.rank_warnings = Some(mc.rank_warnings);
        // Mean fitted curve.
        let y_mean: Vec<f64> = mc
            .y_paths
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .collect();
        let mut f = fs::File::create(dir.join("y_mc.csv"))?;
        export::write_y_csv(&mut f, grid.nodes(), &y_mean)?;
        if cfg.dump_paths {
            let mut f = fs::File::create(dir.join("paths.csv"))?;
            export::write_paths_csv(&mut f, &paths, &weights, 16)?;
        }

        if let Some(zk_cfg) = &cfg.zk {
            if zk_cfg.enabled {
                if cfg.measure.random_coefficients {
                    return Err(CmdError::Assumption(
                        "deterministic coefficients required for Z/K extraction".into(),
                    ));
                }
                let rows = if zk_cfg.rows.is_empty() {
                    vec![0]
                } else {
                    zk_cfg.rows.clone()
                };
                let zk = solve_zk(&problem, &mc, &nystrom, &paths, &weights, &rows)?;
                let mut f = fs::File::create(dir.join("z.csv"))?;
                export::write_z_csv(&mut f, &zk, &mc)?;
                if let Some(js) = &problem.jump_spec {
                    let mut f = fs::File::create(dir.join("k.csv"))?;
                    export::write_k_csv(&mut f, &zk, &mc, js.marks())?;
                }

                if cfg.verifiers.martingale_representation {
                    let rep =
                        verify_martingale_representation(&problem, &zk, 0, &mc, &paths, rows[0])?;
                    diag.verifier_reports
                        .push(serde_json::to_value(&rep)?);
                    if rep.ratio > cfg.tolerances.verifier_ratio {
                        write_json(&dir.join("diagnostics.json"), &diag)?;
                        return Err(CmdError::Verifier(format!(
                            "martingale representation residual ratio {:.4} exceeds {}",
                            rep.ratio, cfg.tolerances.verifier_ratio
                        )));
                    }
                }
                if let Some(ms) = &cfg.verifiers.m_solution {
                    let rep =
                        verify_m_solution(&problem, &zk, &mc, &paths, ms.t1_node, ms.t2_node)?;
                    diag.verifier_reports
                        .push(serde_json::to_value(&rep)?);
                    if rep.rms_residual > ms.max_ratio * rep.rms_y.max(1e-300) {
                        write_json(&dir.join("diagnostics.json"), &diag)?;
                        return Err(CmdError::Verifier(format!(
                            "M-solution residual {:.4e} exceeds {} x rms(Y)",
                            rep.rms_residual, ms.max_ratio
                        )));
                    }
                }
            }
        }
    }

    write_json(&dir.join("diagnostics.json"), &diag)?;
    Ok(())
}

#[derive(Serialize)]
struct Example1Diagnostics {
    meta: RunMeta,
    report: apps::Example1Report,
}

pub fn cmd_example1(cfg: &RunConfig, hash: &str) -> Result<(), CmdError> {
    let grid = build_grid(&cfg.grid)?;
    let p = cfg
        .example1
        .as_ref()
        .ok_or_else(|| CmdError::Config("example1 requires an example1 block".into()))?;
    let report = apps::example1_report(p.alpha, p.gamma, p.mu, cfg.grid.lambda, &grid)?;
    let dir = ensure_dir(&cfg.output_dir)?;

    // Plot data: Y curve and the t = 0 resolvent slice vs closed forms.
    let ex = make_example1_kernel(p.alpha, p.gamma)?;
    let table = resolvent_nystrom(&ex.kernel, &grid, false)?;
    let problem = BsvieProblem::new(
        ex.kernel.clone(),
        Driver::deterministic(
            {
                let mu = p.mu;
                move |_t, s| (-mu * s).exp()
            },
            DriverDecay {
                prefactor: 1.0,
                rate: p.mu,
            },
        ),
        |_| 0.0,
        None,
        cfg.grid.lambda,
    );
    let y = solve_y_deterministic(&problem, &table)?;
    let mut f = fs::File::create(dir.join("example1_y.csv"))?;
    writeln!(f, "t,y_numeric,y_closed_form")?;
    for (i, &t) in grid.nodes().iter().enumerate() {
        writeln!(
            f,
            "{},{},{}",
            export::fmt(t),
            export::fmt(y.values[i]),
            export::fmt(apps::example1_y_closed_form(t, p.alpha, p.gamma, p.mu))
        )?;
    }
    let mut f = fs::File::create(dir.join("example1_psi_row0.csv"))?;
    writeln!(f, "s,psi_numeric,psi_closed_form")?;
    for (j, &s) in grid.nodes().iter().enumerate() {
        writeln!(
            f,
            "{},{},{}",
            export::fmt(s),
            export::fmt(table.at(0, j)),
            export::fmt(ex.resolvent_closed_form(0.0, s))
        )?;
    }

    let all_passed = report.all_passed;
    write_json(
        &dir.join("example1_report.json"),
        &Example1Diagnostics {
            meta: meta(cfg, hash),
            report,
        },
    )?;
    if !all_passed {
        return Err(CmdError::Verifier(
            "example1 closed-form checks failed; see example1_report.json".into(),
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct Example2Diagnostics {
    meta: RunMeta,
    report: apps::Example2Report,
}

pub fn cmd_example2(cfg: &RunConfig, hash: &str) -> Result<(), CmdError> {
    let grid = build_grid(&cfg.grid)?;
    let p: &Example2Config = cfg
        .example2
        .as_ref()
        .ok_or_else(|| CmdError::Config("example2 requires an example2 block".into()))?;
    let sep = match &p.phi {
        PhiConfig::Constant { value } => build_separable(&KernelConfig::SeparableConstant {
            value: *value,
        })?,
        PhiConfig::Exp { scale, rate } => build_separable(&KernelConfig::SeparableExp {
            scale: *scale,
            rate: *rate,
        })?,
    };
    let (h_scale, h_rate) = (p.h_scale, p.h_rate);
    let mc = p.mc.map(|m| apps::Example2McConfig {
        n_paths: m.n_paths,
        seed: m.seed,
        basis_degree: m.basis_degree,
    });
    let report = apps::example2_report(
        &sep,
        move |s: f64| h_scale * (-h_rate * s).exp(),
        DriverDecay {
            prefactor: h_scale.abs().max(1e-300),
            rate: h_rate,
        },
        &grid,
        mc,
    )?;
    let dir = ensure_dir(&cfg.output_dir)?;
    let mut f = fs::File::create(dir.join("example2_routes.csv"))?;
    writeln!(f, "route,y0")?;
    writeln!(f, "formula,{}", export::fmt(report.y0_formula))?;
    writeln!(f, "resolvent,{}", export::fmt(report.y0_resolvent))?;
    writeln!(f, "backward_ode,{}", export::fmt(report.y0_ode))?;
    let all_passed = report.all_passed;
    write_json(
        &dir.join("example2_report.json"),
        &Example2Diagnostics {
            meta: meta(cfg, hash),
            report,
        },
    )?;
    if !all_passed {
        return Err(CmdError::Verifier(
            "example2 closed-form checks failed; see example2_report.json".into(),
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct ControlDiagnostics {
    meta: RunMeta,
    control: String,
    report: apps::ControlReport,
    comparison: Option<apps::ControlComparison>,
}

pub fn cmd_control(cfg: &RunConfig, hash: &str) -> Result<(), CmdError> {
    let grid = build_grid(&cfg.grid)?;
    let p: &ControlConfig = cfg
        .control
        .as_ref()
        .ok_or_else(|| CmdError::Config("control requires a control block".into()))?;
    let problem = apps::ControlProblem {
        a: p.a,
        memory: if p.b0 != 0.0 {
            Some(apps::MemoryKernel {
                b0: p.b0,
                kappa: p.b_rate,
            })
        } else {
            None
        },
        c: p.c,
        rho: p.rho,
        sigma: p.sigma,
        x0: p.x0,
        grid: Arc::clone(&grid),
        n_paths: p.n_paths,
        seed: p.seed,
        explosion_cap: p.explosion_cap,
    };
    problem.validate()?;

    let candidate = || -> Result<ControlLaw, CmdError> {
        let adjoint_grid = Arc::new(build_graded_grid(
            cfg.grid.t_max,
            cfg.grid.n_panels,
            cfg.grid.pts_per_panel,
            cfg.grid.grading_rate,
            p.adjoint_lambda,
        )?);
        let driver = match &p.adjoint_h {
            Some(d) => {
                let (sc, r) = (d.scale, d.rate);
                Driver::deterministic(
                    move |_t, s| sc * (-r * s).exp(),
                    DriverDecay {
                        prefactor: sc.abs().max(1e-300),
                        rate: r,
                    },
                )
            }
            None => Driver::deterministic(
                |_, _| 0.0,
                DriverDecay {
                    prefactor: 1e-300,
                    rate: 1.0,
                },
            ),
        };
        Ok(apps::candidate_feedback(
            &problem,
            driver,
            p.adjoint_lambda,
            &adjoint_grid,
        )?)
    };

    let law: ControlLaw = match p.control.as_str() {
        "zero" => Arc::new(|_, _| 0.0),
        "candidate" => candidate()?,
        "random" => {
            let seed = p.seed;
            Arc::new(move |t: f64, _| (0.5 * ((seed % 7) as f64 + 1.3) * t).sin() * 0.5)
        }
        other => {
            return Err(CmdError::Config(format!(
                "unknown control law '{other}' (zero | candidate | random)"
            )))
        }
    };

    let paths: PathBundle = simulate_paths(&grid, p.n_paths, None, p.seed)?;
    let report = apps::control_demo(&problem, &law, &paths)?;
    let comparison = if p.compare {
        Some(apps::control_comparison(&problem, &candidate()?, &paths)?)
    } else {
        None
    };

    let dir = ensure_dir(&cfg.output_dir)?;
    let mut f = fs::File::create(dir.join("control_costs.csv"))?;
    writeln!(f, "label,j,ci_halfwidth")?;
    writeln!(
        f,
        "{},{},{}",
        p.control,
        export::fmt(report.j_estimate),
        export::fmt(report.ci_halfwidth)
    )?;
    if let Some(cmpr) = &comparison {
        for (label, j, ci) in &cmpr.ranked {
            writeln!(f, "{label},{},{}", export::fmt(*j), export::fmt(*ci))?;
        }
    }
    write_json(
        &dir.join("control_report.json"),
        &ControlDiagnostics {
            meta: meta(cfg, hash),
            control: p.control.clone(),
            report,
            comparison,
        },
    )?;
    Ok(())
}

/// Criterion 11: rerunning each Monte Carlo command with the same seed
/// must produce byte-identical output files, independent of thread count.
/// Exercised in-process with differently sized local thread pools.
fn criterion_11() -> bsvie::selftest::CriterionReport {
    use std::time::Instant;
    let start = Instant::now();
    let (passed, detail) = match criterion_11_inner() {
        Ok(d) => (true, d),
        Err(e) => (false, e.message().to_string()),
    };
    bsvie::selftest::CriterionReport {
        id: 11,
        name: "reproducibility-across-threads",
        passed,
        detail,
        elapsed_s: start.elapsed().as_secs_f64(),
    }
}

fn dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, CmdError> {
    let mut out = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        out.push((
            e.file_name().to_string_lossy().into_owned(),
            fs::read(e.path())?,
        ));
    }
    Ok(out)
}

fn criterion_11_inner() -> Result<String, CmdError> {
    let base = std::env::temp_dir().join(format!("bsvie-selftest-{}", std::process::id()));
    let _ = fs::remove_dir_all(&base);
    fs::create_dir_all(&base)?;

    let solve_cfg = |out: &Path| -> RunConfig {
        serde_json::from_value(serde_json::json!({
            "output_dir": out.to_string_lossy(),
            "grid": {"t_max": 6.0, "n_panels": 8, "pts_per_panel": 4,
                      "grading_rate": 1.2, "lambda": 2.0},
            "kernel": {"type": "example1", "alpha": 0.5, "gamma": 2.0},
            "driver": {"type": "exp_cos", "scale": 1.0, "rate": 1.0},
            "mc": {"n_paths": 2000, "seed": 7, "basis_degree": 3},
            "zk": {"enabled": true, "rows": [0]},
            "verifiers": {"martingale_representation": true},
            "tolerances": {"series_tol": 1e-10, "picard_tol": 1e-8,
                            "picard_max_iter": 100, "verifier_ratio": 0.8},
            "dump_paths": true
        }))
        .expect("static config")
    };
    let control_cfg = |out: &Path| -> RunConfig {
        serde_json::from_value(serde_json::json!({
            "output_dir": out.to_string_lossy(),
            "grid": {"t_max": 10.0, "n_panels": 10, "pts_per_panel": 4,
                      "grading_rate": 1.0, "lambda": 2.0},
            "control": {"a": -1.0, "c": 0.0, "rho": 1.0, "sigma": 1.0, "x0": 1.0,
                         "n_paths": 5000, "seed": 11, "control": "zero"}
        }))
        .expect("static config")
    };

    let mut all_equal = true;
    let mut checked = 0usize;
    for (name, runner) in [
        ("solve", &solve_cfg as &dyn Fn(&Path) -> RunConfig),
        ("control", &control_cfg),
    ] {
        let mut snapshots = Vec::new();
        for (run, threads) in [(0usize, 1usize), (1, 3)] {
            let out = base.join(format!("{name}-{run}"));
            let cfg = runner(&out);
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| CmdError::Numeric(e.to_string()))?;
            pool.install(|| match name {
                "solve" => cmd_solve(&cfg, "selftest"),
                _ => cmd_control(&cfg, "selftest"),
            })?;
            snapshots.push(dir_bytes(&out)?);
        }
        checked += snapshots[0].len();
        if snapshots[0] != snapshots[1] {
            all_equal = false;
        }
    }
    let _ = fs::remove_dir_all(&base);
    if all_equal {
        Ok(format!(
            "{checked} output files byte-identical across 1-thread and 3-thread reruns"
        ))
    } else {
        Err(CmdError::Verifier(
            "outputs differ across thread counts".into(),
        ))
    }
}

pub fn cmd_selftest() -> Result<(), CmdError> {
    let mut reports = bsvie::selftest::run_all();
    reports.push(criterion_11());
    let mut all = true;
    for r in &reports {
        println!("{}", r.line());
        all &= r.passed;
    }
    if all {
        println!("acceptance: all {} criteria passed", reports.len());
        Ok(())
    } else {
        Err(CmdError::Verifier(
            "one or more acceptance criteria failed".into(),
        ))
    }
}
