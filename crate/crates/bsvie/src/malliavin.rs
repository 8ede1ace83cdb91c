//! Numerical Hida-Malliavin derivatives and Clark-Ocone integrand
//! extraction under the transformed measure.
//!
//! The Brownian derivative `D_s F` is realized as a central finite
//! difference in the Brownian increment arriving at the node `s`; for
//! cylindrical functionals this converges to the Hida-Malliavin derivative
//! as the grid refines. The jump derivative `D_{s,zeta} F` is the
//! add-one-jump difference `F(path + (s, zeta)) - F(path)`.
//!
//! Conditional expectations `E_Q[ . | F_s]` are estimated by weighted
//! least-squares regression on the path state at `s` (see
//! [`crate::regression`]), never by nested simulation.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::regression::{weighted_fit, BasisSpec, Fit};
use crate::stochastics::{GirsanovWeight, JumpEvent, PathBundle, PathView};

/// A real-valued functional of a path.
#[derive(Clone)]
pub struct PathFunctional {
    eval: Arc<dyn Fn(&PathView) -> f64 + Send + Sync>,
    pub description: String,
}

impl PathFunctional {
    pub fn new(
        eval: impl Fn(&PathView) -> f64 + Send + Sync + 'static,
        description: impl Into<String>,
    ) -> Self {
        PathFunctional {
            eval: Arc::new(eval),
            description: description.into(),
        }
    }

    pub fn eval(&self, view: &PathView) -> f64 {
        (self.eval)(view)
    }
}

/// Standard central-difference step: `eps_machine^{1/3} max(1, scale)`.
pub fn fd_epsilon(scale: f64) -> f64 {
    f64::EPSILON.cbrt() * scale.abs().max(1.0)
}

/// Central finite difference of `F` with respect to the Brownian increment
/// arriving at the grid node `s` (the interval `[x_{k-1}, x_k]` with
/// `x_k = s`). `s` must be a grid node other than the origin.
pub fn brownian_malliavin_fd(
    f: &PathFunctional,
    paths: &PathBundle,
    p: usize,
    s: f64,
    eps: f64,
) -> Result<f64> {
    let grid = paths.grid();
    let idx = grid
        .node_index_of(s)
        .ok_or_else(|| Error::InvalidParameter(format!("s = {s} is not a grid node")))?;
    if idx == 0 {
        return Err(Error::InvalidParameter(
            "s must be an interior grid node".into(),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter("eps must be positive".into()));
    }
    let mut db = paths.db(p).to_vec();
    db[idx - 1] += eps;
    let up = f.eval(&PathView::new(grid, &db, paths.jumps(p)));
    db[idx - 1] -= 2.0 * eps;
    let down = f.eval(&PathView::new(grid, &db, paths.jumps(p)));
    if !up.is_finite() || !down.is_finite() {
        return Err(Error::Numeric(format!(
            "bumped evaluation of '{}' not finite at s = {s}",
            f.description
        )));
    }
    Ok((up - down) / (2.0 * eps))
}

/// Add-one-jump difference `F(path with extra jump (s, mark)) - F(path)`.
pub fn jump_difference(
    f: &PathFunctional,
    paths: &PathBundle,
    p: usize,
    s: f64,
    mark_index: usize,
) -> f64 {
    let grid = paths.grid();
    let base = f.eval(&paths.view(p));
    let mut jumps = paths.jumps(p).to_vec();
    let pos = jumps.partition_point(|e| e.time <= s);
    jumps.insert(pos, JumpEvent { time: s, mark_index });
    let aug = f.eval(&PathView::new(grid, paths.db(p), &jumps));
    aug - base
}

/// Fitted Clark-Ocone integrands: `z(s) = E_Q[D_s F | F_s]` and
/// `k(s, zeta) = E_Q[D_{s,zeta} F | F_s]` on interior grid nodes
/// (deterministic-coefficient specialization).
pub struct ClarkOconeIntegrands {
    /// Node indices (1..n) at which the integrands are fitted.
    pub node_indices: Vec<usize>,
    /// Per-node regression fits of the Brownian integrand.
    pub z_fits: Vec<Fit>,
    /// Per-node, per-path fitted values of z.
    pub z_fitted: Vec<Vec<f64>>,
    /// Per-node, per-mark fits of the jump integrand.
    pub k_fits: Vec<Vec<Fit>>,
    /// Per-node, per-mark, per-path fitted values of k.
    pub k_fitted: Vec<Vec<Vec<f64>>>,
    /// Number of regressions that fell back to a lower degree.
    pub rank_warnings: usize,
}

/// Estimate the Clark-Ocone integrands of `F` by finite-difference
/// Malliavin derivatives followed by least-squares conditioning on the
/// state `(B(s), N(s))`.
///
/// Requires deterministic Girsanov coefficients (the `H~ = 1`, `D xi = 0`
/// specialization); the caller guarantees the weights were built from such
/// coefficients.
pub fn clark_ocone_integrands(
    f: &PathFunctional,
    paths: &PathBundle,
    weights: &GirsanovWeight,
    basis: BasisSpec,
    marks: &[f64],
) -> Result<ClarkOconeIntegrands> {
    let grid = paths.grid();
    let n = grid.n_nodes();
    let n_paths = paths.n_paths();
    let nodes = grid.nodes();
    let node_indices: Vec<usize> = (1..n).collect();

    // Per-path state and regression weight.
    let w: Vec<f64> = (0..n_paths).map(|p| weights.m_terminal(p)).collect();
    let b_all: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|p| paths.brownian(p))
        .collect();

    let mut z_fits = Vec::with_capacity(node_indices.len());
    let mut z_fitted = Vec::with_capacity(node_indices.len());
    let mut k_fits = Vec::with_capacity(node_indices.len());
    let mut k_fitted = Vec::with_capacity(node_indices.len());
    let mut rank_warnings = 0usize;

    for &k in &node_indices {
        let s = nodes[k];
        let eps = fd_epsilon(paths.deltas()[k - 1].sqrt());
        let d: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map(|p| brownian_malliavin_fd(f, paths, p, s, eps))
            .collect::<Result<Vec<f64>>>()?;
        let states: Vec<(f64, f64)> = (0..n_paths)
            .map(|p| (b_all[p][k], paths.view(p).n_jumps_by(s) as f64))
            .collect();
        let fit = weighted_fit(basis, &states, &d, &w)?;
        if fit.rank_deficient {
            rank_warnings += 1;
        }
        z_fitted.push(
            states
                .iter()
                .map(|&(b, nj)| fit.eval(b, nj))
                .collect::<Vec<f64>>(),
        );
        z_fits.push(fit);

        let mut mark_fits = Vec::with_capacity(marks.len());
        let mut mark_fitted = Vec::with_capacity(marks.len());
        for (mi, _zeta) in marks.iter().enumerate() {
            let dj: Vec<f64> = (0..n_paths)
                .into_par_iter()
                .map(|p| jump_difference(f, paths, p, s, mi))
                .collect();
            let fit = weighted_fit(basis, &states, &dj, &w)?;
            if fit.rank_deficient {
                rank_warnings += 1;
            }
            mark_fitted.push(
                states
                    .iter()
                    .map(|&(b, nj)| fit.eval(b, nj))
                    .collect::<Vec<f64>>(),
            );
            mark_fits.push(fit);
        }
        k_fits.push(mark_fits);
        k_fitted.push(mark_fitted);
    }

    Ok(ClarkOconeIntegrands {
        node_indices,
        z_fits,
        z_fitted,
        k_fits,
        k_fitted,
        rank_warnings,
    })
}

/// Closed-form derivative of the Girsanov density (deterministic xi):
/// `D_s M(t) = M(t) xi(s) 1_{s <= t}` per path; the unit-test oracle for
/// finite differences applied to the density.
pub fn density_malliavin(
    weights: &GirsanovWeight,
    xi: impl Fn(f64) -> f64,
    grid: &TimeGrid,
    s: f64,
    t: f64,
) -> Result<Vec<f64>> {
    let si = grid
        .node_index_of(s)
        .ok_or_else(|| Error::InvalidParameter(format!("s = {s} is not a grid node")))?;
    let ti = grid
        .node_index_of(t)
        .ok_or_else(|| Error::InvalidParameter(format!("t = {t} is not a grid node")))?;
    let indicator = if si <= ti { 1.0 } else { 0.0 };
    let xs = xi(s);
    Ok((0..weights.n_paths())
        .map(|p| weights.m(p, ti) * xs * indicator)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_graded_grid;
    use crate::stochastics::{girsanov_weights, simulate_paths, JumpSpec};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn setup(t_max: f64, intervals: usize, n_paths: usize, seed: u64) -> Arc<PathBundle> {
        let grid = Arc::new(build_graded_grid(t_max, intervals / 5, 4, 1.0, 2.0).unwrap());
        Arc::new(simulate_paths(&grid, n_paths, None, seed).unwrap())
    }

    #[test]
    fn derivative_of_terminal_brownian_is_indicator() {
        let paths = setup(4.0, 40, 8, 1);
        let grid = paths.grid();
        let t_node = grid.node_index_of(2.0).unwrap();
        let f = PathFunctional::new(
            move |v: &PathView| v.b_at_node(t_node),
            "B(2)",
        );
        let eps = fd_epsilon(1.0);
        for p in 0..paths.n_paths() {
            // s <= T: derivative 1 up to f64 summation of the increments.
            let d = brownian_malliavin_fd(&f, &paths, p, 1.0, eps).unwrap();
            assert!((d - 1.0).abs() <= 1e-9, "got {d}");
            let d = brownian_malliavin_fd(&f, &paths, p, 2.0, eps).unwrap();
            assert!((d - 1.0).abs() <= 1e-9, "got {d}");
            // s > T: zero, exactly (the bumped increment never enters).
            let d = brownian_malliavin_fd(&f, &paths, p, 3.0, eps).unwrap();
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn derivative_of_square_is_2b() {
        let paths = setup(4.0, 40, 16, 2);
        let grid = paths.grid();
        let t_node = grid.n_nodes() - 1;
        let f = PathFunctional::new(
            move |v: &PathView| v.b_at_node(t_node) * v.b_at_node(t_node),
            "B(T)^2",
        );
        let eps = fd_epsilon(1.0);
        for p in 0..paths.n_paths() {
            let b = paths.view(p).b_at_node(t_node);
            let d = brownian_malliavin_fd(&f, &paths, p, 2.0, eps).unwrap();
            // Central difference is exact on quadratics up to roundoff.
            assert_relative_eq!(d, 2.0 * b, epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    #[test]
    fn chain_rule_spot_checks_and_fd_convergence() {
        let paths = setup(2.0, 30, 10, 3);
        let grid = paths.grid();
        let t_node = grid.n_nodes() - 1;
        let f_exp = PathFunctional::new(
            move |v: &PathView| v.b_at_node(t_node).exp(),
            "exp(B(T))",
        );
        for p in 0..paths.n_paths() {
            let b = paths.view(p).b_at_node(t_node);
            let exact = b.exp();
            let e1 = brownian_malliavin_fd(&f_exp, &paths, p, 1.0, 1e-2).unwrap() - exact;
            let e2 = brownian_malliavin_fd(&f_exp, &paths, p, 1.0, 5e-3).unwrap() - exact;
            // Central differences: error ~ eps^2 g''' / 6, ratio ~ 4.
            assert!(
                e2.abs() <= e1.abs() / 2.5 + 1e-12,
                "halving eps: {} -> {}",
                e1.abs(),
                e2.abs()
            );
        }
    }

    #[test]
    fn jump_differences_count_and_sum() {
        let grid = Arc::new(build_graded_grid(5.0, 5, 4, 1.0, 2.0).unwrap());
        let js = JumpSpec::constant_beta(vec![1.5, -0.5], vec![0.5, 0.5], 0.2).unwrap();
        let paths = Arc::new(simulate_paths(&grid, 6, Some(&js), 4).unwrap());
        let count = PathFunctional::new(|v: &PathView| v.jumps.len() as f64, "jump count");
        let marks = js.marks().to_vec();
        let sum = PathFunctional::new(
            move |v: &PathView| v.jumps.iter().map(|e| marks[e.mark_index]).sum(),
            "sum of jump sizes",
        );
        let t_node = grid.n_nodes() - 1;
        let brown = PathFunctional::new(move |v: &PathView| v.b_at_node(t_node), "B(T)");
        for p in 0..paths.n_paths() {
            assert_eq!(jump_difference(&count, &paths, p, 2.0, 0), 1.0);
            assert_eq!(jump_difference(&sum, &paths, p, 2.0, 0), 1.5);
            assert_eq!(jump_difference(&sum, &paths, p, 2.0, 1), -0.5);
            assert_eq!(jump_difference(&brown, &paths, p, 2.0, 0), 0.0);
        }
    }

    #[test]
    fn clark_ocone_for_terminal_brownian() {
        let paths = setup(3.0, 30, 4000, 5);
        let grid = paths.grid();
        let w = girsanov_weights(&paths, |_| 0.0, None).unwrap();
        let t_node = grid.node_index_of(2.0).unwrap();
        let f = PathFunctional::new(move |v: &PathView| v.b_at_node(t_node), "B(2)");
        let co =
            clark_ocone_integrands(&f, &paths, &w, BasisSpec::brownian(2), &[]).unwrap();
        for (row, &k) in co.node_indices.iter().enumerate() {
            let expect = if k <= t_node { 1.0 } else { 0.0 };
            for p in (0..paths.n_paths()).step_by(500) {
                assert!(
                    (co.z_fitted[row][p] - expect).abs() < 1e-6,
                    "z at node {k}: {} vs {expect}",
                    co.z_fitted[row][p]
                );
            }
        }
    }

    #[test]
    fn clark_ocone_for_square_and_exponential() {
        let paths = setup(2.0, 20, 8000, 6);
        let grid = paths.grid();
        let w = girsanov_weights(&paths, |_| 0.0, None).unwrap();
        let t_node = grid.n_nodes() - 1;
        let t = grid.t_max();

        // F = B(T)^2: z(s) = 2 B(s).
        let f = PathFunctional::new(
            move |v: &PathView| v.b_at_node(t_node) * v.b_at_node(t_node),
            "B(T)^2",
        );
        let co =
            clark_ocone_integrands(&f, &paths, &w, BasisSpec::brownian(2), &[]).unwrap();
        let mut rms = 0.0;
        let mut count = 0usize;
        for (row, &k) in co.node_indices.iter().enumerate() {
            for p in (0..paths.n_paths()).step_by(100) {
                let b = paths.view(p).b_at_node(k);
                rms += (co.z_fitted[row][p] - 2.0 * b).powi(2);
                count += 1;
            }
        }
        rms = (rms / count as f64).sqrt();
        assert!(rms < 0.05, "pathwise z vs 2B(s): rms {rms}");

        // F = exp(B(T) - T/2): z(s) = exp(B(s) - s/2).
        let f = PathFunctional::new(
            move |v: &PathView| (v.b_at_node(t_node) - 0.5 * t).exp(),
            "exp(B(T) - T/2)",
        );
        let co =
            clark_ocone_integrands(&f, &paths, &w, BasisSpec::brownian(4), &[]).unwrap();
        let mut rms = 0.0;
        let mut count = 0usize;
        for (row, &k) in co.node_indices.iter().enumerate() {
            let s = grid.nodes()[k];
            for p in (0..paths.n_paths()).step_by(100) {
                let b = paths.view(p).b_at_node(k);
                rms += (co.z_fitted[row][p] - (b - 0.5 * s).exp()).powi(2);
                count += 1;
            }
        }
        rms = (rms / count as f64).sqrt();
        assert!(rms < 0.1, "pathwise z vs exp(B(s)-s/2): rms {rms}");
    }

    #[test]
    fn martingale_reconstruction_improves_with_refinement() {
        // F = B(T)^2 = T + 2 int B dB: residual of E[F] + sum z dB shrinks
        // as the grid refines.
        let mut prev = f64::INFINITY;
        for intervals in [20, 40] {
            let paths = setup(2.0, intervals, 4000, 7);
            let grid = paths.grid();
            let w = girsanov_weights(&paths, |_| 0.0, None).unwrap();
            let t_node = grid.n_nodes() - 1;
            let f = PathFunctional::new(
                move |v: &PathView| v.b_at_node(t_node) * v.b_at_node(t_node),
                "B(T)^2",
            );
            let co =
                clark_ocone_integrands(&f, &paths, &w, BasisSpec::brownian(2), &[]).unwrap();
            let ef = grid.t_max();
            let mut rms = 0.0;
            for p in 0..paths.n_paths() {
                let v = paths.view(p);
                let mut recon = ef;
                // Left-point stochastic integral: z at node k times the
                // increment leaving node k.
                let bk: Vec<f64> = paths.brownian(p);
                let _ = bk;
                recon += 2.0 * v.b_at_node(0) * paths.db(p)[0];
                for (row, &k) in co.node_indices.iter().enumerate() {
                    if k < grid.n_nodes() - 1 {
                        recon += co.z_fitted[row][p] * paths.db(p)[k];
                    }
                }
                let f_val = v.b_at_node(t_node) * v.b_at_node(t_node);
                rms += (f_val - recon) * (f_val - recon);
            }
            rms = (rms / paths.n_paths() as f64).sqrt();
            assert!(rms < prev, "reconstruction rms did not improve: {rms} vs {prev}");
            prev = rms;
        }
    }

    #[test]
    fn density_derivative_matches_lemma() {
        let grid = Arc::new(build_graded_grid(4.0, 8, 4, 1.0, 2.0).unwrap());
        let paths = Arc::new(simulate_paths(&grid, 2000, None, 8).unwrap());
        let xi = |_: f64| 0.3;
        let w = girsanov_weights(&paths, xi, None).unwrap();
        let oracle = density_malliavin(&w, xi, &grid, 1.0, 3.0).unwrap();
        // FD of M(3) with respect to the increment at s = 1.
        let t_node = grid.node_index_of(3.0).unwrap();
        let nodes_v: Vec<f64> = grid.nodes().to_vec();
        let deltas: Vec<f64> = paths.deltas().to_vec();
        let f = PathFunctional::new(
            move |v: &PathView| {
                let mut log_m = 0.0;
                for i in 0..t_node {
                    let xs = 0.3;
                    log_m += xs * v.db[i] - 0.5 * xs * xs * deltas[i];
                    let _ = nodes_v[i];
                }
                log_m.exp()
            },
            "M(3)",
        );
        let eps = fd_epsilon(1.0);
        let mut rms = 0.0;
        for p in 0..paths.n_paths() {
            let d = brownian_malliavin_fd(&f, &paths, p, 1.0, eps).unwrap();
            rms += (d - oracle[p]) * (d - oracle[p]);
        }
        rms = (rms / paths.n_paths() as f64).sqrt();
        assert!(rms < 1e-4, "FD vs Lemma oracle rms {rms}");
        // s > t: zero.
        let oracle0 = density_malliavin(&w, xi, &grid, 3.5, 3.0).unwrap();
        assert!(oracle0.iter().all(|&v| v == 0.0));
        // xi = 0: zero.
        let w0 = girsanov_weights(&paths, |_| 0.0, None).unwrap();
        let z = density_malliavin(&w0, |_| 0.0, &grid, 1.0, 3.0).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }
}
