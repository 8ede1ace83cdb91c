//! Path simulation (Brownian motion plus compound Poisson jumps), the
//! Girsanov density `M(t)`, Novikov diagnostics, and measure-Q
//! expectations.
//!
//! The density process is the Doleans-Dade exponential
//!
//! ```text
//! M(t) = exp( int_0^t xi dB - 1/2 int_0^t xi^2 ds
//!           + int int ln(1 + beta) N~(ds, dzeta)
//!           + int int [ln(1 + beta) - beta] nu(dzeta) ds ),
//! ```
//!
//! accumulated in log space along each simulated path. Pathwise `ds`
//! integrals use left-point sums (consistent with predictability); grid
//! refinement, not scheme order, controls the bias.
//!
//! Every path owns an RNG substream derived from `(seed, path index)`, so
//! simulation is reproducible bit-for-bit regardless of thread count or
//! execution order.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

type MarkFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Finite-mark jump specification: intensity measure
/// `nu = sum_k rates[k] delta_{marks[k]}` and jump coefficient
/// `beta(s, zeta) >= -1 + epsilon`.
#[derive(Clone)]
pub struct JumpSpec {
    marks: Vec<f64>,
    rates: Vec<f64>,
    beta: MarkFn,
    epsilon: f64,
}

impl std::fmt::Debug for JumpSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JumpSpec")
            .field("marks", &self.marks)
            .field("rates", &self.rates)
            .field("epsilon", &self.epsilon)
            .finish()
    }
}

impl JumpSpec {
    pub fn new(
        marks: Vec<f64>,
        rates: Vec<f64>,
        beta: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        epsilon: f64,
    ) -> Result<Self> {
        if marks.is_empty() || marks.len() != rates.len() {
            return Err(Error::InvalidParameter(
                "marks and rates must be non-empty and of equal length".into(),
            ));
        }
        if marks.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidParameter("marks must be finite".into()));
        }
        if rates.iter().any(|r| !(r > &0.0) || !r.is_finite()) {
            return Err(Error::InvalidParameter("all rates must be positive".into()));
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidParameter("epsilon must be positive".into()));
        }
        Ok(JumpSpec {
            marks,
            rates,
            beta: Arc::new(beta),
            epsilon,
        })
    }

    /// Constant jump coefficient `beta(s, zeta) = beta0`.
    pub fn constant_beta(marks: Vec<f64>, rates: Vec<f64>, beta0: f64) -> Result<Self> {
        let eps = (1.0 + beta0).max(1e-6).min(1.0);
        Self::new(marks, rates, move |_, _| beta0, eps)
    }

    pub fn marks(&self) -> &[f64] {
        &self.marks
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn total_rate(&self) -> f64 {
        self.rates.iter().sum()
    }

    pub fn beta(&self, s: f64, zeta: f64) -> f64 {
        (self.beta)(s, zeta)
    }

    /// Q-compensator intensity of mark `k` at time `s`:
    /// `(1 + beta(s, zeta_k)) rates[k]`.
    pub fn q_intensity(&self, s: f64, k: usize) -> f64 {
        (1.0 + self.beta(s, self.marks[k])) * self.rates[k]
    }

    /// Check `beta >= -1 + epsilon` on grid nodes x marks.
    pub fn validate_on(&self, grid: &TimeGrid) -> Result<()> {
        for &s in grid.nodes() {
            for &zeta in &self.marks {
                let b = self.beta(s, zeta);
                if !b.is_finite() || b < -1.0 + self.epsilon {
                    return Err(Error::AssumptionViolated {
                        assumption: crate::error::Assumption::BetaLowerBound,
                        detail: format!("beta({s:.4}, {zeta}) = {b} < -1 + {}", self.epsilon),
                    });
                }
            }
        }
        Ok(())
    }
}

/// A single jump event on a path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpEvent {
    pub time: f64,
    pub mark_index: usize,
}

/// Seeded ensemble of discretized Brownian increments and compound-Poisson
/// jump events on a grid. Immutable after construction.
#[derive(Debug, Clone)]
pub struct PathBundle {
    grid: Arc<TimeGrid>,
    n_paths: usize,
    /// `db[p][i]`: Brownian increment over `[x_i, x_{i+1}]`, variance
    /// `x_{i+1} - x_i`.
    db: Vec<Vec<f64>>,
    jumps: Vec<Vec<JumpEvent>>,
    deltas: Vec<f64>,
    seed: u64,
}

/// Borrowed view of one path, the unit all path functionals operate on.
///
/// Functionals should read the Brownian path through `b_at_node` /
/// `b_at_time`; a solver-provided view may carry precomputed prefix sums
/// for O(1) access.
#[derive(Clone, Copy)]
pub struct PathView<'a> {
    pub grid: &'a TimeGrid,
    pub db: &'a [f64],
    pub jumps: &'a [JumpEvent],
    b: Option<&'a [f64]>,
}

impl<'a> PathView<'a> {
    pub fn new(grid: &'a TimeGrid, db: &'a [f64], jumps: &'a [JumpEvent]) -> Self {
        PathView {
            grid,
            db,
            jumps,
            b: None,
        }
    }

    /// Attach precomputed Brownian node values `b[i] = B(x_i)`.
    pub fn with_brownian(mut self, b: &'a [f64]) -> Self {
        self.b = Some(b);
        self
    }

    /// Brownian value at grid node `idx`.
    pub fn b_at_node(&self, idx: usize) -> f64 {
        match self.b {
            Some(b) => b[idx],
            None => self.db[..idx].iter().sum(),
        }
    }

    /// Brownian value at a grid-node time `t` (panics if `t` is off-grid).
    pub fn b_at_time(&self, t: f64) -> f64 {
        let idx = self
            .grid
            .node_index_of(t)
            .expect("b_at_time requires a grid-node time");
        self.b_at_node(idx)
    }

    pub fn b_terminal(&self) -> f64 {
        self.db.iter().sum()
    }

    /// Fill `out[i] = B(x_i)` for all nodes.
    pub fn brownian_into(&self, out: &mut Vec<f64>) {
        out.clear();
        out.push(0.0);
        let mut acc = 0.0;
        for &d in self.db {
            acc += d;
            out.push(acc);
        }
    }

    /// Number of jumps with time `<= t`.
    pub fn n_jumps_by(&self, t: f64) -> usize {
        self.jumps.partition_point(|e| e.time <= t)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(path as u64)))
}

impl PathBundle {
    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn db(&self, p: usize) -> &[f64] {
        &self.db[p]
    }

    pub fn jumps(&self, p: usize) -> &[JumpEvent] {
        &self.jumps[p]
    }

    pub fn view(&self, p: usize) -> PathView<'_> {
        PathView::new(&self.grid, &self.db[p], &self.jumps[p])
    }

    /// Brownian values at all nodes for path `p`.
    pub fn brownian(&self, p: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.grid.n_nodes());
        self.view(p).brownian_into(&mut out);
        out
    }
}

impl PartialEq for PathBundle {
    fn eq(&self, other: &Self) -> bool {
        self.n_paths == other.n_paths
            && self.seed == other.seed
            && self.db == other.db
            && self.jumps == other.jumps
    }
}

/// Simulate `n_paths` independent paths on the grid. Deterministic given
/// `(grid, n_paths, jump_spec, seed)`; each path draws from its own
/// substream, so the result is independent of thread count.
pub fn simulate_paths(
    grid: &Arc<TimeGrid>,
    n_paths: usize,
    jump_spec: Option<&JumpSpec>,
    seed: u64,
) -> Result<PathBundle> {
    if n_paths < 1 {
        return Err(Error::InvalidParameter("n_paths must be >= 1".into()));
    }
    let nodes = grid.nodes();
    let deltas: Vec<f64> = nodes.windows(2).map(|w| w[1] - w[0]).collect();
    let total_rate = jump_spec.map(|j| j.total_rate()).unwrap_or(0.0);
    let t_max = grid.t_max();

    let per_path: Vec<(Vec<f64>, Vec<JumpEvent>)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p);
            let db: Vec<f64> = deltas
                .iter()
                .map(|&dt| {
                    let z: f64 = rng.sample(StandardNormal);
                    dt.sqrt() * z
                })
                .collect();
            let jumps = match jump_spec {
                Some(js) if total_rate > 0.0 => {
                    let count = Poisson::new(total_rate * t_max)
                        .expect("positive Poisson mean")
                        .sample(&mut rng) as usize;
                    let mut events: Vec<JumpEvent> = (0..count)
                        .map(|_| {
                            let time = rng.random::<f64>() * t_max;
                            let u = rng.random::<f64>() * total_rate;
                            let mut acc = 0.0;
                            let mut mark_index = js.rates().len() - 1;
                            for (k, &r) in js.rates().iter().enumerate() {
                                acc += r;
                                if u < acc {
                                    mark_index = k;
                                    break;
                                }
                            }
                            JumpEvent { time, mark_index }
                        })
                        .collect();
                    events.sort_by(|a, b| a.time.total_cmp(&b.time));
                    events
                }
                _ => Vec::new(),
            };
            (db, jumps)
        })
        .collect();

    let mut db = Vec::with_capacity(n_paths);
    let mut jumps = Vec::with_capacity(n_paths);
    for (d, j) in per_path {
        db.push(d);
        jumps.push(j);
    }
    Ok(PathBundle {
        grid: Arc::clone(grid),
        n_paths,
        db,
        jumps,
        deltas,
        seed,
    })
}

/// Girsanov density values `M(x_i)` per path, stored in log form.
#[derive(Debug, Clone)]
pub struct GirsanovWeight {
    /// `log_m[p][i] = log M(x_i)` on path `p`.
    log_m: Vec<Vec<f64>>,
}

impl GirsanovWeight {
    pub fn log_m(&self, p: usize) -> &[f64] {
        &self.log_m[p]
    }

    /// Density `M(x_i)` on path `p`; positive by construction, `M(0) = 1`.
    pub fn m(&self, p: usize, node: usize) -> f64 {
        self.log_m[p][node].exp()
    }

    pub fn m_terminal(&self, p: usize) -> f64 {
        self.log_m[p].last().unwrap().exp()
    }

    pub fn n_paths(&self) -> usize {
        self.log_m.len()
    }

    /// Identity weights (xi = 0, no jumps): M = 1 everywhere.
    pub fn identity(n_paths: usize, n_nodes: usize) -> Self {
        GirsanovWeight {
            log_m: vec![vec![0.0; n_nodes]; n_paths],
        }
    }
}

/// Evaluate `log M(x_i)` along each path: increment sums for the `dB`
/// integral, left-point sums for the `ds` integrals, and per-jump terms
/// `ln(1 + beta)`. The jump `ds` part combines the compensated-measure
/// compensator `-ln(1 + beta) nu` with the Doleans drift
/// `[ln(1 + beta) - beta] nu`, leaving `-beta nu`.
pub fn girsanov_weights(
    paths: &PathBundle,
    xi: impl Fn(f64) -> f64 + Send + Sync,
    jump_spec: Option<&JumpSpec>,
) -> Result<GirsanovWeight> {
    let grid = paths.grid();
    let nodes = grid.nodes();
    let n = nodes.len();
    let deltas = paths.deltas();

    let log_m: Vec<std::result::Result<Vec<f64>, Error>> = (0..paths.n_paths())
        .into_par_iter()
        .map(|p| {
            let db = paths.db(p);
            let jumps = paths.jumps(p);
            let mut log = Vec::with_capacity(n);
            log.push(0.0);
            let mut acc = 0.0;
            let mut jp = 0usize;
            for i in 0..n - 1 {
                let s = nodes[i];
                let dt = deltas[i];
                let xs = xi(s);
                acc += xs * db[i] - 0.5 * xs * xs * dt;
                if let Some(js) = jump_spec {
                    for (k, &zeta) in js.marks().iter().enumerate() {
                        let b = js.beta(s, zeta);
                        if 1.0 + b <= 0.0 {
                            return Err(Error::MeasureDegenerate {
                                s,
                                zeta,
                                value: 1.0 + b,
                            });
                        }
                        acc -= dt * js.rates()[k] * b;
                    }
                    while jp < jumps.len() && jumps[jp].time <= nodes[i + 1] {
                        let ev = jumps[jp];
                        let zeta = js.marks()[ev.mark_index];
                        let b = js.beta(ev.time, zeta);
                        if 1.0 + b <= 0.0 {
                            return Err(Error::MeasureDegenerate {
                                s: ev.time,
                                zeta,
                                value: 1.0 + b,
                            });
                        }
                        acc += (1.0 + b).ln();
                        jp += 1;
                    }
                }
                log.push(acc);
            }
            Ok(log)
        })
        .collect();

    let mut out = Vec::with_capacity(paths.n_paths());
    for l in log_m {
        out.push(l?);
    }
    Ok(GirsanovWeight { log_m: out })
}

/// Configuration for the Novikov divergence heuristics.
#[derive(Debug, Clone, Copy)]
pub struct NovikovConfig {
    /// Hard cap on the computed exponent.
    pub cap: f64,
    /// Largest acceptable estimated tail of the `xi^2` part.
    pub tail_tol: f64,
}

impl Default for NovikovConfig {
    fn default() -> Self {
        NovikovConfig {
            cap: 100.0,
            tail_tol: 1e-8,
        }
    }
}

/// Deterministic-coefficient Novikov exponent
/// `1/2 int_0^inf xi^2 ds + int_0^inf int [ln(1+beta) - beta] nu dzeta ds`,
/// truncated at the grid horizon. The jump part is nonpositive for
/// `beta > -1`, so divergence detection applies to the `xi^2` part: the
/// check fails if the quadrature exceeds the cap or the estimated tail of
/// `xi^2 / 2` is non-negligible.
pub fn novikov_exponent(
    xi: impl Fn(f64) -> f64,
    jump_spec: Option<&JumpSpec>,
    grid: &TimeGrid,
    config: NovikovConfig,
) -> Result<f64> {
    let fb = |s: f64| {
        let x = xi(s);
        0.5 * x * x
    };
    let brown = grid.integrate(fb);
    if !brown.is_finite() {
        return Err(Error::Numeric("xi^2 quadrature not finite".into()));
    }

    // Tail estimate of the xi^2 part from its decay between a late interior
    // node and the horizon.
    let t_max = grid.t_max();
    let f_end = fb(t_max);
    let tail = if f_end <= 1e-14 {
        0.0
    } else {
        let a = 0.75 * t_max;
        let f_a = fb(a).max(f_end);
        let rate = (f_a / f_end).ln() / (t_max - a);
        if rate <= 1e-9 {
            f64::INFINITY
        } else {
            f_end / rate
        }
    };
    if brown > config.cap || tail > config.tail_tol {
        return Err(Error::Divergent { value: brown, tail });
    }

    let mut jump_part = 0.0;
    if let Some(js) = jump_spec {
        jump_part = grid.integrate(|s| {
            js.marks()
                .iter()
                .zip(js.rates())
                .map(|(&zeta, &nu)| {
                    let b = js.beta(s, zeta);
                    ((1.0 + b).ln() - b) * nu
                })
                .sum::<f64>()
        });
    }
    Ok(brown + jump_part)
}

/// Density-weighted Monte Carlo estimate of `E_Q[F]`:
/// `mean_p M_p(at) F_p` with a normal 95% confidence halfwidth.
/// Summation is sequential in path order so estimates are independent of
/// thread count.
pub fn expect_q(
    functional: &[f64],
    weights: &GirsanovWeight,
    at_node: usize,
) -> (f64, f64) {
    let n = functional.len();
    assert!(n > 0 && n == weights.n_paths());
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for (p, &f) in functional.iter().enumerate() {
        let v = weights.m(p, at_node) * f;
        sum += v;
        sumsq += v * v;
    }
    let mean = sum / n as f64;
    let var = (sumsq / n as f64 - mean * mean).max(0.0) * n as f64 / (n as f64 - 1.0).max(1.0);
    (mean, 1.96 * (var / n as f64).sqrt())
}

/// Shift increments to the Q-Brownian motion:
/// `dB_Q = dB - xi(x_i) dt` per interval. Jump events are carried
/// unchanged; integrators against the Q-compensated measure use
/// [`JumpSpec::q_intensity`] for the `(1 + beta) nu` compensator.
pub fn q_shifted_increments(
    paths: &PathBundle,
    xi: impl Fn(f64) -> f64 + Send + Sync,
    _jump_spec: Option<&JumpSpec>,
) -> PathBundle {
    let nodes = paths.grid().nodes();
    let deltas = paths.deltas();
    let db: Vec<Vec<f64>> = (0..paths.n_paths())
        .into_par_iter()
        .map(|p| {
            paths
                .db(p)
                .iter()
                .enumerate()
                .map(|(i, &d)| d - xi(nodes[i]) * deltas[i])
                .collect()
        })
        .collect();
    PathBundle {
        grid: Arc::clone(paths.grid()),
        n_paths: paths.n_paths(),
        db,
        jumps: paths.jumps.clone(),
        deltas: paths.deltas.clone(),
        seed: paths.seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_graded_grid;
    use approx::assert_relative_eq;

    fn uniform_grid(t_max: f64, n_intervals: usize) -> Arc<TimeGrid> {
        // pts=4 per panel keeps intervals roughly uniform.
        Arc::new(build_graded_grid(t_max, n_intervals / 5, 4, 1.0, 2.0).unwrap())
    }

    #[test]
    fn brownian_increment_statistics() {
        let grid = uniform_grid(10.0, 100);
        let paths = simulate_paths(&grid, 10_000, None, 42).unwrap();
        let n = paths.n_paths() as f64;
        // Terminal value: mean 0 within 5 sigma.
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for p in 0..paths.n_paths() {
            let b: f64 = paths.db(p).iter().sum();
            sum += b;
            sumsq += b * b;
        }
        let mean = sum / n;
        let sigma_mean = (grid.t_max() / n).sqrt();
        assert!(mean.abs() < 5.0 * sigma_mean, "mean {mean} vs 5s {sigma_mean}");
        let var = sumsq / n - mean * mean;
        let sigma_var = grid.t_max() * (2.0 / n).sqrt();
        assert!(
            (var - grid.t_max()).abs() < 5.0 * sigma_var,
            "var {var} vs t_max {}",
            grid.t_max()
        );
        // Per-interval variance spot check.
        let i = 7;
        let dt = paths.deltas()[i];
        let mut s2 = 0.0;
        for p in 0..paths.n_paths() {
            s2 += paths.db(p)[i] * paths.db(p)[i];
        }
        let v = s2 / n;
        assert!((v - dt).abs() < 5.0 * dt * (2.0 / n).sqrt());
    }

    #[test]
    fn jump_counts_match_poisson_mean() {
        let grid = uniform_grid(10.0, 100);
        let js = JumpSpec::constant_beta(vec![1.0], vec![1.0], 0.5).unwrap();
        let paths = simulate_paths(&grid, 10_000, Some(&js), 7).unwrap();
        let n = paths.n_paths() as f64;
        let mean_expected = js.total_rate() * grid.t_max();
        let mut total = 0.0;
        for p in 0..paths.n_paths() {
            total += paths.jumps(p).len() as f64;
        }
        let mean = total / n;
        let sigma = (mean_expected / n).sqrt();
        assert!(
            (mean - mean_expected).abs() < 5.0 * sigma,
            "jump mean {mean} vs {mean_expected}"
        );
    }

    #[test]
    fn determinism_same_seed_bit_identical() {
        let grid = uniform_grid(5.0, 50);
        let js = JumpSpec::constant_beta(vec![1.0, -0.5], vec![0.7, 0.3], 0.2).unwrap();
        let a = simulate_paths(&grid, 500, Some(&js), 123).unwrap();
        let b = simulate_paths(&grid, 500, Some(&js), 123).unwrap();
        assert_eq!(a, b);
        let c = simulate_paths(&grid, 500, Some(&js), 124).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn martingale_mean_one_brownian_only() {
        let grid = uniform_grid(5.0, 250);
        let paths = simulate_paths(&grid, 20_000, None, 42).unwrap();
        let w = girsanov_weights(&paths, |_| 0.3, None).unwrap();
        let ones = vec![1.0; paths.n_paths()];
        let (m, ci) = expect_q(&ones, &w, grid.n_nodes() - 1);
        assert!((m - 1.0).abs() < 1.5 * ci, "E[M] = {m} +- {ci}");
        // xi = 0 gives M identically one.
        let w0 = girsanov_weights(&paths, |_| 0.0, None).unwrap();
        for p in [0, 13, 499] {
            assert_eq!(w0.m(p, grid.n_nodes() - 1), 1.0);
            assert_eq!(w0.m(p, 0), 1.0);
        }
    }

    #[test]
    fn martingale_mean_one_with_jumps() {
        let grid = uniform_grid(5.0, 250);
        let js = JumpSpec::constant_beta(vec![1.0], vec![1.0], 0.5).unwrap();
        let paths = simulate_paths(&grid, 20_000, Some(&js), 11).unwrap();
        let w = girsanov_weights(&paths, |_| 0.0, Some(&js)).unwrap();
        let ones = vec![1.0; paths.n_paths()];
        let (m, ci) = expect_q(&ones, &w, grid.n_nodes() - 1);
        assert!((m - 1.0).abs() < 3.0 * ci.max(1e-3), "E[M] = {m} +- {ci}");
    }

    #[test]
    fn measure_degenerate_detected() {
        let grid = uniform_grid(2.0, 20);
        let js = JumpSpec::new(vec![1.0], vec![1.0], |_, _| -1.5, 1e-6).unwrap();
        let paths = simulate_paths(&grid, 10, Some(&js), 1).unwrap();
        let r = girsanov_weights(&paths, |_| 0.0, Some(&js));
        assert!(matches!(r, Err(Error::MeasureDegenerate { .. })));
        assert!(js.validate_on(&grid).is_err());
    }

    #[test]
    fn novikov_closed_form_and_divergence() {
        let grid = Arc::new(build_graded_grid(40.0, 20, 10, 1.2, 2.0).unwrap());
        // xi = e^{-delta s} with xi0 = 1, delta = 0.5: exponent = 1/(4 delta) = 0.5.
        let v = novikov_exponent(
            |s| (-0.5 * s).exp(),
            None,
            &grid,
            NovikovConfig::default(),
        )
        .unwrap();
        assert_relative_eq!(v, 0.5, epsilon = 1e-8);
        // Zero coefficients.
        let v = novikov_exponent(|_| 0.0, None, &grid, NovikovConfig::default()).unwrap();
        assert_eq!(v, 0.0);
        // Constant xi: not integrable on the half-line.
        let r = novikov_exponent(|_| 0.3, None, &grid, NovikovConfig::default());
        assert!(matches!(r, Err(Error::Divergent { .. })));
    }

    #[test]
    fn expect_q_normalization_and_lognormal() {
        let grid = uniform_grid(2.0, 40);
        let paths = simulate_paths(&grid, 50_000, None, 5).unwrap();
        let w = girsanov_weights(&paths, |_| 0.0, None).unwrap();
        let i1 = grid.node_index_of(1.0).unwrap();
        // F = exp(B(1)): mean e^{1/2}.
        let vals: Vec<f64> = (0..paths.n_paths())
            .map(|p| paths.view(p).b_at_node(i1).exp())
            .collect();
        let (m, ci) = expect_q(&vals, &w, grid.n_nodes() - 1);
        assert!(
            (m - (0.5_f64).exp()).abs() < 3.0 * ci,
            "lognormal mean {m} +- {ci}"
        );
    }

    #[test]
    fn girsanov_drift_shift() {
        // F = B(T) under Q with constant xi: E_Q[B(T)] = xi T.
        let grid = uniform_grid(4.0, 200);
        let paths = simulate_paths(&grid, 50_000, None, 9).unwrap();
        let c = 0.25;
        let w = girsanov_weights(&paths, |_| c, None).unwrap();
        let vals: Vec<f64> = (0..paths.n_paths())
            .map(|p| paths.db(p).iter().sum::<f64>())
            .collect();
        let (m, ci) = expect_q(&vals, &w, grid.n_nodes() - 1);
        assert!(
            (m - c * grid.t_max()).abs() < 3.0 * ci,
            "E_Q[B(T)] = {m} +- {ci}, want {}",
            c * grid.t_max()
        );
    }

    #[test]
    fn girsanov_consistency_with_drifted_paths() {
        // Density-weighted E_P[M g(B(T))] vs plain E over drift-added paths.
        let grid = uniform_grid(3.0, 150);
        let paths = simulate_paths(&grid, 40_000, None, 17).unwrap();
        let c = 0.4;
        let w = girsanov_weights(&paths, |_| c, None).unwrap();
        let g = |b: f64| (b / 2.0).tanh();
        let weighted: Vec<f64> = (0..paths.n_paths())
            .map(|p| g(paths.db(p).iter().sum::<f64>()))
            .collect();
        let (mq, ciq) = expect_q(&weighted, &w, grid.n_nodes() - 1);
        // Plain mean over paths with drift c added.
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for p in 0..paths.n_paths() {
            let b: f64 = paths.db(p).iter().sum::<f64>() + c * grid.t_max();
            let v = g(b);
            sum += v;
            sumsq += v * v;
        }
        let n = paths.n_paths() as f64;
        let mp = sum / n;
        let cip = 1.96 * ((sumsq / n - mp * mp).max(0.0) / n).sqrt();
        assert!(
            (mq - mp).abs() < 3.0 * (ciq + cip),
            "Q-weighted {mq}+-{ciq} vs drifted {mp}+-{cip}"
        );
    }

    #[test]
    fn q_shift_identity_and_constant() {
        let grid = uniform_grid(2.0, 20);
        let paths = simulate_paths(&grid, 50, None, 3).unwrap();
        let same = q_shifted_increments(&paths, |_| 0.0, None);
        assert_eq!(paths, same);
        let shifted = q_shifted_increments(&paths, |_| 2.0, None);
        for i in 0..paths.deltas().len() {
            let want = paths.db(0)[i] - 2.0 * paths.deltas()[i];
            assert_relative_eq!(shifted.db(0)[i], want, epsilon = 1e-15);
        }
        // Determinism of the shift.
        let again = q_shifted_increments(&paths, |_| 2.0, None);
        assert_eq!(shifted, again);
    }
}
