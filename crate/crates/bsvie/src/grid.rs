//! Quadrature grids and integration rules for semi-infinite and triangular
//! domains with exponential-decay tail control.
//!
//! The half-line `[0, inf)` is truncated at `t_max` and covered by
//! composite panels whose widths grow geometrically toward `t_max`. Within
//! each panel the nodes are Gauss-Legendre points; panel boundaries are
//! carried as additional nodes so that every quantity in the solver
//! pipeline is tabulated on one shared node set.
//!
//! Integrals between two grid nodes use node-aligned product integration:
//! each consecutive-node interval carries interpolatory weights on a
//! stencil of up to eight neighboring nodes, clamped to stay inside the
//! integration range. Clamping keeps the rules usable where integrands
//! exist only on one side (Volterra rows are defined for `u >= t` only,
//! and the triangular resolvent solve must never reference values above
//! the current `s`), while the wide stencil keeps the order uniformly
//! high even for ranges that start or end in the middle of a panel.

use crate::error::{Error, Result};

/// Stencil width of the node-aligned product-integration rules.
const STENCIL: usize = 8;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
///
/// Newton iteration on the Legendre recurrence; accurate to machine
/// precision for the orders used here (n <= 64).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss-Legendre order must be >= 1");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for k in 0..m {
        // Tricomi initial guess for the k-th positive root.
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre P_n(x) and derivative via the three-term recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                let mut q0 = 1.0;
                let mut q1 = x;
                for j in 2..=n {
                    let q2 = ((2 * j - 1) as f64 * x * q1 - (j - 1) as f64 * q0) / j as f64;
                    q0 = q1;
                    q1 = q2;
                }
                dp = n as f64 * (x * q1 - q0) / (x * x - 1.0);
                x -= q1 / dp;
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[k] = -x;
        nodes[n - 1 - k] = x;
        weights[k] = w;
        weights[n - 1 - k] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Interpolatory quadrature weights on the node set `xs` for integration
/// over `[a, b]`. Exact for polynomials of degree `xs.len() - 1`.
fn interpolatory_weights(xs: &[f64], a: f64, b: f64) -> Vec<f64> {
    let m = xs.len();
    debug_assert!(m >= 2);
    // Work in a locally scaled coordinate for conditioning.
    let lo = xs[0];
    let hi = xs[m - 1];
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (lo + hi);
    let scale = |x: f64| (x - mid) / half;
    let xs_l: Vec<f64> = xs.iter().map(|&x| scale(x)).collect();
    let (a_l, b_l) = (scale(a), scale(b));

    // Barycentric weights of the interpolation nodes.
    let mut bary = vec![1.0; m];
    for l in 0..m {
        for r in 0..m {
            if r != l {
                bary[l] /= xs_l[l] - xs_l[r];
            }
        }
    }
    // Reference Gauss rule of ample order on [a_l, b_l].
    let (gn, gw) = gauss_legendre(m + 2);
    let rhalf = 0.5 * (b_l - a_l);
    let rmid = 0.5 * (a_l + b_l);
    let mut w = vec![0.0; m];
    for (q, &g) in gn.iter().enumerate() {
        let xi = rmid + rhalf * g;
        let wq = gw[q] * rhalf * half; // back to physical scale
        let mut hit = None;
        for (l, &x) in xs_l.iter().enumerate() {
            if (xi - x).abs() < 1e-14 {
                hit = Some(l);
                break;
            }
        }
        match hit {
            Some(l) => w[l] += wq,
            None => {
                let mut denom = 0.0;
                for l in 0..m {
                    denom += bary[l] / (xi - xs_l[l]);
                }
                for l in 0..m {
                    w[l] += wq * (bary[l] / (xi - xs_l[l])) / denom;
                }
            }
        }
    }
    w
}

/// Weights for one consecutive-node interval, supported on the stencil
/// starting at node `lo`.
#[derive(Debug, Clone)]
struct IntervalRule {
    lo: usize,
    w: Vec<f64>,
}

/// Graded quadrature grid on `[0, t_max]` with per-node weights and
/// node-aligned sub-range rules.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    nodes: Vec<f64>,
    /// Full-range `[0, t_max]` rule aligned with `nodes`.
    node_weights: Vec<f64>,
    boundaries: Vec<f64>,
    n_panels: usize,
    pts_per_panel: usize,
    t_max: f64,
    grading_rate: f64,
    lambda: f64,
    /// Interior rules: interval `k` integrated on stencil `[k-3, k+4]`
    /// (present when that stencil exists).
    main: Vec<Option<IntervalRule>>,
    /// Left-clamped rules: `left[k][d]` integrates interval `k` on the
    /// stencil `[k-d, k-d+7]` for a range starting at `i = k - d`,
    /// `d = 0..=2`.
    left: Vec<[Option<IntervalRule>; 3]>,
    /// Right-clamped rules: `right[k][d-1]` integrates interval `k` on
    /// `[j-7, j]` for a range ending at `j = k + d`, `d = 1..=4`.
    right: Vec<[Option<IntervalRule>; 4]>,
    /// Whole-range rules for short ranges: `short[i][d-1]` holds the
    /// weights on nodes `i..=i+d` for the integral over `[x_i, x_{i+d}]`,
    /// `d = 1..=7`.
    short: Vec<Vec<Vec<f64>>>,
}

impl TimeGrid {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Quadrature weights aligned with `nodes()` for the full-range rule;
    /// all positive.
    pub fn node_weights(&self) -> &[f64] {
        &self.node_weights
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn grading_rate(&self) -> f64 {
        self.grading_rate
    }

    pub fn n_panels(&self) -> usize {
        self.n_panels
    }

    pub fn pts_per_panel(&self) -> usize {
        self.pts_per_panel
    }

    pub fn panel_boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// Index of the grid node equal to `t` (within an absolute tolerance
    /// scaled to the horizon), if any.
    pub fn node_index_of(&self, t: f64) -> Option<usize> {
        let idx = self
            .nodes
            .partition_point(|&x| x < t)
            .min(self.nodes.len() - 1);
        let tol = 1e-9 * self.t_max.max(1.0);
        for k in [idx.saturating_sub(1), idx] {
            if (self.nodes[k] - t).abs() <= tol {
                return Some(k);
            }
        }
        None
    }

    /// Stream the node-aligned weights of the rule for the integral over
    /// `[x_i, x_j]`. All emitted node indices lie in `i..=j`; a node may
    /// be emitted several times (contributions from adjacent interval
    /// stencils).
    pub fn for_each_range_weight(&self, i: usize, j: usize, mut f: impl FnMut(usize, f64)) {
        assert!(j < self.nodes.len(), "range end out of bounds");
        if i >= j {
            return;
        }
        let d = j - i;
        if d <= STENCIL - 1 {
            for (off, &w) in self.short[i][d - 1].iter().enumerate() {
                f(i + off, w);
            }
            return;
        }
        for k in i..j {
            let rule = if k - i <= 2 {
                self.left[k][k - i].as_ref().expect("left rule")
            } else if j - k <= 4 {
                self.right[k][j - k - 1].as_ref().expect("right rule")
            } else {
                self.main[k].as_ref().expect("main rule")
            };
            for (off, &w) in rule.w.iter().enumerate() {
                f(rule.lo + off, w);
            }
        }
    }

    /// Node-aligned weights for the integral over `[x_i, x_j]`,
    /// aggregated per node.
    pub fn range_weights(&self, i: usize, j: usize) -> Vec<(usize, f64)> {
        let mut acc = vec![0.0; j.saturating_sub(i) + 1];
        self.for_each_range_weight(i, j, |k, w| acc[k - i] += w);
        acc.into_iter()
            .enumerate()
            .map(|(off, w)| (i + off, w))
            .collect()
    }

    /// Integrate a function over `[0, t_max]` with the full composite rule.
    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        let mut acc = 0.0;
        for (k, &w) in self.node_weights.iter().enumerate() {
            acc += w * f(self.nodes[k]);
        }
        acc
    }

    /// Integrate a function over `[x_i, x_j]`.
    pub fn integrate_range(&self, i: usize, j: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
        let mut acc = 0.0;
        self.for_each_range_weight(i, j, |k, w| acc += w * f(self.nodes[k]));
        acc
    }

    /// Integrate node-tabulated values over `[x_i, x_j]`; `values[k]` is
    /// the integrand at `nodes[k]`.
    pub fn integrate_tabulated(&self, i: usize, j: usize, values: &[f64]) -> f64 {
        let mut acc = 0.0;
        self.for_each_range_weight(i, j, |k, w| acc += w * values[k]);
        acc
    }
}

/// Build a graded composite Gauss-Legendre grid on `[0, t_max]`.
///
/// Panel widths grow geometrically by `grading_rate` toward `t_max`;
/// within each panel the nodes are Gauss-Legendre points, and panel
/// boundaries are kept as nodes.
pub fn build_graded_grid(
    t_max: f64,
    n_panels: usize,
    pts_per_panel: usize,
    grading_rate: f64,
    lambda: f64,
) -> Result<TimeGrid> {
    if !(t_max > 0.0) || !t_max.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "t_max must be positive and finite, got {t_max}"
        )));
    }
    if n_panels < 1 {
        return Err(Error::InvalidParameter("n_panels must be >= 1".into()));
    }
    if pts_per_panel < 2 {
        return Err(Error::InvalidParameter(
            "pts_per_panel must be >= 2".into(),
        ));
    }
    if !(grading_rate >= 1.0) || !grading_rate.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "grading_rate must be >= 1, got {grading_rate}"
        )));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "lambda must be positive, got {lambda}"
        )));
    }

    // Geometric panel boundaries.
    let mut boundaries = Vec::with_capacity(n_panels + 1);
    boundaries.push(0.0);
    if grading_rate > 1.0 {
        let w0 = t_max * (grading_rate - 1.0) / (grading_rate.powi(n_panels as i32) - 1.0);
        let mut acc = 0.0;
        for q in 0..n_panels {
            acc += w0 * grading_rate.powi(q as i32);
            boundaries.push(acc);
        }
    } else {
        for q in 1..=n_panels {
            boundaries.push(t_max * q as f64 / n_panels as f64);
        }
    }
    boundaries[n_panels] = t_max;

    let (gl_nodes, _) = gauss_legendre(pts_per_panel);
    let n_nodes = n_panels * (pts_per_panel + 1) + 1;
    let mut nodes = Vec::with_capacity(n_nodes);
    for q in 0..n_panels {
        let (lo, hi) = (boundaries[q], boundaries[q + 1]);
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (lo + hi);
        nodes.push(lo);
        for &g in &gl_nodes {
            nodes.push(mid + half * g);
        }
    }
    nodes.push(t_max);

    // Per-interval product-integration rules.
    let n = nodes.len();
    let rule = |lo: usize, hi: usize, a: usize, b: usize| -> IntervalRule {
        IntervalRule {
            lo,
            w: interpolatory_weights(&nodes[lo..=hi], nodes[a], nodes[b]),
        }
    };
    let mut main: Vec<Option<IntervalRule>> = Vec::with_capacity(n - 1);
    let mut left: Vec<[Option<IntervalRule>; 3]> = Vec::with_capacity(n - 1);
    let mut right: Vec<[Option<IntervalRule>; 4]> = Vec::with_capacity(n - 1);
    for k in 0..n - 1 {
        main.push(if k >= 3 && k + 4 <= n - 1 {
            Some(rule(k - 3, k + 4, k, k + 1))
        } else {
            None
        });
        let mut lv: [Option<IntervalRule>; 3] = [None, None, None];
        for (d, slot) in lv.iter_mut().enumerate() {
            if k >= d && k - d + STENCIL - 1 <= n - 1 {
                *slot = Some(rule(k - d, k - d + STENCIL - 1, k, k + 1));
            }
        }
        left.push(lv);
        let mut rv: [Option<IntervalRule>; 4] = [None, None, None, None];
        for d in 1..=4usize {
            if k + d <= n - 1 && k + d >= STENCIL - 1 {
                rv[d - 1] = Some(rule(k + d - (STENCIL - 1), k + d, k, k + 1));
            }
        }
        right.push(rv);
    }
    // Whole-range rules for short ranges (at most STENCIL nodes).
    let mut short: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut per_d = Vec::new();
        for d in 1..=(STENCIL - 1).min(n - 1 - i) {
            per_d.push(interpolatory_weights(
                &nodes[i..=i + d],
                nodes[i],
                nodes[i + d],
            ));
        }
        short.push(per_d);
    }

    let mut grid = TimeGrid {
        nodes,
        node_weights: vec![0.0; n],
        boundaries,
        n_panels,
        pts_per_panel,
        t_max,
        grading_rate,
        lambda,
        main,
        left,
        right,
        short,
    };
    let mut full = vec![0.0; n];
    grid.for_each_range_weight(0, n - 1, |k, w| full[k] += w);
    grid.node_weights = full;
    Ok(grid)
}

/// Horizon `T` beyond which the tail integral of `prefactor * e^{-rate s}`
/// over `[T, inf)` is at most `tol`: `T = ln(prefactor / (tol rate)) / rate`.
pub fn truncation_horizon(decay_rate: f64, prefactor: f64, tol: f64) -> Result<f64> {
    if !(decay_rate > 0.0) || !decay_rate.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "decay_rate must be positive, got {decay_rate}"
        )));
    }
    if !(prefactor > 0.0) || !prefactor.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "prefactor must be positive, got {prefactor}"
        )));
    }
    if !(tol > 0.0) || tol >= prefactor {
        return Err(Error::InvalidParameter(format!(
            "tol must satisfy 0 < tol < prefactor, got {tol}"
        )));
    }
    Ok((prefactor / (tol * decay_rate)).ln().max(0.0) / decay_rate)
}

/// Quadrature of `f` on `[0, t_max]` plus a separately reported tail bound
/// `prefactor * e^{-rate t_max} / rate` for the neglected `[t_max, inf)`
/// part. The decay bound on `f` past `t_max` is the caller's contract.
pub fn integrate_semi_infinite(
    mut f: impl FnMut(f64) -> f64,
    grid: &TimeGrid,
    tail_prefactor: f64,
    tail_rate: f64,
) -> Result<(f64, f64)> {
    let mut acc = 0.0;
    for (k, &w) in grid.node_weights().iter().enumerate() {
        let v = f(grid.nodes()[k]);
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "integrand not finite at s = {}",
                grid.nodes()[k]
            )));
        }
        acc += w * v;
    }
    let tail = if tail_rate > 0.0 {
        tail_prefactor * (-tail_rate * grid.t_max()).exp() / tail_rate
    } else {
        f64::INFINITY
    };
    Ok((acc, tail))
}

/// Nested quadrature of `g(u, s)` over the triangle
/// `{t <= u <= s <= t_max}`. `t` must be a grid node; the inner integral
/// over `u` reuses the outer grid clipped at `s`.
pub fn integrate_triangle(
    mut g: impl FnMut(f64, f64) -> f64,
    t: f64,
    grid: &TimeGrid,
) -> Result<f64> {
    let i = grid
        .node_index_of(t)
        .ok_or_else(|| Error::InvalidParameter(format!("t = {t} is not a grid node")))?;
    let n = grid.n_nodes();
    let mut acc = 0.0;
    let mut bad = None;
    grid.for_each_range_weight(i, n - 1, |j, wj| {
        let s = grid.nodes()[j];
        let mut inner = 0.0;
        grid.for_each_range_weight(i, j, |k, wk| {
            let v = g(grid.nodes()[k], s);
            if !v.is_finite() && bad.is_none() {
                bad = Some((grid.nodes()[k], s));
            }
            inner += wk * v;
        });
        acc += wj * inner;
    });
    if let Some((u, s)) = bad {
        return Err(Error::Numeric(format!(
            "triangle integrand not finite at (u, s) = ({u}, {s})"
        )));
    }
    Ok(acc)
}

/// Weighted L1 norm of node-tabulated row values from node `i`:
/// `sum_j w_j e^{-rate s_j} |values[j]|` with the `[x_i, t_max]` rule.
pub fn weighted_row_l1(grid: &TimeGrid, i: usize, rate: f64, values: &[f64]) -> f64 {
    let n = grid.n_nodes();
    let mut acc = 0.0;
    grid.for_each_range_weight(i, n - 1, |k, w| {
        acc += w * (-rate * grid.nodes()[k]).exp() * values[k].abs();
    });
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn single_panel_two_point_grid() {
        let g = build_graded_grid(1.0, 1, 2, 1.0, 2.0).unwrap();
        // Endpoints as boundary markers plus the two Gauss nodes of [0, 1].
        let expected = [0.0, 0.5 - 0.5 / 3.0_f64.sqrt(), 0.5 + 0.5 / 3.0_f64.sqrt(), 1.0];
        assert_eq!(g.n_nodes(), 4);
        for (a, b) in g.nodes().iter().zip(expected.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
        assert_relative_eq!(g.integrate(|_| 1.0), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn full_rule_weights_positive() {
        for (t_max, np, pts, rate) in [
            (1.0, 1, 2, 1.0),
            (40.0, 20, 8, 1.2),
            (16.0, 16, 10, 1.15),
            (7.5, 5, 3, 1.5),
        ] {
            let g = build_graded_grid(t_max, np, pts, rate, 2.0).unwrap();
            for (k, &w) in g.node_weights().iter().enumerate() {
                assert!(w > 0.0, "weight at node {k} is {w}");
            }
        }
    }

    #[test]
    fn geometric_panel_widths() {
        let g = build_graded_grid(40.0, 20, 8, 1.2, 2.0).unwrap();
        let b = g.panel_boundaries();
        assert_eq!(b.len(), 21);
        let w0 = b[1] - b[0];
        let mut sum = 0.0;
        for q in 0..20 {
            let w = b[q + 1] - b[q];
            assert_relative_eq!(w, w0 * 1.2_f64.powi(q as i32), max_relative = 1e-10);
            sum += w;
        }
        assert_relative_eq!(sum, 40.0, max_relative = 1e-12);
    }

    #[test]
    fn constant_integrates_to_t_max() {
        for (t_max, np, pts, rate) in [(1.0, 1, 2, 1.0), (40.0, 20, 8, 1.2), (7.5, 5, 3, 1.5)] {
            let g = build_graded_grid(t_max, np, pts, rate, 2.0).unwrap();
            assert_relative_eq!(g.integrate(|_| 1.0), t_max, max_relative = 1e-12);
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(build_graded_grid(0.0, 1, 2, 1.0, 2.0).is_err());
        assert!(build_graded_grid(1.0, 0, 2, 1.0, 2.0).is_err());
        assert!(build_graded_grid(1.0, 1, 1, 1.0, 2.0).is_err());
        assert!(build_graded_grid(1.0, 1, 2, 0.9, 2.0).is_err());
        assert!(build_graded_grid(1.0, 1, 2, 1.0, 0.0).is_err());
    }

    #[test]
    fn truncation_horizon_closed_forms() {
        // decay 1, prefactor 1, tol e^{-10}: tail e^{-T} <= e^{-10} at T = 10.
        let t = truncation_horizon(1.0, 1.0, (-10.0_f64).exp()).unwrap();
        assert_relative_eq!(t, 10.0, epsilon = 1e-12);
        // decay 2: e^{-2T}/2 <= 1e-8 at T ~ 8.864.
        let t = truncation_horizon(2.0, 1.0, 1e-8).unwrap();
        assert_relative_eq!(t, (1.0_f64 / (2.0 * 1e-8)).ln() / 2.0, epsilon = 1e-12);
        assert!((t - 8.8638).abs() < 1e-3);
        assert!(truncation_horizon(0.0, 1.0, 1e-3).is_err());
        assert!(truncation_horizon(1.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn semi_infinite_closed_forms() {
        let g = build_graded_grid(40.0, 20, 10, 1.2, 2.0).unwrap();
        let (v, tail) = integrate_semi_infinite(|s| (-s).exp(), &g, 1.0, 1.0).unwrap();
        assert!((v + tail - 1.0).abs() < 1e-10, "got {v} + tail {tail}");
        assert!((v - 1.0).abs() <= tail + 1e-12);
        let (v, _) = integrate_semi_infinite(|s| (-2.5 * s).exp(), &g, 1.0, 2.5).unwrap();
        assert_relative_eq!(v, 0.4, epsilon = 1e-10);
        let (v, tail) = integrate_semi_infinite(|_| 0.0, &g, 1.0, 1.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(tail > 0.0);
    }

    #[test]
    fn tail_bound_is_upper_bound_for_exponential() {
        // |true integral - computed value| <= tail_bound, exactly
        // computable for f = e^{-s}.
        let g = build_graded_grid(8.0, 8, 8, 1.1, 2.0).unwrap();
        let (v, tail) = integrate_semi_infinite(|s| (-s).exp(), &g, 1.0, 1.0).unwrap();
        let true_value = 1.0;
        assert!((true_value - v).abs() <= tail * (1.0 + 1e-9) + 1e-14);
    }

    #[test]
    fn triangle_closed_forms() {
        let g2 = build_graded_grid(2.0, 4, 8, 1.0, 2.0).unwrap();
        let area = integrate_triangle(|_, _| 1.0, 0.0, &g2).unwrap();
        assert_relative_eq!(area, 2.0, epsilon = 1e-12);

        let g = build_graded_grid(40.0, 20, 10, 1.2, 2.0).unwrap();
        // g(u,s) = e^{-s} independent of u: integral = int_0^inf s e^{-s} = 1.
        let v = integrate_triangle(|_, s| (-s).exp(), 0.0, &g).unwrap();
        assert_relative_eq!(v, 1.0, epsilon = 1e-10);
        // Same integrand written with a split factor e^{-(s-u)} e^{-u}.
        let v2 = integrate_triangle(|u, s| (-(s - u)).exp() * (-u).exp(), 0.0, &g).unwrap();
        assert_relative_eq!(v2, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn triangle_nonfinite_reports_numeric_error() {
        let g = build_graded_grid(2.0, 2, 4, 1.0, 2.0).unwrap();
        let r = integrate_triangle(|u, s| if s > 1.0 { f64::NAN } else { u }, 0.0, &g);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn refinement_reduces_error_monotonically() {
        // Doubling pts_per_panel drives all three closed-form examples
        // below 1e-10, monotonically.
        let cases: [(fn(f64) -> f64, f64); 2] =
            [(|s| (-s).exp(), 1.0), (|s| (-2.5 * s).exp(), 0.4)];
        for (f, exact) in cases {
            let mut prev = f64::INFINITY;
            for pts in [2, 4, 8] {
                let g = build_graded_grid(40.0, 20, pts, 1.2, 2.0).unwrap();
                let (v, _) = integrate_semi_infinite(f, &g, 1.0, 1.0).unwrap();
                let err = (v - exact).abs().max(1e-16);
                assert!(
                    err <= prev * (1.0 + 1e-12),
                    "refinement not monotone: pts={pts} err={err} prev={prev}"
                );
                prev = err;
            }
            assert!(prev < 1e-10, "final refinement error {prev} too large");
        }
        // Triangle integrand.
        let mut prev = f64::INFINITY;
        for pts in [2, 4, 8] {
            let g = build_graded_grid(40.0, 20, pts, 1.2, 2.0).unwrap();
            let v = integrate_triangle(|_, s| (-s).exp(), 0.0, &g).unwrap();
            let err = (v - 1.0).abs().max(1e-16);
            assert!(err <= prev * (1.0 + 1e-12));
            prev = err;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn range_rules_are_exact_for_constants() {
        let g = build_graded_grid(10.0, 5, 6, 1.3, 2.0).unwrap();
        let n = g.n_nodes();
        for (i, j) in [(0, n - 1), (1, 7), (3, 20), (8, 9), (0, 1), (2, 9), (5, 14)] {
            let len = g.integrate_range(i, j, |_| 1.0);
            assert_relative_eq!(len, g.nodes()[j] - g.nodes()[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn range_rules_are_accurate_for_smooth_integrands() {
        // Compare against a dense reference for ranges that start and end
        // mid-panel.
        let g = build_graded_grid(12.0, 6, 8, 1.3, 2.0).unwrap();
        let f = |x: f64| (-0.8 * x).exp() * (1.3 * x).sin() + 0.2 * x;
        let reference = |a: f64, b: f64| crate::kernels::quad_smooth(f, a, b);
        let n = g.n_nodes();
        for (i, j) in [(1, 5), (2, 17), (4, n - 2), (10, 29), (0, n - 1), (13, 14)] {
            let got = g.integrate_range(i, j, f);
            let want = reference(g.nodes()[i], g.nodes()[j]);
            assert!(
                (got - want).abs() < 1e-10 * (1.0 + want.abs()),
                "range ({i},{j}): {got} vs {want}"
            );
        }
    }

    #[test]
    fn range_rule_support_stays_in_range() {
        let g = build_graded_grid(10.0, 5, 6, 1.3, 2.0).unwrap();
        let n = g.n_nodes();
        for i in 0..n - 1 {
            for j in (i + 1)..n {
                g.for_each_range_weight(i, j, |k, _| {
                    assert!(k >= i && k <= j, "weight at node {k} outside [{i}, {j}]");
                });
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prop_constant_rule_sums_to_t_max(
            t_max in 0.5f64..60.0,
            np in 1usize..12,
            pts in 2usize..10,
            rate in 1.0f64..1.6,
        ) {
            let g = build_graded_grid(t_max, np, pts, rate, 2.0).unwrap();
            let v = g.integrate(|_| 1.0);
            prop_assert!((v - t_max).abs() <= 1e-12 * t_max);
        }

        #[test]
        fn prop_range_splitting_is_consistent(
            np in 2usize..8,
            pts in 4usize..8,
            seed in 0u64..1000,
        ) {
            let g = build_graded_grid(12.0, np, pts, 1.25, 2.0).unwrap();
            let n = g.n_nodes();
            let i = (seed as usize * 7) % (n - 2);
            let j = i + 1 + (seed as usize * 13) % (n - 1 - i);
            let f = |x: f64| (0.7 * x).sin() + 0.3 * x;
            // Split at an intermediate node; the rules differ near the
            // split but agree to quadrature accuracy.
            let whole = g.integrate_range(i, j, f);
            if j > i + 1 {
                let mid = (i + j) / 2;
                let split = g.integrate_range(i, mid, f) + g.integrate_range(mid, j, f);
                prop_assert!((whole - split).abs() < 1e-8 * (1.0 + whole.abs()));
            }
        }
    }
}
