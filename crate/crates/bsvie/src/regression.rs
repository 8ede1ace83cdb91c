//! Weighted least-squares Monte Carlo conditioning.
//!
//! Conditional expectations under Q are estimated by regressing per-path
//! quantities onto a polynomial basis of the path state, with the terminal
//! density M(T) as regression weight: minimizing `sum_p M_p (y_p - g)^2`
//! over F_s-measurable `g` projects onto `E_Q[y | F_s]`.
//!
//! State variables are standardized before the monomials are built;
//! degenerate state columns (e.g. B(0) = 0 at the origin, or jump counts in
//! a no-jump problem) are dropped instead of poisoning the normal
//! equations. A rank-deficient solve falls back to a lower degree.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Regression basis: total-degree polynomials in the standardized state
/// `(B(s), N(s))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct BasisSpec {
    pub degree: usize,
    pub with_jump_count: bool,
}

impl BasisSpec {
    pub fn brownian(degree: usize) -> Self {
        BasisSpec {
            degree,
            with_jump_count: false,
        }
    }
}

/// A fitted conditional-expectation function of the state `(b, n)`.
#[derive(Debug, Clone)]
pub struct Fit {
    degree: usize,
    use_b: bool,
    use_n: bool,
    b_mean: f64,
    b_scale: f64,
    n_mean: f64,
    n_scale: f64,
    coeffs: Vec<f64>,
    pub rank_deficient: bool,
}

fn for_each_feature(
    degree: usize,
    use_b: bool,
    use_n: bool,
    b: f64,
    n: f64,
    mut f: impl FnMut(f64),
) {
    let max_a = if use_b { degree } else { 0 };
    for a in 0..=max_a {
        let max_c = if use_n { degree - a } else { 0 };
        let ba = b.powi(a as i32);
        for c in 0..=max_c {
            f(ba * n.powi(c as i32));
        }
    }
}

fn n_features(degree: usize, use_b: bool, use_n: bool) -> usize {
    let mut m = 0;
    for_each_feature(degree, use_b, use_n, 1.0, 1.0, |_| m += 1);
    m
}

impl Fit {
    /// Constant fit (no state dependence).
    pub fn constant(value: f64) -> Self {
        Fit {
            degree: 0,
            use_b: false,
            use_n: false,
            b_mean: 0.0,
            b_scale: 1.0,
            n_mean: 0.0,
            n_scale: 1.0,
            coeffs: vec![value],
            rank_deficient: false,
        }
    }

    pub fn eval(&self, b: f64, n: f64) -> f64 {
        let bs = (b - self.b_mean) / self.b_scale;
        let ns = (n - self.n_mean) / self.n_scale;
        let mut acc = 0.0;
        let mut k = 0;
        for_each_feature(self.degree, self.use_b, self.use_n, bs, ns, |v| {
            acc += self.coeffs[k] * v;
            k += 1;
        });
        acc
    }

    pub fn degree(&self) -> usize {
        self.degree
    }
}

/// Weighted polynomial least squares of `y` on states `(b, n)`.
///
/// `weights` must be nonnegative with at least one strictly positive entry.
pub fn weighted_fit(
    spec: BasisSpec,
    states: &[(f64, f64)],
    y: &[f64],
    weights: &[f64],
) -> Result<Fit> {
    let n_samples = states.len();
    assert!(n_samples == y.len() && n_samples == weights.len());
    if n_samples == 0 {
        return Err(Error::RegressionSingular);
    }
    let w_sum: f64 = weights.iter().sum();
    if !(w_sum > 0.0) || !w_sum.is_finite() {
        return Err(Error::RegressionSingular);
    }

    // Weighted moments of the state variables.
    let mut b_mean = 0.0;
    let mut n_mean = 0.0;
    for (&(b, n), &w) in states.iter().zip(weights) {
        b_mean += w * b;
        n_mean += w * n;
    }
    b_mean /= w_sum;
    n_mean /= w_sum;
    let mut b_var = 0.0;
    let mut n_var = 0.0;
    for (&(b, n), &w) in states.iter().zip(weights) {
        b_var += w * (b - b_mean) * (b - b_mean);
        n_var += w * (n - n_mean) * (n - n_mean);
    }
    b_var /= w_sum;
    n_var /= w_sum;
    let use_b = b_var.sqrt() > 1e-10 * (1.0 + b_mean.abs());
    let use_n = spec.with_jump_count && n_var.sqrt() > 1e-10 * (1.0 + n_mean.abs());
    let b_scale = if use_b { b_var.sqrt() } else { 1.0 };
    let n_scale = if use_n { n_var.sqrt() } else { 1.0 };

    let mut degree = spec.degree;
    let mut rank_deficient = false;
    loop {
        let m = n_features(degree, use_b, use_n);
        // Normal equations, accumulated sequentially in path order so the
        // result does not depend on thread count.
        let mut gram = DMatrix::<f64>::zeros(m, m);
        let mut rhs = DVector::<f64>::zeros(m);
        let mut feat = vec![0.0; m];
        for (p, &(b, n)) in states.iter().enumerate() {
            let w = weights[p];
            if w == 0.0 {
                continue;
            }
            let bs = (b - b_mean) / b_scale;
            let ns = (n - n_mean) / n_scale;
            let mut k = 0;
            for_each_feature(degree, use_b, use_n, bs, ns, |v| {
                feat[k] = v;
                k += 1;
            });
            for i in 0..m {
                let wi = w * feat[i];
                rhs[i] += wi * y[p];
                for j in i..m {
                    gram[(i, j)] += wi * feat[j];
                }
            }
        }
        for i in 0..m {
            for j in 0..i {
                gram[(i, j)] = gram[(j, i)];
            }
        }

        let svd = gram.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let eps = 1e-10 * smax.max(1e-300);
        let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
        if rank == m {
            if let Ok(sol) = svd.solve(&rhs, eps) {
                return Ok(Fit {
                    degree,
                    use_b,
                    use_n,
                    b_mean,
                    b_scale,
                    n_mean,
                    n_scale,
                    coeffs: sol.iter().copied().collect(),
                    rank_deficient,
                });
            }
        }
        if degree == 0 {
            return Err(Error::RegressionSingular);
        }
        degree -= 1;
        rank_deficient = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn recovers_polynomial_exactly() {
        let states: Vec<(f64, f64)> = (0..200)
            .map(|i| (i as f64 * 0.01 - 1.0, (i % 3) as f64))
            .collect();
        let y: Vec<f64> = states
            .iter()
            .map(|&(b, n)| 1.5 - 2.0 * b + 0.75 * b * b + 0.5 * n)
            .collect();
        let w = vec![1.0; states.len()];
        let fit = weighted_fit(
            BasisSpec {
                degree: 2,
                with_jump_count: true,
            },
            &states,
            &y,
            &w,
        )
        .unwrap();
        for &(b, n) in states.iter().step_by(17) {
            assert_relative_eq!(
                fit.eval(b, n),
                1.5 - 2.0 * b + 0.75 * b * b + 0.5 * n,
                epsilon = 1e-9
            );
        }
        assert!(!fit.rank_deficient);
    }

    #[test]
    fn degenerate_state_falls_back_to_mean() {
        // All states identical (the t = 0 situation): fit is the weighted
        // mean.
        let states = vec![(0.0, 0.0); 50];
        let y: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let w = vec![1.0; 50];
        let fit = weighted_fit(BasisSpec::brownian(3), &states, &y, &w).unwrap();
        assert_relative_eq!(fit.eval(0.0, 0.0), 24.5, epsilon = 1e-10);
    }

    #[test]
    fn weights_change_the_projection() {
        let states: Vec<(f64, f64)> = vec![(0.0, 0.0), (1.0, 0.0)];
        let y = vec![0.0, 1.0];
        // Constant fit under weights concentrated on the second sample.
        let fit = weighted_fit(BasisSpec::brownian(0), &states, &y, &[1.0, 3.0]).unwrap();
        assert_relative_eq!(fit.eval(0.5, 0.0), 0.75, epsilon = 1e-12);
    }
}
