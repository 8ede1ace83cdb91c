//! CSV and JSON writers with fixed field ordering and formatting, so that
//! reruns of the same configuration produce byte-identical files.

use std::io::Write;

use crate::error::Result;
use crate::kernels::{ResolventTable, TwoTimeKernel};
use crate::solver::{McSolution, ZkSurfaces};
use crate::stochastics::{GirsanovWeight, PathBundle};

/// Fixed float formatting for CSV cells.
pub fn fmt(x: f64) -> String {
    format!("{x:.12e}")
}

/// Resolvent table as `(t, s, psi, phi, residual)` rows, with the
/// pointwise defect of the resolvent equation in the last column.
pub fn write_resolvent_csv(
    out: &mut impl Write,
    table: &ResolventTable,
    kernel: &TwoTimeKernel,
) -> Result<()> {
    writeln!(out, "t,s,psi,phi,residual")?;
    let grid = table.grid();
    let nodes = grid.nodes();
    let n = nodes.len();
    for i in 0..n {
        for j in i..n {
            let phi = kernel.eval(nodes[i], nodes[j]);
            let mut conv = 0.0;
            grid.for_each_range_weight(i, j, |k, w| {
                conv += w * table.at(i, k) * kernel.eval(nodes[k], nodes[j]);
            });
            let residual = table.at(i, j) - phi - conv;
            writeln!(
                out,
                "{},{},{},{},{}",
                fmt(nodes[i]),
                fmt(nodes[j]),
                fmt(table.at(i, j)),
                fmt(phi),
                fmt(residual)
            )?;
        }
    }
    Ok(())
}

/// Solution curve as `(t, y)` rows.
pub fn write_y_csv(out: &mut impl Write, nodes: &[f64], y: &[f64]) -> Result<()> {
    writeln!(out, "t,y")?;
    for (t, v) in nodes.iter().zip(y) {
        writeln!(out, "{},{}", fmt(*t), fmt(*v))?;
    }
    Ok(())
}

/// Z surface as `(t, s, z)` rows; `z` is the mean over paths of the
/// fitted conditional expectation.
pub fn write_z_csv(out: &mut impl Write, zk: &ZkSurfaces, mc: &McSolution) -> Result<()> {
    writeln!(out, "t,s,z")?;
    let n_paths = mc.y_paths[0].len();
    for (r, &i) in zk.rows.iter().enumerate() {
        for (off, fit) in zk.z_fits[r].iter().enumerate() {
            let k = i + off;
            let mut mean = 0.0;
            for p in 0..n_paths {
                let (b, nj) = mc.states.state(p, k);
                mean += fit.eval(b, nj);
            }
            mean /= n_paths as f64;
            writeln!(out, "{},{},{}", fmt(i as f64), fmt(k as f64), fmt(mean))?;
        }
    }
    Ok(())
}

/// K surface as `(t, s, zeta, k)` rows (mean over paths).
pub fn write_k_csv(
    out: &mut impl Write,
    zk: &ZkSurfaces,
    mc: &McSolution,
    marks: &[f64],
) -> Result<()> {
    writeln!(out, "t,s,zeta,k")?;
    let n_paths = mc.y_paths[0].len();
    for (r, &i) in zk.rows.iter().enumerate() {
        for (off, fits) in zk.k_fits[r].iter().enumerate() {
            let k = i + off;
            for (mi, fit) in fits.iter().enumerate() {
                let mut mean = 0.0;
                for p in 0..n_paths {
                    let (b, nj) = mc.states.state(p, k);
                    mean += fit.eval(b, nj);
                }
                mean /= n_paths as f64;
                writeln!(
                    out,
                    "{},{},{},{}",
                    fmt(i as f64),
                    fmt(k as f64),
                    fmt(marks[mi]),
                    fmt(mean)
                )?;
            }
        }
    }
    Ok(())
}

/// Debug dump of simulated paths: `(path_id, t, b, m, jumps_so_far)`.
pub fn write_paths_csv(
    out: &mut impl Write,
    paths: &PathBundle,
    weights: &GirsanovWeight,
    max_paths: usize,
) -> Result<()> {
    writeln!(out, "path_id,t,b,m,jumps_so_far")?;
    let nodes = paths.grid().nodes();
    for p in 0..paths.n_paths().min(max_paths) {
        let b = paths.brownian(p);
        let view = paths.view(p);
        for (i, &t) in nodes.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{}",
                p,
                fmt(t),
                fmt(b[i]),
                fmt(weights.m(p, i)),
                view.n_jumps_by(t)
            )?;
        }
    }
    Ok(())
}
