//! Centred finite-difference discretization of the generator
//! `L = ½Δ + b·∇` on a [`Lattice`].
//!
//! Row `j` of the discrete operator is
//! `L_{j, j+o e_k} = ½ c2[o] / h_k² + b_k(j) c1[o] / h_k`, with `c1`, `c2` the
//! stencil weights. The density of a stationary measure solves `Lᵀ μ = 0`.

use crate::field::PeriodicDrift;
use crate::grid::{Lattice, Stencil, MAX_DIM};
use crate::sparse::{SparseBuilder, SparseMatrix};

/// Diagonal entry, identical for every node.
pub fn diagonal(spacing: &[f64], stencil: Stencil) -> f64 {
    let s = stencil.half_width();
    spacing.iter().map(|h| 0.5 * stencil.second()[s] / (h * h)).sum()
}

/// Calls `visit(axis, offset, weight)` for the off-diagonal entries of the
/// row belonging to a node with drift `b`.
#[inline]
pub fn for_each_offdiag(spacing: &[f64], stencil: Stencil, b: &[f64], mut visit: impl FnMut(usize, isize, f64)) {
    let s = stencil.half_width() as isize;
    let c1 = stencil.first();
    let c2 = stencil.second();
    for (k, h) in spacing.iter().enumerate() {
        for o in -s..=s {
            if o == 0 {
                continue;
            }
            let i = (o + s) as usize;
            visit(k, o, 0.5 * c2[i] / (h * h) + b[k] * c1[i] / h);
        }
    }
}

/// Drift of a periodic field at every node of a torus lattice, `d` values per
/// node.
pub fn sample_periodic(b: &PeriodicDrift, lattice: &Lattice) -> Vec<f64> {
    let d = lattice.dimension();
    let mut x = [0.0; MAX_DIM];
    let mut out = vec![0.0; lattice.len() * d];
    for node in 0..lattice.len() {
        lattice.position(node, &mut x[..d]);
        b.eval(&x[..d], &mut out[node * d..(node + 1) * d]);
    }
    out
}

/// Sparse matrix of `L` (or `Lᵀ` when `adjoint`) on a fully periodic lattice.
pub fn assemble_torus(lattice: &Lattice, stencil: Stencil, drift: &[f64], adjoint: bool) -> SparseMatrix {
    let d = lattice.dimension();
    let n = lattice.len();
    let per_row = 1 + 2 * stencil.half_width() * d;
    let mut a = SparseBuilder::with_capacity(n, n * per_row);
    let diag = diagonal(lattice.spacing(), stencil);
    for j in 0..n {
        a.push(j, j, diag);
        for_each_offdiag(lattice.spacing(), stencil, &drift[j * d..(j + 1) * d], |k, o, w| {
            let t = lattice.neighbor(j, k, o).expect("torus lattice wraps");
            if adjoint {
                a.push(t, j, w);
            } else {
                a.push(j, t, w);
            }
        });
    }
    a.finish()
}

/// `(L f)(j)` on a periodic lattice.
pub fn apply_torus(lattice: &Lattice, stencil: Stencil, drift: &[f64], f: &[f64]) -> Vec<f64> {
    let d = lattice.dimension();
    let diag = diagonal(lattice.spacing(), stencil);
    (0..lattice.len())
        .map(|j| {
            let mut acc = diag * f[j];
            for_each_offdiag(lattice.spacing(), stencil, &drift[j * d..(j + 1) * d], |k, o, w| {
                acc += w * f[lattice.neighbor(j, k, o).expect("torus lattice wraps")];
            });
            acc
        })
        .collect()
}

/// Centred first difference of `f` along `axis` at every node of a periodic
/// lattice.
pub fn gradient_torus(lattice: &Lattice, stencil: Stencil, f: &[f64], axis: usize) -> Vec<f64> {
    let s = stencil.half_width() as isize;
    let c1 = stencil.first();
    let h = lattice.spacing()[axis];
    (0..lattice.len())
        .map(|j| {
            let mut acc = 0.0;
            for o in -s..=s {
                if o != 0 {
                    acc += c1[(o + s) as usize] * f[lattice.neighbor(j, axis, o).expect("wraps")];
                }
            }
            acc / h
        })
        .collect()
}
