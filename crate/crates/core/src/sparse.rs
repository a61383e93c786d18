//! Thin wrapper over the sparse LU factorization used by the cell and strip
//! solvers.

use faer::prelude::*;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::{SparseColMat, Triplet};

use crate::error::{HomogError, Result};

/// Square sparse matrix assembled from `(row, col, value)` entries; repeated
/// positions are summed.
#[derive(Clone, Debug, Default)]
pub struct SparseBuilder {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseBuilder {
    pub fn new(n: usize) -> Self {
        Self { n, entries: Vec::new() }
    }

    pub fn with_capacity(n: usize, nnz: usize) -> Self {
        Self {
            n,
            entries: Vec::with_capacity(nnz),
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.n && col < self.n);
        self.entries.push((row, col, value));
    }

    /// Sorted, duplicate-free entries.
    pub fn finish(mut self) -> SparseMatrix {
        self.entries.sort_unstable_by_key(|e| (e.1, e.0));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(self.entries.len());
        for (r, c, v) in self.entries {
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        SparseMatrix {
            n: self.n,
            entries: merged,
        }
    }
}

/// Assembled square sparse matrix in coordinate form.
#[derive(Clone, Debug)]
pub struct SparseMatrix {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn for_each(&self, mut f: impl FnMut(usize, usize, f64)) {
        for &(r, c, v) in &self.entries {
            f(r, c, v);
        }
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for &(r, c, v) in &self.entries {
            y[r] += v * x[c];
        }
        y
    }

    /// `max_i |(A x - b)_i|`.
    pub fn residual_inf(&self, x: &[f64], rhs: &[f64]) -> f64 {
        self.mul_vec(x)
            .iter()
            .zip(rhs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.entries.iter().map(|e| e.2.abs()).fold(0.0, f64::max)
    }

    pub fn factorize(&self) -> Result<SparseLu> {
        let triplets: Vec<Triplet<usize, usize, f64>> =
            self.entries.iter().map(|&(r, c, v)| Triplet::new(r, c, v)).collect();
        let a = SparseColMat::<usize, f64>::try_new_from_triplets(self.n, self.n, &triplets)
            .map_err(|e| HomogError::Solver(format!("matrix assembly failed: {e:?}")))?;
        let lu = a
            .sp_lu()
            .map_err(|e| HomogError::Solver(format!("sparse LU failed: {e:?}")))?;
        Ok(SparseLu { n: self.n, lu })
    }
}

/// LU factors of a [`SparseMatrix`].
pub struct SparseLu {
    n: usize,
    lu: Lu<usize, f64>,
}

impl SparseLu {
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        if rhs.len() != self.n {
            return Err(HomogError::Solver(format!(
                "right-hand side has length {}, expected {}",
                rhs.len(),
                self.n
            )));
        }
        let b = Col::<f64>::from_fn(self.n, |i| rhs[i]);
        let x = self.lu.solve(&b);
        let out: Vec<f64> = (0..self.n).map(|i| x[i]).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(HomogError::Solver("non-finite solution (singular system?)".into()));
        }
        Ok(out)
    }

    /// Solve followed by `steps` rounds of iterative refinement against `a`.
    pub fn solve_refined(&self, a: &SparseMatrix, rhs: &[f64], steps: usize) -> Result<Vec<f64>> {
        let mut x = self.solve(rhs)?;
        for _ in 0..steps {
            let ax = a.mul_vec(&x);
            let r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, v)| b - v).collect();
            let dx = self.solve(&r)?;
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
        }
        Ok(x)
    }
}
