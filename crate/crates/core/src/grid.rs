//! Grid specifications and the uniform lattices the cell and strip problems
//! are discretized on.
//!
//! Nodes sit at `x_k = origin_k + i_k h_k`. Torus nodes are `i/N`; strip
//! nodes are `-K_s + i h` with the end planes `x_1 = ±K_s` (and anything
//! beyond) held as ghost layers, so every strip node is congruent mod 1 to a
//! torus node. Flat indices are row-major with axis 0 (the direction normal to
//! the interface) slowest.

use serde::{Deserialize, Serialize};

use crate::error::{HomogError, Result};

/// Largest dimension supported by the fixed-size scratch buffers of the
/// simulators.
pub const MAX_DIM: usize = 8;

/// Finite-difference order of the discrete generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stencil {
    /// Three-point centred differences.
    Second,
    /// Five-point centred differences.
    #[default]
    Fourth,
}

const FIRST_2: [f64; 3] = [-0.5, 0.0, 0.5];
const SECOND_2: [f64; 3] = [1.0, -2.0, 1.0];
const FIRST_4: [f64; 5] = [1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0];
const SECOND_4: [f64; 5] = [-1.0 / 12.0, 4.0 / 3.0, -5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0];

impl Stencil {
    pub fn half_width(self) -> usize {
        match self {
            Stencil::Second => 1,
            Stencil::Fourth => 2,
        }
    }

    /// First-derivative weights for offsets `-s..=s` (divide by `h`).
    pub fn first(self) -> &'static [f64] {
        match self {
            Stencil::Second => &FIRST_2,
            Stencil::Fourth => &FIRST_4,
        }
    }

    /// Second-derivative weights for offsets `-s..=s` (divide by `h^2`).
    pub fn second(self) -> &'static [f64] {
        match self {
            Stencil::Second => &SECOND_2,
            Stencil::Fourth => &SECOND_4,
        }
    }

    pub fn order(self) -> usize {
        2 * self.half_width()
    }
}

/// Discretization parameters shared by the torus and strip solvers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Nodes per unit period along each axis.
    pub resolution: Vec<usize>,
    /// Half-width `K_s` of the truncated strip, in whole periods.
    pub strip_half_width: usize,
    #[serde(default)]
    pub stencil: Stencil,
}

impl GridSpec {
    pub fn new(resolution: Vec<usize>, strip_half_width: usize) -> Self {
        Self {
            resolution,
            strip_half_width,
            stencil: Stencil::default(),
        }
    }

    /// Same resolution along every axis.
    pub fn uniform(dimension: usize, resolution: usize, strip_half_width: usize) -> Self {
        Self::new(vec![resolution; dimension], strip_half_width)
    }

    /// Default strip half-width for an interface of half-width `eta`:
    /// eight whole periods beyond the interface.
    pub fn default_strip_half_width(eta: f64) -> usize {
        eta.ceil() as usize + 8
    }

    pub fn with_stencil(mut self, stencil: Stencil) -> Self {
        self.stencil = stencil;
        self
    }

    pub fn dimension(&self) -> usize {
        self.resolution.len()
    }

    /// Checks the grid against the interface half-width `eta`.
    pub fn validate(&self, eta: f64) -> Result<()> {
        let d = self.dimension();
        if !(2..=MAX_DIM).contains(&d) {
            return Err(HomogError::InvalidGrid(format!("dimension {d} outside 2..={MAX_DIM}")));
        }
        if let Some(r) = self.resolution.iter().find(|&&r| r < 8) {
            return Err(HomogError::InvalidGrid(format!(
                "resolution {r} below the minimum of 8 nodes per period"
            )));
        }
        if (self.strip_half_width as f64) < eta + 2.0 {
            return Err(HomogError::InvalidGrid(format!(
                "strip half-width {} must be at least eta + 2 = {}",
                self.strip_half_width,
                eta + 2.0
            )));
        }
        Ok(())
    }
}

/// A uniform node lattice, periodic along the flagged axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    shape: Vec<usize>,
    spacing: Vec<f64>,
    origin: Vec<f64>,
    periodic: Vec<bool>,
    strides: Vec<usize>,
}

impl Lattice {
    pub fn new(shape: Vec<usize>, spacing: Vec<f64>, origin: Vec<f64>, periodic: Vec<bool>) -> Self {
        let d = shape.len();
        assert!(spacing.len() == d && origin.len() == d && periodic.len() == d);
        let mut strides = vec![1; d];
        for k in (0..d.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * shape[k + 1];
        }
        Self {
            shape,
            spacing,
            origin,
            periodic,
            strides,
        }
    }

    /// The unit torus `[0,1)^d` at the grid resolution.
    pub fn torus(grid: &GridSpec) -> Self {
        let d = grid.dimension();
        Self::new(
            grid.resolution.clone(),
            grid.resolution.iter().map(|&n| 1.0 / n as f64).collect(),
            vec![0.0; d],
            vec![true; d],
        )
    }

    /// The open strip `(-K_s, K_s) x T^{d-1}` extended by `ghost` node layers
    /// on both ends of axis 0; with `ghost >= 1` the outermost interior nodes
    /// are adjacent to the planes `x_1 = ±K_s`.
    pub fn strip(grid: &GridSpec, ghost: usize) -> Self {
        let d = grid.dimension();
        let n1 = grid.resolution[0];
        let h1 = 1.0 / n1 as f64;
        let mut shape = grid.resolution.clone();
        shape[0] = 2 * grid.strip_half_width * n1 - 1 + 2 * ghost;
        let mut origin = vec![0.0; d];
        origin[0] = -(grid.strip_half_width as f64) + h1 - ghost as f64 * h1;
        let mut periodic = vec![true; d];
        periodic[0] = false;
        Self::new(
            shape,
            grid.resolution.iter().map(|&n| 1.0 / n as f64).collect(),
            origin,
            periodic,
        )
    }

    pub fn dimension(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Quadrature weight of a single node.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Index of `flat` along `axis`.
    #[inline]
    pub fn coord(&self, flat: usize, axis: usize) -> usize {
        (flat / self.strides[axis]) % self.shape[axis]
    }

    pub fn multi_index(&self, flat: usize, out: &mut [usize]) {
        for (k, o) in out.iter_mut().enumerate().take(self.dimension()) {
            *o = self.coord(flat, k);
        }
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(&i, &s)| i * s).sum()
    }

    /// Physical coordinate of node index `i` along `axis`.
    #[inline]
    pub fn node_coordinate(&self, axis: usize, i: usize) -> f64 {
        self.origin[axis] + i as f64 * self.spacing[axis]
    }

    pub fn position(&self, flat: usize, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate().take(self.dimension()) {
            *o = self.node_coordinate(k, self.coord(flat, k));
        }
    }

    /// Neighbour of `flat` shifted by `offset` nodes along `axis`; `None`
    /// when that leaves a non-periodic axis.
    #[inline]
    pub fn neighbor(&self, flat: usize, axis: usize, offset: isize) -> Option<usize> {
        let n = self.shape[axis] as isize;
        let i = self.coord(flat, axis) as isize;
        let mut j = i + offset;
        if self.periodic[axis] {
            j = j.rem_euclid(n);
        } else if j < 0 || j >= n {
            return None;
        }
        Some((flat as isize + (j - i) * self.strides[axis] as isize) as usize)
    }
}
