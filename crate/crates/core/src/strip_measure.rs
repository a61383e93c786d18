//! Invariant measure of the interface process on the truncated strip
//! `(-K_s, K_s) x T^{d-1}`, its unit-cell masses and the limiting masses
//! `q±`.
//!
//! The end planes `x_1 = ±K_s` and the stencil layers beyond them carry
//! `μ = c± μ±`. The unknowns are `μ` at the interior nodes and `c±`; the
//! equations are `Lᵀ μ = 0` at interior nodes, zero net flux through a
//! cross-section and `c⁺ + c⁻ = 1`. Afterwards `μ` is rescaled so that the
//! extrapolated cell masses satisfy `q⁺ + q⁻ = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{HomogError, Result};
use crate::field::InterfaceDrift;
use crate::grid::{GridSpec, Lattice, Stencil, MAX_DIM};
use crate::operator::{diagonal, for_each_offdiag};
use crate::sparse::SparseBuilder;
use crate::torus_cell::{TorusDensity, SOLVER_TOLERANCE};

/// Which side of the interface.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Plus,
    Minus,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Plus => "plus",
            Side::Minus => "minus",
        }
    }
}

/// Mass of one unit cell: `C_j⁺ = [j, j+1] x T^{d-1}`,
/// `C_j⁻ = [-j-1, -j] x T^{d-1}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMass {
    pub side: Side,
    pub j: usize,
    pub mass: f64,
}

/// Extrapolated cell masses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMassFit {
    pub q_plus: f64,
    pub q_minus: f64,
    /// Fitted decay rate per cell, per side (0 when the masses are constant).
    pub rho_plus: f64,
    pub rho_minus: f64,
    /// Largest fit residual relative to the mass scale.
    pub residual: f64,
    /// Sum of the unnormalized limits; dividing by it gives `q⁺ + q⁻ = 1`.
    pub scale: f64,
}

/// Largest accepted relative fit residual.
pub const FIT_TOLERANCE: f64 = 1e-3;

/// Discrete invariant measure on the strip.
#[derive(Clone, Debug)]
pub struct StripMeasure {
    /// Strip lattice including `ghost` layers on each end.
    pub lattice: Lattice,
    pub stencil: Stencil,
    pub ghost: usize,
    pub strip_half_width: usize,
    pub half_width: f64,
    /// Drift at every node, ghosts included, `d` values per node.
    pub drift: Vec<f64>,
    /// Density at every node, ghosts included.
    pub values: Vec<f64>,
    pub weight: f64,
    /// Boundary multipliers after normalization.
    pub c_plus: f64,
    pub c_minus: f64,
    /// Relative interior residual `‖Lᵀμ‖_∞`.
    pub residual: f64,
    /// Net flux through the central cross-section after the solve.
    pub flux: f64,
    pub fit: CellMassFit,
}

impl StripMeasure {
    pub fn dimension(&self) -> usize {
        self.lattice.dimension()
    }

    /// Range of axis-0 indices holding unknowns (nodes strictly inside the strip).
    pub fn interior(&self) -> std::ops::Range<usize> {
        self.ghost..self.lattice.shape()[0] - self.ghost
    }

    /// Smallest density value at an interior node.
    pub fn min_interior(&self) -> f64 {
        let stride = self.lattice.strides()[0];
        let r = self.interior();
        self.values[r.start * stride..r.end * stride]
            .iter()
            .fold(f64::INFINITY, |m, &v| m.min(v))
    }
}

/// Index of the torus node congruent to strip node `flat`.
fn torus_node(strip: &Lattice, torus: &Lattice, ghost: usize, flat: usize) -> usize {
    let d = strip.dimension();
    let mut idx = [0usize; MAX_DIM];
    strip.multi_index(flat, &mut idx[..d]);
    let n = torus.shape()[0] as isize;
    idx[0] = (idx[0] as isize + 1 - ghost as isize).rem_euclid(n) as usize;
    torus.flat_index(&idx[..d])
}

/// Solves for the strip measure and normalizes it with the fitted `q±`.
pub fn strip_invariant_measure(
    field: &InterfaceDrift,
    mu_plus: &TorusDensity,
    mu_minus: &TorusDensity,
    grid: &GridSpec,
) -> Result<StripMeasure> {
    let eta = field.half_width();
    grid.validate(eta)?;
    let d = field.dimension();
    if grid.dimension() != d {
        return Err(HomogError::InvalidGrid(format!(
            "grid dimension {} differs from field dimension {d}",
            grid.dimension()
        )));
    }
    let torus = Lattice::torus(grid);
    if mu_plus.lattice != torus || mu_minus.lattice != torus {
        return Err(HomogError::InvalidGrid(
            "tail densities were computed on a different grid".into(),
        ));
    }
    let stencil = grid.stencil;
    let s = stencil.half_width();
    let lattice = Lattice::strip(grid, s);
    let n0 = lattice.shape()[0];
    let stride = lattice.strides()[0];
    let n_all = lattice.len();
    let interior = s..n0 - s;
    let n_int = (n0 - 2 * s) * stride;
    let c_plus_col = n_int;
    let c_minus_col = n_int + 1;

    let mut drift = vec![0.0; n_all * d];
    let mut x = [0.0; MAX_DIM];
    for node in 0..n_all {
        lattice.position(node, &mut x[..d]);
        field.eval(&x[..d], &mut drift[node * d..(node + 1) * d]);
    }
    if drift.iter().any(|v| !v.is_finite()) {
        return Err(HomogError::InvalidField("non-finite drift sample on the strip".into()));
    }

    // ghost node -> (column, coefficient multiplying the unknown in that column)
    let tail_value = |flat: usize| -> (usize, f64) {
        let i0 = lattice.coord(flat, 0);
        let t = torus_node(&lattice, &torus, s, flat);
        if i0 < s {
            (c_minus_col, mu_minus.values[t])
        } else {
            (c_plus_col, mu_plus.values[t])
        }
    };
    let column = |flat: usize| -> (usize, f64) {
        let i0 = lattice.coord(flat, 0);
        if interior.contains(&i0) {
            (flat - s * stride, 1.0)
        } else {
            tail_value(flat)
        }
    };

    let diag = diagonal(lattice.spacing(), stencil);
    let per_row = 1 + 2 * s * d;
    let mut sys = SparseBuilder::with_capacity(n_int + 2, n_int * per_row + 8 * s * stride);
    // row j of Lᵀ: Σ_i L_{i j} μ_i over the nodes i whose stencil reaches j
    for row in 0..n_int {
        let j = row + s * stride;
        sys.push(row, row, diag);
        for k in 0..d {
            for o in 1..=s as isize {
                for sign in [-1isize, 1] {
                    let off = sign * o;
                    let Some(i) = lattice.neighbor(j, k, -off) else {
                        unreachable!("ghost layers cover the stencil");
                    };
                    let mut w = 0.0;
                    for_each_offdiag(lattice.spacing(), stencil, &drift[i * d..(i + 1) * d], |kk, oo, ww| {
                        if kk == k && oo == off {
                            w = ww;
                        }
                    });
                    let (col, coef) = column(i);
                    sys.push(row, col, w * coef);
                }
            }
        }
    }

    // zero net flux through the cut between axis-0 indices cut-1 and cut
    let cut = n0 / 2;
    let flux_row = n_int;
    let flux_weights = flux_coefficients(&lattice, stencil, &drift, cut);
    for &(node, w) in &flux_weights {
        let (col, coef) = column(node);
        sys.push(flux_row, col, w * coef);
    }
    sys.push(n_int + 1, c_plus_col, 1.0);
    sys.push(n_int + 1, c_minus_col, 1.0);
    let sys = sys.finish();
    let mut rhs = vec![0.0; n_int + 2];
    rhs[n_int + 1] = 1.0;
    let sol = sys.factorize()?.solve_refined(&sys, &rhs, 1)?;

    let (c_plus, c_minus) = (sol[c_plus_col], sol[c_minus_col]);
    let mut values = vec![0.0; n_all];
    for (node, v) in values.iter_mut().enumerate() {
        let (col, coef) = column(node);
        *v = sol[col] * coef;
    }

    // interior residual of the assembled equations, relative to the operator scale
    let r = sys.residual_inf(&sol, &rhs);
    let vmax = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let residual = r / (sys.max_abs() * vmax);
    if residual > SOLVER_TOLERANCE {
        return Err(HomogError::Residual {
            context: "strip measure".into(),
            residual,
            tolerance: SOLVER_TOLERANCE,
        });
    }

    let mut measure = StripMeasure {
        lattice,
        stencil,
        ghost: s,
        strip_half_width: grid.strip_half_width,
        half_width: eta,
        drift,
        values,
        weight: 0.0,
        c_plus,
        c_minus,
        residual,
        flux: 0.0,
        fit: CellMassFit {
            q_plus: 0.0,
            q_minus: 0.0,
            rho_plus: 0.0,
            rho_minus: 0.0,
            residual: 0.0,
            scale: 1.0,
        },
    };
    measure.weight = measure.lattice.cell_volume();
    let masses = cell_masses(&measure);
    let fit = limit_masses(&masses, eta).map_err(|e| match e {
        HomogError::FitFailed(msg) => HomogError::StripTooNarrow(msg),
        other => other,
    })?;
    for v in measure.values.iter_mut() {
        *v /= fit.scale;
    }
    measure.c_plus /= fit.scale;
    measure.c_minus /= fit.scale;
    measure.flux = flux_coefficients(&measure.lattice, stencil, &measure.drift, cut)
        .iter()
        .map(|&(node, w)| w * measure.values[node])
        .sum();
    measure.fit = fit;
    if measure.min_interior() <= 0.0 {
        return Err(HomogError::Discretization(format!(
            "strip measure is not positive (min {:.3e}); refine the grid",
            measure.min_interior()
        )));
    }
    Ok(measure)
}

/// Coefficients `(node, w)` with `flux = Σ w μ_node` through the cut before
/// axis-0 index `cut`:
/// `Σ_{i<cut} μ_i Σ_{j>=cut} L_{ij} - Σ_{i>=cut} μ_i Σ_{j<cut} L_{ij}`.
pub fn flux_coefficients(lattice: &Lattice, stencil: Stencil, drift: &[f64], cut: usize) -> Vec<(usize, f64)> {
    let d = lattice.dimension();
    let s = stencil.half_width();
    let stride = lattice.strides()[0];
    let mut out = Vec::new();
    for i0 in cut - s..cut + s {
        for rest in 0..stride {
            let node = i0 * stride + rest;
            let mut w = 0.0;
            for_each_offdiag(
                lattice.spacing(),
                stencil,
                &drift[node * d..(node + 1) * d],
                |k, o, ww| {
                    if k != 0 {
                        return;
                    }
                    let target = i0 as isize + o;
                    if i0 < cut && target >= cut as isize {
                        w += ww;
                    } else if i0 >= cut && target < cut as isize {
                        w -= ww;
                    }
                },
            );
            if w != 0.0 {
                out.push((node, w));
            }
        }
    }
    out
}

/// Trapezoid-rule mass of every whole unit cell in the strip, `plus` cells
/// first, each side ordered by distance from the interface.
pub fn cell_masses(mu: &StripMeasure) -> Vec<CellMass> {
    let lat = &mu.lattice;
    let n = (lat.shape()[0] - 2 * mu.ghost + 1) / (2 * mu.strip_half_width);
    let stride = lat.strides()[0];
    let plane_mass = |i0: usize| -> f64 { mu.values[i0 * stride..(i0 + 1) * stride].iter().sum::<f64>() };
    let ks = mu.strip_half_width as i64;
    let node_of = |k: i64| (mu.ghost as i64 - 1 + (k + ks) * n as i64) as usize;
    let cell = |lo: i64| -> f64 {
        let a = node_of(lo);
        let b = a + n;
        let mut m = 0.5 * (plane_mass(a) + plane_mass(b));
        for i0 in a + 1..b {
            m += plane_mass(i0);
        }
        m * mu.weight
    };
    let mut out = Vec::with_capacity(2 * mu.strip_half_width);
    for j in 0..mu.strip_half_width {
        out.push(CellMass {
            side: Side::Plus,
            j,
            mass: cell(j as i64),
        });
    }
    for j in 0..mu.strip_half_width {
        out.push(CellMass {
            side: Side::Minus,
            j,
            mass: cell(-(j as i64) - 1),
        });
    }
    out
}

/// Least-squares fit of `y_t ≈ q + A ρ^t` over the given masses. Returns
/// `(q, ρ, relative residual)`.
fn fit_side(y: &[f64]) -> (f64, f64, f64) {
    let m = y.len() as f64;
    let mean = y.iter().sum::<f64>() / m;
    let spread = y.iter().fold(0.0f64, |a, v| a.max((v - mean).abs()));
    // below this the data carry no decay to fit; the mean is the limit
    if spread <= 1e-10 * mean.abs() {
        return (mean, 0.0, spread / mean.abs());
    }
    // for fixed ρ the model is linear in (q, A)
    let solve = |rho: f64| -> (f64, f64) {
        let (mut s1, mut sx, mut sxx, mut sy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut p = 1.0;
        for &v in y {
            s1 += 1.0;
            sx += p;
            sxx += p * p;
            sy += v;
            sxy += p * v;
            p *= rho;
        }
        let det = s1 * sxx - sx * sx;
        let q = (sxx * sy - sx * sxy) / det;
        let a = (s1 * sxy - sx * sy) / det;
        let mut r = 0.0;
        let mut p = 1.0;
        for &v in y {
            r += (v - q - a * p).powi(2);
            p *= rho;
        }
        (q, r)
    };
    let mut best = (f64::INFINITY, 0.5);
    let grid = 400;
    for k in 1..grid - 4 {
        let rho = k as f64 / grid as f64;
        let (_, r) = solve(rho);
        if r < best.0 {
            best = (r, rho);
        }
    }
    let (mut lo, mut hi) = (
        (best.1 - 1.0 / grid as f64).max(1e-9),
        (best.1 + 1.0 / grid as f64).min(1.0 - 1e-9),
    );
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let a = hi - phi * (hi - lo);
        let b = lo + phi * (hi - lo);
        if solve(a).1 < solve(b).1 {
            hi = b;
        } else {
            lo = a;
        }
    }
    let rho = 0.5 * (lo + hi);
    let (q, r) = solve(rho);
    (q, rho, (r / m).sqrt() / mean.abs())
}

/// Extrapolates the cell masses beyond `x_1 = eta + 1` on each side and
/// normalizes so `q⁺ + q⁻ = 1`.
pub fn limit_masses(masses: &[CellMass], eta: f64) -> Result<CellMassFit> {
    let first = (eta + 1.0).ceil() as usize;
    let side = |sd: Side| -> Vec<f64> {
        let mut v: Vec<&CellMass> = masses.iter().filter(|m| m.side == sd && m.j >= first).collect();
        v.sort_by_key(|m| m.j);
        v.into_iter().map(|m| m.mass).collect()
    };
    let (yp, ym) = (side(Side::Plus), side(Side::Minus));
    if yp.len() < 4 || ym.len() < 4 {
        return Err(HomogError::FitFailed(format!(
            "need at least 4 cells per side beyond x1 = {}, have {} and {}",
            eta + 1.0,
            yp.len(),
            ym.len()
        )));
    }
    if yp.iter().chain(&ym).any(|&m| !(m > 0.0 && m.is_finite())) {
        return Err(HomogError::FitFailed("cell masses must be positive and finite".into()));
    }
    let (qp, rp, ep) = fit_side(&yp);
    let (qm, rm, em) = fit_side(&ym);
    let residual = ep.max(em);
    if residual > FIT_TOLERANCE || !(qp > 0.0 && qm > 0.0) {
        return Err(HomogError::FitFailed(format!(
            "cell masses do not settle (relative residual {residual:.3e}, limits {qp:.3e}, {qm:.3e})"
        )));
    }
    let scale = qp + qm;
    let q_plus = qp / scale;
    Ok(CellMassFit {
        q_plus,
        q_minus: 1.0 - q_plus,
        rho_plus: rp,
        rho_minus: rm,
        residual,
        scale,
    })
}

/// CSV with header `side,j,mass`.
pub fn write_cell_masses_csv<W: std::io::Write>(masses: &[CellMass], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["side", "j", "mass"])?;
    for m in masses {
        wtr.write_record([m.side.as_str().to_string(), m.j.to_string(), format!("{:.17e}", m.mass)])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::builtin_field;
    use crate::torus_cell::stationary_density;
    use std::collections::BTreeMap;

    fn solve(name: &str, res: usize, ks: usize) -> StripMeasure {
        let f = builtin_field(name, &BTreeMap::new()).unwrap();
        let g = GridSpec::new(vec![res, 8], ks);
        let mp = stationary_density(f.plus(), &g).unwrap();
        let mm = stationary_density(f.minus(), &g).unwrap();
        strip_invariant_measure(&f, &mp, &mm, &g).unwrap()
    }

    #[test]
    fn zero_field_measure_is_constant() {
        let m = solve("zero", 16, 6);
        assert!(m.values.iter().all(|v| (v - 0.5).abs() < 1e-12));
        let masses = cell_masses(&m);
        assert!(masses.iter().all(|c| (c.mass - 0.5).abs() < 1e-12));
        assert!((m.fit.q_plus - 0.5).abs() < 1e-12);
        assert_eq!(m.fit.q_plus + m.fit.q_minus, 1.0);
    }

    #[test]
    fn shear_measure_is_half_lebesgue() {
        let m = solve("paper_shear", 32, 6);
        assert!(m.values.iter().all(|v| (v - 0.5).abs() < 1e-12));
        assert!((m.fit.q_plus - 0.5).abs() < 1e-10);
    }

    #[test]
    fn two_sided_matches_one_dimensional_oracle() {
        // continuum: zero flux in 1D gives μ ∝ exp(2 ∫_0^x b_1)
        let m = solve("two_sided", 64, 6);
        let f = builtin_field("two_sided", &BTreeMap::new()).unwrap();
        let b1 = |x: f64| {
            let mut o = [0.0; 2];
            f.eval(&[x, 0.0], &mut o);
            o[0]
        };
        let potential = |x: f64| {
            // composite Simpson on a fine grid
            let k = 20000;
            let h = x / k as f64;
            let mut acc = b1(0.0) + b1(x);
            for i in 1..k {
                acc += b1(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            acc * h / 3.0
        };
        let unnorm = |x: f64| (2.0 * potential(x)).exp();
        let cell = |lo: f64| {
            let k = 2000;
            let h = 1.0 / k as f64;
            let mut acc = unnorm(lo) + unnorm(lo + 1.0);
            for i in 1..k {
                acc += unnorm(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            acc * h / 3.0
        };
        let (qp, qm) = (cell(3.0), cell(-4.0));
        let q_plus = qp / (qp + qm);
        assert!((m.fit.q_plus - q_plus).abs() < 1e-5, "{} vs {q_plus}", m.fit.q_plus);

        // beyond the interface the strip density is a multiple of the tail density
        let g = GridSpec::new(vec![64, 8], 6);
        let mp = stationary_density(f.plus(), &g).unwrap();
        let mm = stationary_density(f.minus(), &g).unwrap();
        let torus = Lattice::torus(&g);
        let mut x = [0.0; 2];
        for node in 0..m.lattice.len() {
            m.lattice.position(node, &mut x);
            if x[0].abs() < 2.5 {
                continue;
            }
            let t = torus_node(&m.lattice, &torus, m.ghost, node);
            let (c, tail) = if x[0] > 0.0 { (m.c_plus, &mp) } else { (m.c_minus, &mm) };
            let ratio = m.values[node] / (c * tail.values[t]);
            assert!((ratio - 1.0).abs() < 1e-6, "x={x:?} ratio={ratio}");
        }
    }

    #[test]
    fn two_sided_masses_converge_monotonically() {
        let m = solve("two_sided", 32, 6);
        let masses = cell_masses(&m);
        for side in [Side::Plus, Side::Minus] {
            let v: Vec<f64> = masses.iter().filter(|c| c.side == side).map(|c| c.mass).collect();
            let last = *v.last().unwrap();
            let dev: Vec<f64> = v.iter().map(|x| (x - last).abs()).collect();
            for w in dev.windows(2).skip(1) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
        assert!(m.fit.q_plus > 0.0 && m.fit.q_plus < 1.0);
        assert_eq!(m.fit.q_plus + m.fit.q_minus, 1.0);
        assert!(m.min_interior() > 0.0);
        assert!(m.flux.abs() < 1e-10);
    }

    #[test]
    fn truncation_stability() {
        let a = solve("two_sided", 32, 6);
        let b = solve("two_sided", 32, 8);
        assert!((a.fit.q_plus - b.fit.q_plus).abs() <= 1e-6);
    }

    #[test]
    fn fit_is_scale_invariant() {
        let m = solve("two_sided", 32, 6);
        let masses = cell_masses(&m);
        let base = limit_masses(&masses, 1.0).unwrap();
        for c in [0.25, 8.0, 1024.0] {
            let scaled: Vec<CellMass> = masses.iter().map(|x| CellMass { mass: x.mass * c, ..*x }).collect();
            let f = limit_masses(&scaled, 1.0).unwrap();
            assert_eq!(f.q_plus.to_bits(), base.q_plus.to_bits());
        }
        for c in [0.3, 7.1, 1e5] {
            let scaled: Vec<CellMass> = masses.iter().map(|x| CellMass { mass: x.mass * c, ..*x }).collect();
            let f = limit_masses(&scaled, 1.0).unwrap();
            assert!((f.q_plus - base.q_plus).abs() <= 1e-15);
        }
    }

    #[test]
    fn exponential_tail_is_extrapolated() {
        let mut masses = Vec::new();
        for j in 0..10 {
            masses.push(CellMass {
                side: Side::Plus,
                j,
                mass: 0.6 + 0.2 * 0.3f64.powi(j as i32),
            });
            masses.push(CellMass {
                side: Side::Minus,
                j,
                mass: 0.2 - 0.05 * 0.5f64.powi(j as i32),
            });
        }
        let f = limit_masses(&masses, 1.0).unwrap();
        assert!((f.q_plus - 0.75).abs() < 1e-9, "{f:?}");
        assert!((f.rho_minus - 0.5).abs() < 1e-6);
        assert!(limit_masses(&masses[..8], 1.0).is_err());
    }

    #[test]
    fn csv_header() {
        let m = solve("zero", 8, 6);
        let mut buf = Vec::new();
        write_cell_masses_csv(&cell_masses(&m), &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("side,j,mass\n"));
    }
}
