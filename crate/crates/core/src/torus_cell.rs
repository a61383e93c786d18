//! Periodic cell problems on `T^d`: stationary density, corrector and
//! effective diffusion tensor of one tail drift.

use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{HomogError, Result};
use crate::field::PeriodicDrift;
use crate::grid::{GridSpec, Lattice, Stencil};
use crate::operator::{apply_torus, assemble_torus, gradient_torus, sample_periodic};
use crate::sparse::SparseBuilder;

/// Centering residuals above this are rejected.
pub const CENTERING_TOLERANCE: f64 = 1e-8;
/// Relative residual accepted from the direct solves.
pub const SOLVER_TOLERANCE: f64 = 1e-10;

/// Stationary density on the torus nodes, normalized so `Σ μ w = 1`.
#[derive(Clone, Debug)]
pub struct TorusDensity {
    pub lattice: Lattice,
    pub stencil: Stencil,
    /// Drift samples used to build the operator, `d` values per node.
    pub drift: Vec<f64>,
    pub values: Vec<f64>,
    /// Quadrature weight of each node.
    pub weight: f64,
    /// `‖Lᵀμ‖_∞` relative to the operator scale.
    pub residual: f64,
}

impl TorusDensity {
    pub fn dimension(&self) -> usize {
        self.lattice.dimension()
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.weight
    }

    /// `Σ f μ w`.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.values).map(|(a, m)| a * m).sum::<f64>() * self.weight
    }
}

/// Solves `Lᵀ μ = 0`, `Σ μ w = 1`. One row of `Lᵀ` is replaced by a pin at
/// node 0 and the solution normalized afterwards.
pub fn stationary_density(b: &PeriodicDrift, grid: &GridSpec) -> Result<TorusDensity> {
    let lattice = Lattice::torus(grid);
    if b.dimension() != lattice.dimension() {
        return Err(HomogError::InvalidGrid(format!(
            "grid dimension {} differs from drift dimension {}",
            lattice.dimension(),
            b.dimension()
        )));
    }
    let drift = sample_periodic(b, &lattice);
    if drift.iter().any(|v| !v.is_finite()) {
        return Err(HomogError::InvalidField("non-finite drift sample".into()));
    }
    let n = lattice.len();
    let w = lattice.cell_volume();
    let lt = assemble_torus(&lattice, grid.stencil, &drift, true);

    // pin μ at node 0 (a dense normalization row would destroy sparsity), then normalize
    let mut sys = SparseBuilder::with_capacity(n, lt.nnz());
    lt.for_each(|r, c, v| {
        if r != 0 {
            sys.push(r, c, v);
        }
    });
    sys.push(0, 0, 1.0);
    let sys = sys.finish();
    let mut rhs = vec![0.0; n];
    rhs[0] = 1.0;
    let mut values = sys.factorize()?.solve(&rhs)?;
    let total = values.iter().sum::<f64>() * w;
    for v in values.iter_mut() {
        *v /= total;
    }

    let scale = lt.max_abs() * values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let residual = lt.residual_inf(&values, &vec![0.0; n]) / scale;
    if residual > SOLVER_TOLERANCE {
        return Err(HomogError::Residual {
            context: "stationary density".into(),
            residual,
            tolerance: SOLVER_TOLERANCE,
        });
    }
    if let Some(v) = values.iter().find(|&&v| v < -1e-12) {
        return Err(HomogError::Discretization(format!(
            "stationary density has negative value {v:.3e}; refine the grid"
        )));
    }
    Ok(TorusDensity {
        lattice,
        stencil: grid.stencil,
        drift,
        values,
        weight: w,
        residual,
    })
}

/// `∫ b dμ` componentwise.
pub fn check_centering(mu: &TorusDensity) -> Vec<f64> {
    let d = mu.dimension();
    (0..d)
        .map(|k| {
            mu.values
                .iter()
                .enumerate()
                .map(|(j, m)| mu.drift[j * d + k] * m)
                .sum::<f64>()
                * mu.weight
        })
        .collect()
}

/// Centred solution of `L g = -b`.
#[derive(Clone, Debug)]
pub struct Corrector {
    pub dimension: usize,
    /// `values[i]` is component `g_i` at every node.
    pub values: Vec<Vec<f64>>,
    /// `gradients[i][k]` is `∂_k g_i` at every node.
    pub gradients: Vec<Vec<Vec<f64>>>,
    /// `max_i ‖L g_i + b_i‖_∞`.
    pub residual: f64,
    /// `max_i |∫ g_i dμ|`.
    pub centering: f64,
}

/// Solves the cell problem for every component with one factorization.
/// Row 0 of `L` is replaced by the pin `g(node 0) = 0`; the dropped equation
/// holds automatically exactly when `b` is centered, and its defect weighted
/// by `μ_0 w` equals `∫ b dμ`. Each solution is then shifted to `∫ g dμ = 0`.
pub fn corrector(mu: &TorusDensity) -> Result<Corrector> {
    let lattice = &mu.lattice;
    let d = mu.dimension();
    let n = lattice.len();
    let l = assemble_torus(lattice, mu.stencil, &mu.drift, false);
    let mut sys = SparseBuilder::with_capacity(n, l.nnz());
    l.for_each(|r, c, v| {
        if r != 0 {
            sys.push(r, c, v);
        }
    });
    sys.push(0, 0, 1.0);
    let sys = sys.finish();
    let lu = sys.factorize()?;

    let mut values = Vec::with_capacity(d);
    let mut residual = 0.0f64;
    let mut centering = 0.0f64;
    for i in 0..d {
        let mut rhs: Vec<f64> = (0..n).map(|j| -mu.drift[j * d + i]).collect();
        rhs[0] = 0.0;
        let mut sol = lu.solve(&rhs)?;
        let lg = apply_torus(lattice, mu.stencil, &mu.drift, &sol);
        let defect = (lg[0] + mu.drift[i]) * mu.values[0] * mu.weight;
        if defect.abs() > CENTERING_TOLERANCE {
            return Err(HomogError::NotCentered { residual: defect.abs() });
        }
        let mean = mu.integrate(&sol);
        for v in sol.iter_mut() {
            *v -= mean;
        }
        let scale = l.max_abs() * sol.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
        // row 0 carries the centering defect checked above
        let r = lg
            .iter()
            .enumerate()
            .skip(1)
            .map(|(j, v)| (v + mu.drift[j * d + i]).abs())
            .fold(0.0, f64::max);
        residual = residual.max(r);
        if r / scale.max(1.0) > SOLVER_TOLERANCE {
            return Err(HomogError::Residual {
                context: format!("corrector component {}", i + 1),
                residual: r,
                tolerance: SOLVER_TOLERANCE,
            });
        }
        centering = centering.max(mu.integrate(&sol).abs());
        values.push(sol);
    }
    let gradients = values
        .iter()
        .map(|g| (0..d).map(|k| gradient_torus(lattice, mu.stencil, g, k)).collect())
        .collect();
    Ok(Corrector {
        dimension: d,
        values,
        gradients,
        residual,
        centering,
    })
}

/// Symmetric `d x d` matrix stored row by row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DiffusionTensor(pub Vec<Vec<f64>>);

impl DiffusionTensor {
    pub fn identity(d: usize) -> Self {
        Self(
            (0..d)
                .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        )
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let d = diag.len();
        Self(
            (0..d)
                .map(|i| (0..d).map(|j| if i == j { diag[i] } else { 0.0 }).collect())
                .collect(),
        )
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[i][j]
    }

    pub fn to_mat(&self) -> Mat<f64> {
        Mat::from_fn(self.dimension(), self.dimension(), |i, j| self.0[i][j])
    }

    pub fn symmetry_error(&self) -> f64 {
        let d = self.dimension();
        let mut e = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                e = e.max((self.0[i][j] - self.0[j][i]).abs());
            }
        }
        e
    }

    /// Eigenvalues in nondecreasing order.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        self.to_mat()
            .self_adjoint_eigenvalues(Side::Lower)
            .map_err(|e| HomogError::Solver(format!("eigenvalue solve failed: {e:?}")))
    }

    pub fn is_symmetric_psd(&self) -> bool {
        self.symmetry_error() <= 1e-12
            && self
                .eigenvalues()
                .map(|ev| ev.iter().all(|&l| l >= -1e-10))
                .unwrap_or(false)
    }
}

/// `D_ij = Σ_k ∫ (δ_ik + ∂_k g_i)(δ_kj + ∂_k g_j) dμ`.
pub fn effective_tensor(corrector: &Corrector, mu: &TorusDensity) -> DiffusionTensor {
    let d = corrector.dimension;
    let n = mu.values.len();
    let mut m = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in i..d {
            let mut acc = 0.0;
            for node in 0..n {
                let mut s = 0.0;
                for k in 0..d {
                    let a = corrector.gradients[i][k][node] + if i == k { 1.0 } else { 0.0 };
                    let b = corrector.gradients[j][k][node] + if j == k { 1.0 } else { 0.0 };
                    s += a * b;
                }
                acc += s * mu.values[node];
            }
            m[i][j] = acc * mu.weight;
            m[j][i] = m[i][j];
        }
    }
    DiffusionTensor(m)
}

/// Everything solved for one tail.
#[derive(Clone, Debug)]
pub struct CellSolution {
    pub density: TorusDensity,
    pub corrector: Corrector,
    pub tensor: DiffusionTensor,
    pub centering: Vec<f64>,
}

/// Runs density, centering check, corrector and tensor for one tail.
pub fn solve_cell(b: &PeriodicDrift, grid: &GridSpec) -> Result<CellSolution> {
    let density = stationary_density(b, grid)?;
    let centering = check_centering(&density);
    let norm = centering.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm > CENTERING_TOLERANCE {
        return Err(HomogError::NotCentered { residual: norm });
    }
    let corrector = corrector(&density)?;
    let tensor = effective_tensor(&corrector, &density);
    if !tensor.is_symmetric_psd() {
        return Err(HomogError::Discretization(format!(
            "effective tensor {:?} is not symmetric positive semidefinite",
            tensor.0
        )));
    }
    Ok(CellSolution {
        density,
        corrector,
        tensor,
        centering,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::builtin_field;
    use std::collections::BTreeMap;
    use std::f64::consts::PI;

    fn tail(name: &str, params: &[(&str, f64)]) -> PeriodicDrift {
        let p: BTreeMap<String, f64> = params.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        builtin_field(name, &p).unwrap().plus().clone()
    }

    /// Periodic trapezoid rule, spectrally accurate for smooth periodic integrands.
    fn periodic_mean(f: impl Fn(f64) -> f64) -> f64 {
        let m = 4096;
        (0..m).map(|i| f(i as f64 / m as f64)).sum::<f64>() / m as f64
    }

    #[test]
    fn zero_drift_gives_uniform_density_and_identity() {
        let c = solve_cell(&PeriodicDrift::zero(2), &GridSpec::uniform(2, 16, 3)).unwrap();
        assert!(c.density.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(c.corrector.values.iter().flatten().all(|v| v.abs() < 1e-12));
        assert!((c.tensor.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(c.tensor.get(0, 1).abs() < 1e-12);
    }

    #[test]
    fn shear_density_is_uniform() {
        let b = tail("torus_shear", &[("c", 1.0)]);
        let mu = stationary_density(&b, &GridSpec::uniform(2, 32, 3)).unwrap();
        assert!(mu.values.iter().all(|v| (v - 1.0).abs() < 1e-10));
        // the uniform density is itself in the kernel of the discrete adjoint
        let lt = assemble_torus(&mu.lattice, mu.stencil, &mu.drift, true);
        assert!(lt.mul_vec(&vec![1.0; mu.values.len()]).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn shear_corrector_matches_closed_form() {
        let c = 1.3;
        let b = tail("torus_shear", &[("c", c)]);
        let cell = solve_cell(&b, &GridSpec::uniform(2, 128, 3)).unwrap();
        let lat = &cell.density.lattice;
        let mut x = [0.0; 2];
        let mut err = 0.0f64;
        for j in 0..lat.len() {
            lat.position(j, &mut x);
            let exact = c * (2.0 * PI * x[0]).sin() / (2.0 * PI * PI);
            err = err.max((cell.corrector.values[1][j] - exact).abs());
            err = err.max(cell.corrector.values[0][j].abs());
        }
        assert!(err < 1e-6, "{err}");
        let d22 = 1.0 + c * c / (2.0 * PI * PI);
        assert!((cell.tensor.get(1, 1) - d22).abs() < 1e-5);
        assert!((cell.tensor.get(0, 0) - 1.0).abs() < 1e-10);
        assert!(cell.tensor.get(0, 1).abs() < 1e-10);
    }

    #[test]
    fn gradient_density_is_gibbs() {
        let a = 1.0;
        let b = tail("gradient1d", &[("amplitude", a)]);
        let mu = stationary_density(&b, &GridSpec::new(vec![256, 8], 3)).unwrap();
        let z = periodic_mean(|t| (-2.0 * a * (2.0 * PI * t).cos()).exp());
        let mut x = [0.0; 2];
        let mut err = 0.0f64;
        for j in 0..mu.values.len() {
            mu.lattice.position(j, &mut x);
            let exact = (-2.0 * a * (2.0 * PI * x[0]).cos()).exp() / z;
            err = err.max((mu.values[j] - exact).abs());
        }
        assert!(err < 1e-6, "{err}");
        let c = check_centering(&mu);
        assert!(c.iter().all(|v| v.abs() < 1e-12), "{c:?}");
    }

    #[test]
    fn gradient_tensor_matches_two_integral_formula() {
        let a = 1.0;
        let b = tail("gradient1d", &[("amplitude", a)]);
        let cell = solve_cell(&b, &GridSpec::new(vec![256, 8], 3)).unwrap();
        let ip = periodic_mean(|t| (2.0 * a * (2.0 * PI * t).cos()).exp());
        let im = periodic_mean(|t| (-2.0 * a * (2.0 * PI * t).cos()).exp());
        let exact = 1.0 / (ip * im);
        assert!(
            (cell.tensor.get(0, 0) - exact).abs() < 1e-6,
            "{} vs {exact}",
            cell.tensor.get(0, 0)
        );
        assert!((cell.tensor.get(1, 1) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn gradient_corrector_matches_tridiagonal_solve() {
        // independent 1D oracle: ½g'' + b g' = -b with ∫ g μ = 0 via the flux form
        // ½(e^{-2V} g')' = -b e^{-2V}/... is solved here by integrating
        // g' = 2 C e^{2V} - 1 with C fixed by periodicity.
        let a = 0.7;
        let b = tail("gradient1d", &[("amplitude", a)]);
        let cell = solve_cell(&b, &GridSpec::new(vec![128, 8], 3)).unwrap();
        let v = |t: f64| a * (2.0 * PI * t).cos();
        let m = 128 * 64;
        let c = 1.0 / periodic_mean(|t| (2.0 * v(t)).exp());
        let mut g = vec![0.0; m + 1];
        for i in 0..m {
            let (t0, t1) = (i as f64 / m as f64, (i + 1) as f64 / m as f64);
            let tm = 0.5 * (t0 + t1);
            let dg = |t: f64| c * (2.0 * v(t)).exp() - 1.0;
            g[i + 1] = g[i] + (dg(t0) + 4.0 * dg(tm) + dg(t1)) / (6.0 * m as f64);
        }
        let z = periodic_mean(|t| (-2.0 * v(t)).exp());
        let mean = (0..m)
            .map(|i| g[i] * (-2.0 * v(i as f64 / m as f64)).exp())
            .sum::<f64>()
            / m as f64
            / z;
        let lat = &cell.density.lattice;
        let mut x = [0.0; 2];
        let mut err = 0.0f64;
        for j in 0..lat.len() {
            lat.position(j, &mut x);
            let i = (x[0] * m as f64).round() as usize;
            err = err.max((cell.corrector.values[0][j] - (g[i] - mean)).abs());
        }
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn discrete_duality() {
        let b = tail("two_sided", &[]);
        let mu = stationary_density(&b, &GridSpec::uniform(2, 32, 3)).unwrap();
        let f: Vec<f64> = (0..mu.values.len())
            .map(|i| ((i * 7919) % 101) as f64 / 101.0)
            .collect();
        let lf = apply_torus(&mu.lattice, mu.stencil, &mu.drift, &f);
        assert!(mu.integrate(&lf).abs() < 1e-12 * lf.iter().fold(1.0f64, |m, v| m.max(v.abs())));
    }

    #[test]
    fn refinement_consistency() {
        for (name, params) in [
            ("torus_shear", vec![("c", 1.0)]),
            ("gradient1d", vec![("amplitude", 1.0)]),
            ("two_sided", vec![]),
        ] {
            let b = tail(name, &params);
            let d64 = solve_cell(&b, &GridSpec::uniform(2, 64, 3)).unwrap().tensor;
            let d128 = solve_cell(&b, &GridSpec::uniform(2, 128, 3)).unwrap().tensor;
            for i in 0..2 {
                for j in 0..2 {
                    assert!((d64.get(i, j) - d128.get(i, j)).abs() <= 1e-4, "{name}");
                }
            }
        }
    }

    #[test]
    fn corrector_is_centred_and_tensor_psd() {
        let b = tail("two_sided", &[]);
        let cell = solve_cell(&b, &GridSpec::uniform(2, 32, 3)).unwrap();
        assert!(cell.corrector.centering <= 1e-10);
        assert!(cell.tensor.is_symmetric_psd());
    }

    #[test]
    fn non_centered_drift_is_rejected() {
        let b = PeriodicDrift::new(2, |_, out| {
            out[0] = 0.0;
            out[1] = 0.5;
        });
        assert!(matches!(
            solve_cell(&b, &GridSpec::uniform(2, 16, 3)),
            Err(HomogError::NotCentered { .. })
        ));
        let mu = stationary_density(&b, &GridSpec::uniform(2, 16, 3)).unwrap();
        assert!(matches!(corrector(&mu), Err(HomogError::NotCentered { .. })));
    }
}
