//! Parameters of the limit process: transmissivities `p±`, the global
//! compensator and corrected drift, the interface drift vector `α`, the
//! local-time vector `K`, the factors `M±` and the skew parameter.

use faer::Side as MatSide;
use serde::{Deserialize, Serialize};

use crate::error::{HomogError, Result};
use crate::field::InterfaceDrift;
use crate::grid::{GridSpec, Lattice, Stencil, MAX_DIM};
use crate::operator::{diagonal, for_each_offdiag};
use crate::profiles::smooth_step;
use crate::strip_measure::{strip_invariant_measure, StripMeasure};
use crate::torus_cell::{solve_cell, CellSolution, DiffusionTensor};

/// Largest `|b̃|` accepted outside `I_η̃`.
pub const SUPPORT_TOLERANCE: f64 = 1e-8;

/// `p⁺ = q⁺D⁺₁₁ / (q⁺D⁺₁₁ + q⁻D⁻₁₁)`, `p⁻ = 1 - p⁺`.
pub fn transmissivity(q_plus: f64, q_minus: f64, d_plus_11: f64, d_minus_11: f64) -> Result<(f64, f64)> {
    for (name, v) in [
        ("q+", q_plus),
        ("q-", q_minus),
        ("D+_11", d_plus_11),
        ("D-_11", d_minus_11),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(HomogError::InvalidArgument(format!("{name} must be positive, got {v}")));
        }
    }
    let a = q_plus * d_plus_11;
    let p_plus = a / (a + q_minus * d_minus_11);
    Ok((p_plus, 1.0 - p_plus))
}

/// Switch profile of the compensator across `[-η̃, η̃]`, as a function of
/// `t = (x_1 + η̃) / (2η̃)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blend {
    /// `S(t)`, symmetric about the interface.
    #[default]
    Symmetric,
    /// `S(t)²`, shifted towards the plus side.
    Skewed,
}

impl Blend {
    pub fn chi(self, x1: f64, eta_tilde: f64) -> f64 {
        let t = (x1 + eta_tilde) / (2.0 * eta_tilde);
        match self {
            Blend::Symmetric => smooth_step(t),
            Blend::Skewed => smooth_step(t).powi(2),
        }
    }
}

/// Multilinear interpolation of a grid function on the unit torus.
pub fn interpolate_periodic(lattice: &Lattice, values: &[f64], x: &[f64]) -> f64 {
    let d = lattice.dimension();
    let mut base = [0usize; MAX_DIM];
    let mut frac = [0.0; MAX_DIM];
    for k in 0..d {
        let n = lattice.shape()[k];
        let u = x[k].rem_euclid(1.0) * n as f64;
        let i = u.floor();
        frac[k] = u - i;
        base[k] = (i as usize) % n;
    }
    let mut acc = 0.0;
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        let mut flat = 0;
        for k in 0..d {
            let up = (corner >> k) & 1 == 1;
            let n = lattice.shape()[k];
            let i = if up { (base[k] + 1) % n } else { base[k] };
            w *= if up { frac[k] } else { 1.0 - frac[k] };
            flat += i * lattice.strides()[k];
        }
        if w != 0.0 {
            acc += w * values[flat];
        }
    }
    acc
}

/// Global compensator `g = χ g⁺ + (1 - χ) g⁻` sampled on the strip nodes.
#[derive(Clone, Debug)]
pub struct Compensator {
    pub blend: Blend,
    pub eta_tilde: f64,
    pub lattice: Lattice,
    /// `values[i]` is `g_i` at every strip node (ghost layers included).
    pub values: Vec<Vec<f64>>,
    torus: Lattice,
    g_plus: Vec<Vec<f64>>,
    g_minus: Vec<Vec<f64>>,
}

impl Compensator {
    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    /// `g(x)` anywhere on `R x T^{d-1}`; the tail correctors are interpolated
    /// multilinearly between torus nodes.
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        let chi = self.blend.chi(x[0], self.eta_tilde);
        for (i, o) in out.iter_mut().enumerate().take(self.dimension()) {
            let gp = if chi > 0.0 {
                interpolate_periodic(&self.torus, &self.g_plus[i], x)
            } else {
                0.0
            };
            let gm = if chi < 1.0 {
                interpolate_periodic(&self.torus, &self.g_minus[i], x)
            } else {
                0.0
            };
            *o = chi * gp + (1.0 - chi) * gm;
        }
    }

    /// Largest `|g|` over the strip nodes.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// The identically zero compensator on `lattice`.
    pub fn zero(lattice: &Lattice, torus: &Lattice, eta_tilde: f64) -> Self {
        let d = lattice.dimension();
        Self {
            blend: Blend::Symmetric,
            eta_tilde,
            lattice: lattice.clone(),
            values: vec![vec![0.0; lattice.len()]; d],
            torus: torus.clone(),
            g_plus: vec![vec![0.0; torus.len()]; d],
            g_minus: vec![vec![0.0; torus.len()]; d],
        }
    }
}

/// Blends the two tail correctors over `[-η̃, η̃]`, `η̃ = η + 1`, on the
/// strip lattice `lattice` (whose ghost layers sit at axis-0 indices below
/// `ghost`).
pub fn build_compensator(
    plus: &CellSolution,
    minus: &CellSolution,
    lattice: &Lattice,
    ghost: usize,
    eta: f64,
    blend: Blend,
) -> Compensator {
    let d = lattice.dimension();
    let torus = plus.density.lattice.clone();
    let eta_tilde = eta + 1.0;
    let mut values = vec![vec![0.0; lattice.len()]; d];
    let mut idx = [0usize; MAX_DIM];
    let n = torus.shape()[0] as isize;
    for node in 0..lattice.len() {
        lattice.multi_index(node, &mut idx[..d]);
        let x1 = lattice.node_coordinate(0, idx[0]);
        idx[0] = (idx[0] as isize + 1 - ghost as isize).rem_euclid(n) as usize;
        let t = torus.flat_index(&idx[..d]);
        let chi = blend.chi(x1, eta_tilde);
        for i in 0..d {
            values[i][node] = chi * plus.corrector.values[i][t] + (1.0 - chi) * minus.corrector.values[i][t];
        }
    }
    Compensator {
        blend,
        eta_tilde,
        lattice: lattice.clone(),
        values,
        torus,
        g_plus: plus.corrector.values.clone(),
        g_minus: minus.corrector.values.clone(),
    }
}

/// `b̃ = b + L g` at the strip nodes whose stencil stays on the lattice.
#[derive(Clone, Debug)]
pub struct CorrectedDrift {
    pub eta_tilde: f64,
    /// `values[i]` is `b̃_i` at every strip node; zero on the outermost
    /// `ghost` layers, where the stencil is incomplete.
    pub values: Vec<Vec<f64>>,
    /// `max |b̃|` over nodes with `|x_1| > η̃`.
    pub support_violation: f64,
}

/// Applies the discrete generator to the compensator and adds the drift.
pub fn corrected_drift(
    field: &InterfaceDrift,
    compensator: &Compensator,
    stencil: Stencil,
    ghost: usize,
) -> Result<CorrectedDrift> {
    let lattice = &compensator.lattice;
    let d = lattice.dimension();
    let n0 = lattice.shape()[0];
    let stride = lattice.strides()[0];
    let diag = diagonal(lattice.spacing(), stencil);
    let mut values = vec![vec![0.0; lattice.len()]; d];
    let mut x = [0.0; MAX_DIM];
    let mut b = [0.0; MAX_DIM];
    let mut violation = 0.0f64;
    for node in ghost * stride..(n0 - ghost) * stride {
        lattice.position(node, &mut x[..d]);
        field.eval(&x[..d], &mut b[..d]);
        for i in 0..d {
            let g = &compensator.values[i];
            let mut lg = diag * g[node];
            for_each_offdiag(lattice.spacing(), stencil, &b[..d], |k, o, w| {
                lg += w * g[lattice.neighbor(node, k, o).expect("ghost layers cover the stencil")];
            });
            let v = b[i] + lg;
            values[i][node] = v;
            if x[0].abs() > compensator.eta_tilde {
                violation = violation.max(v.abs());
            }
        }
    }
    if violation > SUPPORT_TOLERANCE {
        return Err(HomogError::Discretization(format!(
            "corrected drift does not vanish outside the interface (max {violation:.3e}); refine the grid"
        )));
    }
    Ok(CorrectedDrift {
        eta_tilde: compensator.eta_tilde,
        values,
        support_violation: violation,
    })
}

/// Interface drift vector with its diagnostic normal component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterfaceDriftVector {
    /// `α_j` for `j = 2..d`.
    pub alpha: Vec<f64>,
    /// Same renormalized integral for the normal component; diagnostic only.
    pub normal_component: f64,
    /// `2(p⁺/D⁺₁₁ + p⁻/D⁻₁₁)`.
    pub prefactor: f64,
}

/// `α_j = 2(p⁺/D⁺₁₁ + p⁻/D⁻₁₁) ∫ b̃_j dμ` with `μ` normalized to `q⁺ + q⁻ = 1`.
pub fn interface_drift_vector(
    corrected: &CorrectedDrift,
    mu: &StripMeasure,
    p: (f64, f64),
    d_plus_11: f64,
    d_minus_11: f64,
) -> Result<InterfaceDriftVector> {
    let lattice = &mu.lattice;
    if corrected.values[0].len() != lattice.len() {
        return Err(HomogError::InvalidGrid(
            "corrected drift and strip measure use different lattices".into(),
        ));
    }
    let edge = mu.strip_half_width as f64 - mu.stencil.half_width() as f64 * lattice.spacing()[0];
    if corrected.eta_tilde >= edge {
        return Err(HomogError::StripTooNarrow(format!(
            "corrected drift support {} reaches the strip boundary {}",
            corrected.eta_tilde, mu.strip_half_width
        )));
    }
    let d = lattice.dimension();
    let prefactor = 2.0 * (p.0 / d_plus_11 + p.1 / d_minus_11);
    let integral = |i: usize| -> f64 {
        corrected.values[i]
            .iter()
            .zip(&mu.values)
            .map(|(b, m)| b * m)
            .sum::<f64>()
            * mu.weight
    };
    Ok(InterfaceDriftVector {
        alpha: (1..d).map(|i| prefactor * integral(i)).collect(),
        normal_component: prefactor * integral(0),
        prefactor,
    })
}

/// Everything defining the limit process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveModel {
    pub d_plus: DiffusionTensor,
    pub d_minus: DiffusionTensor,
    pub q_plus: f64,
    pub q_minus: f64,
    pub p_plus: f64,
    pub p_minus: f64,
    /// `α_j`, `j = 2..d`.
    pub alpha: Vec<f64>,
    /// `K = (p⁺ - p⁻, α_2, ..., α_d)`.
    pub k: Vec<f64>,
    pub m_plus: Vec<Vec<f64>>,
    pub m_minus: Vec<Vec<f64>>,
    pub skew_p: f64,
}

/// `S H` with `S = D^{1/2}` and `H` the Householder reflection mapping the
/// first row of `S` to `(√D₁₁, 0, ..., 0)`.
pub fn factor_tensor(d: &DiffusionTensor) -> Result<Vec<Vec<f64>>> {
    let n = d.dimension();
    if d.symmetry_error() > 1e-12 {
        return Err(HomogError::InvalidModel("diffusion tensor is not symmetric".into()));
    }
    let evd = d
        .to_mat()
        .self_adjoint_eigen(MatSide::Lower)
        .map_err(|e| HomogError::Solver(format!("eigendecomposition failed: {e:?}")))?;
    let u = evd.U();
    let s = evd.S();
    let lam: Vec<f64> = (0..n).map(|i| s[i]).collect();
    if lam.iter().any(|&l| l < -1e-10) {
        return Err(HomogError::InvalidModel(format!(
            "diffusion tensor is not positive semidefinite (eigenvalues {lam:?})"
        )));
    }
    let mut root = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            root[i][j] = (0..n).map(|k| u[(i, k)] * lam[k].max(0.0).sqrt() * u[(j, k)]).sum();
        }
    }
    let r = root[0].clone();
    let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut v = r.clone();
    v[0] -= norm;
    let vv: f64 = v.iter().map(|a| a * a).sum();
    let mut m = root.clone();
    if vv > 1e-30 * norm.max(1.0) {
        for row in m.iter_mut() {
            let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (a, b) in row.iter_mut().zip(&v) {
                *a -= 2.0 * dot / vv * b;
            }
        }
    }
    // the first row is (√D₁₁, 0, ..., 0) up to rounding; make it exact
    m[0][0] = d.get(0, 0).sqrt();
    for a in m[0].iter_mut().skip(1) {
        *a = 0.0;
    }
    Ok(m)
}

/// `p⁺√D⁻₁₁ / (p⁺√D⁻₁₁ + p⁻√D⁺₁₁)`.
pub fn skew_parameter(p_plus: f64, p_minus: f64, d_plus_11: f64, d_minus_11: f64) -> f64 {
    let a = p_plus * d_minus_11.sqrt();
    a / (a + p_minus * d_plus_11.sqrt())
}

/// Assembles the model from its ingredients.
pub fn assemble_model(
    d_plus: DiffusionTensor,
    d_minus: DiffusionTensor,
    q_plus: f64,
    q_minus: f64,
    alpha: Vec<f64>,
) -> Result<EffectiveModel> {
    let d = d_plus.dimension();
    if d_minus.dimension() != d || alpha.len() + 1 != d {
        return Err(HomogError::InvalidModel("inconsistent dimensions".into()));
    }
    for t in [&d_plus, &d_minus] {
        if !t.is_symmetric_psd() {
            return Err(HomogError::InvalidModel(format!(
                "diffusion tensor {:?} is not symmetric positive semidefinite",
                t.0
            )));
        }
    }
    let (p_plus, p_minus) = transmissivity(q_plus, q_minus, d_plus.get(0, 0), d_minus.get(0, 0))?;
    let m_plus = factor_tensor(&d_plus)?;
    let m_minus = factor_tensor(&d_minus)?;
    let mut k = vec![p_plus - p_minus];
    k.extend_from_slice(&alpha);
    let skew_p = skew_parameter(p_plus, p_minus, d_plus.get(0, 0), d_minus.get(0, 0));
    Ok(EffectiveModel {
        d_plus,
        d_minus,
        q_plus,
        q_minus,
        p_plus,
        p_minus,
        alpha,
        k,
        m_plus,
        m_minus,
        skew_p,
    })
}

impl EffectiveModel {
    pub fn dimension(&self) -> usize {
        self.d_plus.dimension()
    }

    /// Brownian motion with identity covariance in dimension `d`.
    pub fn standard(d: usize) -> Self {
        assemble_model(
            DiffusionTensor::identity(d),
            DiffusionTensor::identity(d),
            0.5,
            0.5,
            vec![0.0; d - 1],
        )
        .expect("identity model is valid")
    }

    /// Rebuilds the derived quantities from `(D±, q±, α)`.
    pub fn rebuild(&self, alpha: Vec<f64>) -> Result<Self> {
        assemble_model(
            self.d_plus.clone(),
            self.d_minus.clone(),
            self.q_plus,
            self.q_minus,
            alpha,
        )
    }

    /// The same model with `α` doubled.
    pub fn with_doubled_alpha(&self) -> Result<Self> {
        self.rebuild(self.alpha.iter().map(|a| 2.0 * a).collect())
    }

    /// The same `D±` and `α` with `p⁺` and `p⁻` exchanged; the cell masses
    /// are chosen as `q⁺ ∝ p⁻/D⁺₁₁`, `q⁻ ∝ p⁺/D⁻₁₁`.
    pub fn with_swapped_transmissivity(&self) -> Result<Self> {
        let a = self.p_minus / self.d_plus.get(0, 0);
        let b = self.p_plus / self.d_minus.get(0, 0);
        assemble_model(
            self.d_plus.clone(),
            self.d_minus.clone(),
            a / (a + b),
            b / (a + b),
            self.alpha.clone(),
        )
    }

    /// Largest entry of `M±M±ᵀ - D±`.
    pub fn factor_error(&self) -> f64 {
        let mut e = 0.0f64;
        for (m, t) in [(&self.m_plus, &self.d_plus), (&self.m_minus, &self.d_minus)] {
            let d = t.dimension();
            for i in 0..d {
                for j in 0..d {
                    let v: f64 = (0..d).map(|k| m[i][k] * m[j][k]).sum();
                    e = e.max((v - t.get(i, j)).abs());
                }
            }
        }
        e
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let d = self.dimension();
        let bad = |m: &str| Err(HomogError::InvalidModel(m.into()));
        if self.p_plus + self.p_minus != 1.0 || !(self.p_plus > 0.0 && self.p_plus < 1.0) {
            return bad("p+ and p- must lie in (0,1) and sum to 1");
        }
        if self.k.len() != d || self.alpha.len() != d - 1 || self.k[0] != self.p_plus - self.p_minus {
            return bad("K must be (p+ - p-, alpha)");
        }
        if self.k[1..] != self.alpha[..] {
            return bad("K must be (p+ - p-, alpha)");
        }
        if self.factor_error() > 1e-10 {
            return bad("M M^T differs from D");
        }
        for (m, t) in [(&self.m_plus, &self.d_plus), (&self.m_minus, &self.d_minus)] {
            if m[0][0] != t.get(0, 0).sqrt() || m[0][1..].iter().any(|&v| v != 0.0) {
                return bad("first row of M must be (sqrt(D_11), 0, ..., 0)");
            }
        }
        if !(self.skew_p > 0.0 && self.skew_p < 1.0) {
            return bad("skew parameter must lie in (0,1)");
        }
        Ok(())
    }
}

/// Long-run fraction of time the limit process spends on the plus side.
pub fn asymptotic_side_probability(model: &EffectiveModel) -> f64 {
    skew_parameter(
        model.p_plus,
        model.p_minus,
        model.d_plus.get(0, 0),
        model.d_minus.get(0, 0),
    )
}

/// One-sided first derivatives of a test function at a point of the
/// interface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GluingTestFunction {
    /// `∂₁f` from the plus side.
    pub d1_plus: f64,
    /// `∂₁f` from the minus side.
    pub d1_minus: f64,
    /// `∂_j f`, `j = 2..d`.
    pub tangential: Vec<f64>,
}

impl GluingTestFunction {
    /// Chooses `∂₁f|₊` so that the gluing condition holds exactly.
    pub fn glued(model: &EffectiveModel, d1_minus: f64, tangential: Vec<f64>) -> Self {
        let t: f64 = model.alpha.iter().zip(&tangential).map(|(a, g)| a * g).sum();
        Self {
            d1_plus: (model.p_minus * d1_minus - t) / model.p_plus,
            d1_minus,
            tangential,
        }
    }
}

/// `p⁺∂₁f|₊ - p⁻∂₁f|₋ + Σ α_j ∂_j f`.
pub fn gluing_residual(f: &GluingTestFunction, model: &EffectiveModel) -> f64 {
    model.p_plus * f.d1_plus - model.p_minus * f.d1_minus
        + model.alpha.iter().zip(&f.tangential).map(|(a, g)| a * g).sum::<f64>()
}

/// All intermediate results of the deterministic pipeline.
#[derive(Clone, Debug)]
pub struct ModelRun {
    pub plus: CellSolution,
    pub minus: CellSolution,
    pub strip: StripMeasure,
    pub compensator: Compensator,
    pub corrected: CorrectedDrift,
    pub interface: InterfaceDriftVector,
    pub model: EffectiveModel,
}

/// Cell problems, strip measure, compensator and model for `field`.
pub fn build_model(field: &InterfaceDrift, grid: &GridSpec, blend: Blend) -> Result<ModelRun> {
    grid.validate(field.half_width())?;
    let plus = solve_cell(field.plus(), grid)?;
    let minus = solve_cell(field.minus(), grid)?;
    let strip = strip_invariant_measure(field, &plus.density, &minus.density, grid)?;
    model_from_parts(field, plus, minus, strip, blend)
}

/// Finishes the pipeline from solved cells and strip measure; used to
/// evaluate several blends without repeating the solves.
pub fn model_from_parts(
    field: &InterfaceDrift,
    plus: CellSolution,
    minus: CellSolution,
    strip: StripMeasure,
    blend: Blend,
) -> Result<ModelRun> {
    let compensator = build_compensator(&plus, &minus, &strip.lattice, strip.ghost, field.half_width(), blend);
    let corrected = corrected_drift(field, &compensator, strip.stencil, strip.ghost)?;
    let (dp, dm) = (plus.tensor.get(0, 0), minus.tensor.get(0, 0));
    let p = transmissivity(strip.fit.q_plus, strip.fit.q_minus, dp, dm)?;
    let interface = interface_drift_vector(&corrected, &strip, p, dp, dm)?;
    let model = assemble_model(
        plus.tensor.clone(),
        minus.tensor.clone(),
        strip.fit.q_plus,
        strip.fit.q_minus,
        interface.alpha.clone(),
    )?;
    model.validate()?;
    Ok(ModelRun {
        plus,
        minus,
        strip,
        compensator,
        corrected,
        interface,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{builtin_field, BUMP_MASS};
    use std::collections::BTreeMap;
    use std::f64::consts::PI;

    fn params(p: &[(&str, f64)]) -> BTreeMap<String, f64> {
        p.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn run(name: &str, p: &[(&str, f64)], res: usize, blend: Blend) -> ModelRun {
        let f = builtin_field(name, &params(p)).unwrap();
        let g = GridSpec::new(vec![res, 8], GridSpec::default_strip_half_width(f.half_width()));
        build_model(&f, &g, blend).unwrap()
    }

    #[test]
    fn transmissivity_examples() {
        assert_eq!(transmissivity(0.5, 0.5, 1.0, 1.0).unwrap(), (0.5, 0.5));
        let (pp, pm) = transmissivity(0.5, 0.5, 2.0, 1.0).unwrap();
        assert!((pp - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(pp + pm, 1.0);
        assert!(transmissivity(0.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn assemble_examples() {
        let m = EffectiveModel::standard(2);
        assert_eq!(m.k, vec![0.0, 0.0]);
        assert_eq!(m.skew_p, 0.5);
        assert_eq!(m.m_plus, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let m = assemble_model(
            DiffusionTensor::diagonal(&[2.0, 1.0]),
            DiffusionTensor::identity(2),
            0.5,
            0.5,
            vec![0.0],
        )
        .unwrap();
        assert!((m.p_plus - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.k[0] - 1.0 / 3.0).abs() < 1e-15);
        let expect = 2.0 / (2.0 + 2f64.sqrt());
        assert!((m.skew_p - expect).abs() < 1e-15);
        assert_eq!(asymptotic_side_probability(&m), m.skew_p);
        m.validate().unwrap();
    }

    #[test]
    fn factor_has_required_first_row() {
        let d = DiffusionTensor(vec![vec![1.7, 0.3, -0.2], vec![0.3, 1.1, 0.4], vec![-0.2, 0.4, 0.9]]);
        let m = factor_tensor(&d).unwrap();
        assert_eq!(m[0][0], 1.7f64.sqrt());
        assert_eq!(&m[0][1..], &[0.0, 0.0]);
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| m[i][k] * m[j][k]).sum();
                assert!((v - d.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_field_model_is_identity() {
        let r = run("zero", &[], 16, Blend::Symmetric);
        assert!((r.model.p_plus - 0.5).abs() < 1e-12);
        assert!((r.model.q_plus - 0.5).abs() < 1e-12);
        assert!(r.model.alpha.iter().all(|a| a.abs() < 1e-12));
        assert!(r.compensator.sup_norm() == 0.0);
    }

    #[test]
    fn paper_shear_recovers_bump_integral() {
        for (a, eta) in [(1.0, 1.0), (2.5, 0.5)] {
            let r = run("paper_shear", &[("amplitude", a), ("eta", eta)], 64, Blend::Symmetric);
            let m = &r.model;
            assert!((m.p_plus - 0.5).abs() < 1e-6);
            assert!(
                (m.alpha[0] - a * eta * BUMP_MASS).abs() < 1e-6,
                "{} vs {}",
                m.alpha[0],
                a * eta * BUMP_MASS
            );
            assert!((m.skew_p - 0.5).abs() < 1e-6);
            // with g = 0 the corrected drift is the drift itself
            assert!(r.compensator.sup_norm() == 0.0);
        }
    }

    #[test]
    fn torus_shear_corrected_drift_vanishes() {
        let r = run("torus_shear", &[("c", 1.0)], 128, Blend::Symmetric);
        let sup = r.corrected.values.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(sup <= 1e-6, "{sup}");
        assert!(r.model.alpha[0].abs() < 1e-8);
        assert!(r.model.k.iter().all(|k| k.abs() < 1e-8));
        // identical tails: the compensator is the shared corrector regardless of blend
        let mut g = [0.0; 2];
        r.compensator.eval(&[0.3, 0.1], &mut g);
        assert!((g[1] - (2.0 * PI * 0.3).sin() / (2.0 * PI * PI)).abs() < 1e-3);
    }

    #[test]
    fn alpha_is_blend_independent() {
        for (name, p) in [
            ("zero", vec![]),
            ("paper_shear", vec![]),
            ("torus_shear", vec![]),
            ("gradient1d", vec![]),
            ("two_sided", vec![]),
        ] {
            let a = run(name, &p, 32, Blend::Symmetric).model.alpha[0];
            let b = run(name, &p, 32, Blend::Skewed).model.alpha[0];
            assert!(
                (a - b).abs() <= 1e-6 * a.abs().max(1e-12) || (a - b).abs() < 1e-13,
                "{name}: {a} {b}"
            );
        }
    }

    #[test]
    fn two_sided_matches_reference_values() {
        let m = run("two_sided", &[], 64, Blend::Symmetric).model;
        // reference values from an independent one-dimensional computation
        assert!((m.q_plus - 0.55457).abs() < 2e-5, "{}", m.q_plus);
        assert!((m.d_plus.get(0, 0) - 0.62386).abs() < 2e-5);
        assert!((m.p_plus - 0.43717).abs() < 2e-5);
        assert!((m.alpha[0] - 0.09982).abs() < 2e-4, "{}", m.alpha[0]);
    }

    #[test]
    fn label_swap_reflects_model() {
        let f = builtin_field("two_sided", &BTreeMap::new()).unwrap();
        let g = GridSpec::new(vec![32, 8], 9);
        let a = build_model(&f, &g, Blend::Symmetric).unwrap().model;
        let b = build_model(&f.reflected(), &g, Blend::Symmetric).unwrap().model;
        assert!((a.q_plus - b.q_minus).abs() < 1e-10);
        assert!((a.d_plus.get(0, 0) - b.d_minus.get(0, 0)).abs() < 1e-10);
        assert!((a.k[0] + b.k[0]).abs() < 1e-10);
        assert!((a.alpha[0] - b.alpha[0]).abs() < 1e-8, "{} {}", a.alpha[0], b.alpha[0]);
    }

    #[test]
    fn swapping_transmissivity_keeps_tensors() {
        let m = assemble_model(
            DiffusionTensor::diagonal(&[2.0, 1.0]),
            DiffusionTensor::identity(2),
            0.5,
            0.5,
            vec![0.3],
        )
        .unwrap();
        let s = m.with_swapped_transmissivity().unwrap();
        assert!((s.p_plus - m.p_minus).abs() < 1e-15);
        assert_eq!(s.d_plus, m.d_plus);
        assert_eq!(s.alpha, m.alpha);
        assert!((s.q_plus - 0.2).abs() < 1e-15);
        let back = s.with_swapped_transmissivity().unwrap();
        assert!((back.p_plus - m.p_plus).abs() < 1e-15);
    }

    #[test]
    fn gluing_examples() {
        let sym = EffectiveModel::standard(2);
        let f = GluingTestFunction {
            d1_plus: 0.0,
            d1_minus: 0.0,
            tangential: vec![0.0],
        };
        assert_eq!(gluing_residual(&f, &sym), 0.0);
        let f = GluingTestFunction {
            d1_plus: 1.3,
            d1_minus: 1.3,
            tangential: vec![0.7],
        };
        assert_eq!(gluing_residual(&f, &sym), 0.0);
        let m = sym.rebuild(vec![BUMP_MASS]).unwrap();
        let f = GluingTestFunction::glued(&m, 0.0, vec![1.0]);
        assert!((f.d1_plus + 2.0 * BUMP_MASS).abs() < 1e-15);
        assert!(gluing_residual(&f, &m).abs() < 1e-15);
    }
}
