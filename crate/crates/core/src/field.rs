//! Drift fields: the periodic tails `b±`, the interface drift `b` on
//! `R x T^{d-1}`, builtin examples, expression-defined fields, validation and
//! grid sampling.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{HomogError, Result};
use crate::grid::{GridSpec, Lattice, MAX_DIM};
use crate::profiles::{bump, smooth_switch};

type VectorFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// Unit-periodic drift on the torus `T^d`.
#[derive(Clone)]
pub struct PeriodicDrift {
    dimension: usize,
    f: Arc<VectorFn>,
}

impl fmt::Debug for PeriodicDrift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PeriodicDrift")
            .field("dimension", &self.dimension)
            .finish_non_exhaustive()
    }
}

impl PeriodicDrift {
    pub fn new(dimension: usize, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self {
            dimension,
            f: Arc::new(f),
        }
    }

    pub fn zero(dimension: usize) -> Self {
        Self::new(dimension, |_, out| out.fill(0.0))
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Evaluates at `x` after reducing every coordinate mod 1.
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        let mut y = [0.0; MAX_DIM];
        for (yk, xk) in y.iter_mut().zip(x) {
            *yk = xk.rem_euclid(1.0);
        }
        (self.f)(&y[..self.dimension], out);
    }

    /// Evaluates the underlying map without reducing coordinates.
    pub fn eval_raw(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out);
    }
}

/// Drift `b` on `R x T^{d-1}` that agrees with `b+` for `x_1 > eta` and with
/// `b-` for `x_1 < -eta`.
#[derive(Clone)]
pub struct InterfaceDrift {
    name: String,
    dimension: usize,
    half_width: f64,
    f: Arc<VectorFn>,
    plus: PeriodicDrift,
    minus: PeriodicDrift,
}

impl fmt::Debug for InterfaceDrift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InterfaceDrift")
            .field("name", &self.name)
            .field("dimension", &self.dimension)
            .field("half_width", &self.half_width)
            .finish_non_exhaustive()
    }
}

impl InterfaceDrift {
    pub fn new(
        name: impl Into<String>,
        dimension: usize,
        half_width: f64,
        f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        plus: PeriodicDrift,
        minus: PeriodicDrift,
    ) -> Result<Self> {
        if !(2..=MAX_DIM).contains(&dimension) {
            return Err(HomogError::InvalidField(format!(
                "dimension {dimension} outside 2..={MAX_DIM}"
            )));
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(HomogError::InvalidField(format!(
                "interface half-width must be positive, got {half_width}"
            )));
        }
        if plus.dimension() != dimension || minus.dimension() != dimension {
            return Err(HomogError::InvalidField(
                "tail dimensions differ from the interface dimension".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            dimension,
            half_width,
            f: Arc::new(f),
            plus,
            minus,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Interface half-width `eta`.
    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn plus(&self) -> &PeriodicDrift {
        &self.plus
    }

    pub fn minus(&self) -> &PeriodicDrift {
        &self.minus
    }

    /// Evaluates `b(x)` with the coordinates parallel to the interface
    /// reduced mod 1.
    #[inline]
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        let mut y = [0.0; MAX_DIM];
        y[0] = x[0];
        for k in 1..self.dimension {
            y[k] = x[k].rem_euclid(1.0);
        }
        (self.f)(&y[..self.dimension], out);
    }

    pub fn eval_raw(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out);
    }

    /// Mirror image under `x_1 -> -x_1`: the drift of the reflected process
    /// `R X` is `R b(R x)`, and the two tails trade places.
    pub fn reflected(&self) -> InterfaceDrift {
        let reflect = |f: Arc<VectorFn>| {
            move |x: &[f64], out: &mut [f64]| {
                let mut y = [0.0; MAX_DIM];
                y[..x.len()].copy_from_slice(x);
                y[0] = -x[0];
                f(&y[..x.len()], out);
                out[0] = -out[0];
            }
        };
        let d = self.dimension;
        let tail = |t: &PeriodicDrift| {
            let f = t.f.clone();
            PeriodicDrift::new(d, move |x, out| {
                let mut y = [0.0; MAX_DIM];
                y[..x.len()].copy_from_slice(x);
                y[0] = (-x[0]).rem_euclid(1.0);
                f(&y[..x.len()], out);
                out[0] = -out[0];
            })
        };
        InterfaceDrift {
            name: format!("{}_reflected", self.name),
            dimension: d,
            half_width: self.half_width,
            f: Arc::new(reflect(self.f.clone())),
            plus: tail(&self.minus),
            minus: tail(&self.plus),
        }
    }
}

/// Mass of the standard bump `exp(-1/(1-t^2))` over `(-1, 1)`.
pub const BUMP_MASS: f64 = 0.443_993_816_168_079_4;

fn param(params: &BTreeMap<String, f64>, key: &str, default: f64) -> f64 {
    params.get(key).copied().unwrap_or(default)
}

fn check_keys(name: &str, params: &BTreeMap<String, f64>, allowed: &[&str]) -> Result<()> {
    for (k, v) in params {
        if !allowed.contains(&k.as_str()) {
            return Err(HomogError::MalformedParams(format!(
                "`{k}` is not a parameter of `{name}` (allowed: {})",
                allowed.join(", ")
            )));
        }
        if !v.is_finite() {
            return Err(HomogError::MalformedParams(format!("`{k}` = {v} is not finite")));
        }
    }
    Ok(())
}

fn dimension_param(params: &BTreeMap<String, f64>) -> Result<usize> {
    let d = param(params, "dimension", 2.0);
    if d.fract() != 0.0 || !(2.0..=MAX_DIM as f64).contains(&d) {
        return Err(HomogError::MalformedParams(format!(
            "dimension must be an integer in 2..={MAX_DIM}, got {d}"
        )));
    }
    Ok(d as usize)
}

fn eta_param(params: &BTreeMap<String, f64>) -> Result<f64> {
    let eta = param(params, "eta", 1.0);
    if eta <= 0.0 {
        return Err(HomogError::MalformedParams(format!("eta must be positive, got {eta}")));
    }
    Ok(eta)
}

/// Builds one of the named example fields.
///
/// * `zero`: `b ≡ 0`. Params: `dimension`, `eta`.
/// * `paper_shear`: `d = 2`, `b = (0, f(x_1))` with
///   `f(x_1) = amplitude * bump(x_1/eta)`, so `∫f = amplitude * eta * BUMP_MASS`.
///   Params: `amplitude` (1), `eta` (1).
/// * `torus_shear`: `b = (0, c sin 2πx_1, 0, ...)` everywhere. Params: `c`
///   (1), `dimension`, `eta`.
/// * `gradient1d`: `b_1 = -V'(x_1)` with `V = amplitude * cos 2πx_1`, other
///   components zero. Params: `amplitude` (1), `dimension`, `eta`.
/// * `two_sided`: `b+ = (2π a sin 2πx_1, 0, ...)` (gradient of
///   `a cos 2πx_1`), `b- = (0, c sin 2πx_1, 0, ...)`, blended inside
///   `[-eta, eta]` by a C∞ switch. Params: `a_plus` (0.5), `c_minus` (2),
///   `dimension`, `eta`.
pub fn builtin_field(name: &str, params: &BTreeMap<String, f64>) -> Result<InterfaceDrift> {
    match name {
        "zero" => {
            check_keys(name, params, &["dimension", "eta"])?;
            let d = dimension_param(params)?;
            let eta = eta_param(params)?;
            InterfaceDrift::new(
                name,
                d,
                eta,
                |_, out| out.fill(0.0),
                PeriodicDrift::zero(d),
                PeriodicDrift::zero(d),
            )
        }
        "paper_shear" => {
            check_keys(name, params, &["amplitude", "eta", "dimension"])?;
            if dimension_param(params)? != 2 {
                return Err(HomogError::MalformedParams("paper_shear is two-dimensional".into()));
            }
            let a = param(params, "amplitude", 1.0);
            let eta = eta_param(params)?;
            InterfaceDrift::new(
                name,
                2,
                eta,
                move |x, out| {
                    out[0] = 0.0;
                    out[1] = a * bump(x[0] / eta);
                },
                PeriodicDrift::zero(2),
                PeriodicDrift::zero(2),
            )
        }
        "torus_shear" => {
            check_keys(name, params, &["c", "dimension", "eta"])?;
            let d = dimension_param(params)?;
            let eta = eta_param(params)?;
            let c = param(params, "c", 1.0);
            let shear = move |x: &[f64], out: &mut [f64]| {
                out.fill(0.0);
                out[1] = c * (2.0 * PI * x[0]).sin();
            };
            InterfaceDrift::new(
                name,
                d,
                eta,
                shear,
                PeriodicDrift::new(d, shear),
                PeriodicDrift::new(d, shear),
            )
        }
        "gradient1d" => {
            check_keys(name, params, &["amplitude", "dimension", "eta"])?;
            let d = dimension_param(params)?;
            let eta = eta_param(params)?;
            let a = param(params, "amplitude", 1.0);
            let grad = move |x: &[f64], out: &mut [f64]| {
                out.fill(0.0);
                out[0] = 2.0 * PI * a * (2.0 * PI * x[0]).sin();
            };
            InterfaceDrift::new(
                name,
                d,
                eta,
                grad,
                PeriodicDrift::new(d, grad),
                PeriodicDrift::new(d, grad),
            )
        }
        "two_sided" => {
            check_keys(name, params, &["a_plus", "c_minus", "dimension", "eta"])?;
            let d = dimension_param(params)?;
            let eta = eta_param(params)?;
            let a = param(params, "a_plus", 0.5);
            let c = param(params, "c_minus", 2.0);
            let plus = move |x: &[f64], out: &mut [f64]| {
                out.fill(0.0);
                out[0] = 2.0 * PI * a * (2.0 * PI * x[0]).sin();
            };
            let minus = move |x: &[f64], out: &mut [f64]| {
                out.fill(0.0);
                out[1] = c * (2.0 * PI * x[0]).sin();
            };
            let blended = move |x: &[f64], out: &mut [f64]| {
                let chi = smooth_switch(x[0], -eta, eta);
                let s = (2.0 * PI * x[0]).sin();
                out.fill(0.0);
                out[0] = chi * 2.0 * PI * a * s;
                out[1] = (1.0 - chi) * c * s;
            };
            InterfaceDrift::new(
                name,
                d,
                eta,
                blended,
                PeriodicDrift::new(d, plus),
                PeriodicDrift::new(d, minus),
            )
        }
        other => Err(HomogError::UnknownBuiltin(other.to_string())),
    }
}

/// A compiled scalar expression in the variables `x1..xd`.
///
/// Besides the operators and functions `fasteval` provides (`sin`, `cos`,
/// `pi()`, `e()`, `abs`, `min`, ...), `exp(v)` and `sqrt(v)` are available.
struct CompiledExpr {
    slab: fasteval::Slab,
    instruction: fasteval::Instruction,
}

impl CompiledExpr {
    fn compile(source: &str) -> Result<Self> {
        use fasteval::Compiler;
        let parser = fasteval::Parser::new();
        let mut slab = fasteval::Slab::new();
        let instruction = parser
            .parse(source, &mut slab.ps)
            .map_err(|e| HomogError::InvalidField(format!("cannot parse `{source}`: {e:?}")))?
            .from(&slab.ps)
            .compile(&slab.ps, &mut slab.cs);
        Ok(Self { slab, instruction })
    }

    fn try_eval(&self, x: &[f64]) -> std::result::Result<f64, fasteval::Error> {
        use fasteval::Evaler;
        let mut ns = |name: &str, args: Vec<f64>| -> Option<f64> {
            match name {
                "exp" => args.first().map(|a| a.exp()),
                "sqrt" => args.first().map(|a| a.sqrt()),
                _ => {
                    let k: usize = name.strip_prefix('x')?.parse().ok()?;
                    x.get(k.checked_sub(1)?).copied()
                }
            }
        };
        self.instruction.eval(&self.slab, &mut ns)
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.try_eval(x).unwrap_or(f64::NAN)
    }
}

fn compile_vector(label: &str, sources: &[String], dimension: usize) -> Result<Arc<Vec<CompiledExpr>>> {
    if sources.len() != dimension {
        return Err(HomogError::InvalidField(format!(
            "`{label}` has {} components, expected {dimension}",
            sources.len()
        )));
    }
    let exprs = sources
        .iter()
        .map(|s| CompiledExpr::compile(s))
        .collect::<Result<Vec<_>>>()?;
    let probe = vec![0.25; dimension];
    for (e, s) in exprs.iter().zip(sources) {
        e.try_eval(&probe)
            .map_err(|err| HomogError::InvalidField(format!("cannot evaluate `{s}`: {err:?}")))?;
    }
    Ok(Arc::new(exprs))
}

/// Configuration-level description of a drift field: either a builtin name
/// with parameters or one expression string per component.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Interface drift components `b_1..b_d` as expressions in `x1..xd`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_plus: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_minus: Option<Vec<String>>,
}

impl FieldSpec {
    pub fn builtin(name: &str) -> Self {
        Self {
            builtin: Some(name.to_string()),
            ..Default::default()
        }
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn build(&self) -> Result<InterfaceDrift> {
        match (&self.builtin, &self.b) {
            (Some(name), None) => {
                if self.b_plus.is_some() || self.b_minus.is_some() || self.eta.is_some() {
                    return Err(HomogError::Config(
                        "builtin fields take `params`, not expressions or `eta`".into(),
                    ));
                }
                builtin_field(name, &self.params)
            }
            (None, Some(b)) => {
                let d = b.len();
                let eta = self
                    .eta
                    .ok_or_else(|| HomogError::Config("expression fields need `eta`".into()))?;
                let (Some(bp), Some(bm)) = (&self.b_plus, &self.b_minus) else {
                    return Err(HomogError::Config(
                        "expression fields need `b_plus` and `b_minus`".into(),
                    ));
                };
                let fb = compile_vector("b", b, d)?;
                let fp = compile_vector("b_plus", bp, d)?;
                let fm = compile_vector("b_minus", bm, d)?;
                let as_fn = |e: Arc<Vec<CompiledExpr>>| {
                    move |x: &[f64], out: &mut [f64]| {
                        for (o, c) in out.iter_mut().zip(e.iter()) {
                            *o = c.eval(x);
                        }
                    }
                };
                InterfaceDrift::new(
                    "expression",
                    d,
                    eta,
                    as_fn(fb),
                    PeriodicDrift::new(d, as_fn(fp)),
                    PeriodicDrift::new(d, as_fn(fm)),
                )
            }
            (Some(_), Some(_)) => Err(HomogError::Config("field specifies both `builtin` and `b`".into())),
            (None, None) => Err(HomogError::Config("field needs either `builtin` or `b`".into())),
        }
    }
}

/// Outcome of [`validate_drift`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// `max |b(x + e_j) - b(x)|` over sampled points and `j >= 2`, together
    /// with the full periodicity of both tails.
    pub periodicity_violation: f64,
    /// `max |b(x) - b±(x mod 1)|` over sampled points with `|x_1| > eta`.
    pub tail_violation: f64,
    pub sup_norm: f64,
    /// Largest sampled second difference `|Δ_h^2 b| / h^2`, a smoothness proxy.
    pub max_second_difference: f64,
    pub passed: bool,
}

/// Tolerance on the periodicity and tail-agreement violations.
pub const VALIDATION_TOLERANCE: f64 = 1e-10;

/// Samples `field` on the strip and torus nodes of `grid` and checks the
/// structural assumptions: periodicity, tail agreement, boundedness.
pub fn validate_drift(field: &InterfaceDrift, grid: &GridSpec) -> Result<ValidationReport> {
    let d = field.dimension();
    if grid.dimension() != d {
        return Err(HomogError::InvalidGrid(format!(
            "grid dimension {} differs from field dimension {d}",
            grid.dimension()
        )));
    }
    let strip = Lattice::strip(grid, 1);
    let eta = field.half_width();
    let mut x = [0.0; MAX_DIM];
    let mut y = [0.0; MAX_DIM];
    let mut b = [0.0; MAX_DIM];
    let mut c = [0.0; MAX_DIM];
    let mut bl = [0.0; MAX_DIM];
    let mut br = [0.0; MAX_DIM];
    let mut periodicity = 0.0f64;
    let mut tail = 0.0f64;
    let mut sup = 0.0f64;
    let mut second = 0.0f64;

    let check_finite = |v: &[f64], at: &[f64]| -> Result<()> {
        if v.iter().any(|z| !z.is_finite()) {
            return Err(HomogError::InvalidField(format!(
                "non-finite drift value {v:?} at {at:?}"
            )));
        }
        Ok(())
    };
    let max_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);

    for flat in 0..strip.len() {
        strip.position(flat, &mut x[..d]);
        field.eval_raw(&x[..d], &mut b[..d]);
        check_finite(&b[..d], &x[..d])?;
        sup = sup.max(b[..d].iter().fold(0.0f64, |m, v| m.max(v.abs())));
        for j in 1..d {
            y[..d].copy_from_slice(&x[..d]);
            y[j] += 1.0;
            field.eval_raw(&y[..d], &mut c[..d]);
            check_finite(&c[..d], &y[..d])?;
            periodicity = periodicity.max(max_diff(&b[..d], &c[..d]));
        }
        if x[0].abs() > eta {
            let t = if x[0] > 0.0 { field.plus() } else { field.minus() };
            t.eval(&x[..d], &mut c[..d]);
            check_finite(&c[..d], &x[..d])?;
            tail = tail.max(max_diff(&b[..d], &c[..d]));
        }
        for k in 0..d {
            let h = strip.spacing()[k];
            y[..d].copy_from_slice(&x[..d]);
            y[k] -= h;
            field.eval_raw(&y[..d], &mut bl[..d]);
            y[k] += 2.0 * h;
            field.eval_raw(&y[..d], &mut br[..d]);
            for m in 0..d {
                let dd = (bl[m] - 2.0 * b[m] + br[m]).abs() / (h * h);
                if dd.is_finite() {
                    second = second.max(dd);
                }
            }
        }
    }

    let torus = Lattice::torus(grid);
    for t in [field.plus(), field.minus()] {
        for flat in 0..torus.len() {
            torus.position(flat, &mut x[..d]);
            t.eval_raw(&x[..d], &mut b[..d]);
            check_finite(&b[..d], &x[..d])?;
            for j in 0..d {
                y[..d].copy_from_slice(&x[..d]);
                y[j] += 1.0;
                t.eval_raw(&y[..d], &mut c[..d]);
                periodicity = periodicity.max(max_diff(&b[..d], &c[..d]));
            }
        }
    }

    Ok(ValidationReport {
        periodicity_violation: periodicity,
        tail_violation: tail,
        sup_norm: sup,
        max_second_difference: second,
        passed: periodicity < VALIDATION_TOLERANCE && tail < VALIDATION_TOLERANCE,
    })
}

/// Drift values sampled at the strip nodes `(-K_s, K_s) x T^{d-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftTable {
    pub dimension: usize,
    /// Node coordinates, `dimension` entries per node.
    pub positions: Vec<f64>,
    /// Drift values, `dimension` entries per node.
    pub values: Vec<f64>,
}

impl DriftTable {
    pub fn len(&self) -> usize {
        self.values.len() / self.dimension
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn position(&self, node: usize) -> &[f64] {
        &self.positions[node * self.dimension..(node + 1) * self.dimension]
    }

    pub fn value(&self, node: usize) -> &[f64] {
        &self.values[node * self.dimension..(node + 1) * self.dimension]
    }

    /// CSV with header `x1,...,xd,b1,...,bd`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let d = self.dimension;
        let mut wtr = csv::Writer::from_writer(w);
        let header: Vec<String> = (1..=d)
            .map(|k| format!("x{k}"))
            .chain((1..=d).map(|k| format!("b{k}")))
            .collect();
        wtr.write_record(&header)?;
        for node in 0..self.len() {
            let row: Vec<String> = self
                .position(node)
                .iter()
                .chain(self.value(node))
                .map(|v| format!("{v:.17e}"))
                .collect();
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Samples `field` at every strip node of `grid`.
pub fn sample_on_grid(field: &InterfaceDrift, grid: &GridSpec) -> Result<DriftTable> {
    let d = field.dimension();
    if grid.dimension() != d {
        return Err(HomogError::InvalidGrid(format!(
            "grid dimension {} differs from field dimension {d}",
            grid.dimension()
        )));
    }
    let lattice = Lattice::strip(grid, 0);
    let mut positions = vec![0.0; lattice.len() * d];
    let mut values = vec![0.0; lattice.len() * d];
    for flat in 0..lattice.len() {
        let x = &mut positions[flat * d..(flat + 1) * d];
        lattice.position(flat, x);
        field.eval(x, &mut values[flat * d..(flat + 1) * d]);
    }
    Ok(DriftTable {
        dimension: d,
        positions,
        values,
    })
}
