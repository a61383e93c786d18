//! Simulation of the limit process: a skew Brownian motion `Z` with
//! parameter `p = skew_p` drives the normal coordinate through
//! `X̄₁ = g(Z)`, `g(z) = √D⁺₁₁ z` for `z > 0` and `√D⁻₁₁ z` otherwise, while
//! the remaining coordinates pick up `M±` noise and the drift `α dL`.
//!
//! Local times are symmetric: `L̂` is the local time of `Z` with
//! `|Z| - L̂` a martingale, and `L = (√D⁺₁₁ p + √D⁻₁₁ (1-p)) L̂` is that of
//! `X̄₁`. The martingale part of `Z` is recovered as `W = Z - (2p-1) L̂`.

use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::effective_model::{gluing_residual, EffectiveModel, GluingTestFunction};
use crate::eps_sim::{write_paths_csv, Recording};
use crate::error::{HomogError, Result};
use crate::grid::MAX_DIM;
use crate::rng::path_rng;
use crate::stats::{CompensatedSum, Estimate};

/// Largest gluing residual of an admissible test function.
pub const GLUING_TOLERANCE: f64 = 1e-12;

/// Discretization of the skew Brownian motion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkewBackend {
    /// Walk on `hℤ` with time step `h²`, biased only at 0. The step count is
    /// odd, so a walk from 0 never ends at 0.
    #[default]
    GridWalk,
    /// Exact reflected Brownian steps for `|Z|` with a fresh excursion sign
    /// whenever the step may have touched 0.
    EulerMollified,
}

impl SkewBackend {
    pub fn as_str(self) -> &'static str {
        match self {
            SkewBackend::GridWalk => "grid_walk",
            SkewBackend::EulerMollified => "euler_mollified",
        }
    }
}

impl FromStr for SkewBackend {
    type Err = HomogError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid_walk" => Ok(SkewBackend::GridWalk),
            "euler_mollified" => Ok(SkewBackend::EulerMollified),
            other => Err(HomogError::InvalidArgument(format!(
                "unknown backend `{other}` (expected grid_walk or euler_mollified)"
            ))),
        }
    }
}

/// One step (or leap) of the driving motion.
#[derive(Clone, Copy, Debug)]
struct Increment {
    z0: f64,
    z1: f64,
    /// Increment of `L̂`.
    dl: f64,
    dt: f64,
}

#[derive(Clone, Copy, Debug)]
enum Event {
    Step(Increment),
    /// The path reached the next record point.
    Record,
}

/// Step count and step length of a run on `[0, t_final]`.
#[derive(Clone, Copy, Debug)]
struct Schedule {
    backend: SkewBackend,
    steps: usize,
    dt: f64,
}

impl Schedule {
    fn new(backend: SkewBackend, t_final: f64, dt: f64) -> Result<Self> {
        if !(t_final > 0.0 && t_final.is_finite()) {
            return Err(HomogError::InvalidArgument(format!(
                "horizon must be positive, got {t_final}"
            )));
        }
        if !(dt > 0.0 && dt <= t_final) {
            return Err(HomogError::InvalidArgument(format!(
                "step {dt} must lie in (0, {t_final}]"
            )));
        }
        let mut steps = (t_final / dt).ceil() as usize;
        if backend == SkewBackend::GridWalk && steps.is_multiple_of(2) {
            steps += 1;
        }
        Ok(Self {
            backend,
            steps,
            dt: t_final / steps as f64,
        })
    }

    fn spacing(&self) -> f64 {
        self.dt.sqrt()
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(HomogError::InvalidArgument(format!("skew parameter {p} outside (0,1)")));
    }
    Ok(())
}

/// Number of heads in `m` fair coin flips, as the popcount of `m` random
/// bits for moderate `m`.
fn binomial_half<R: Rng>(m: usize, rng: &mut R) -> u64 {
    if m > 4096 {
        return Binomial::new(m as u64, 0.5).expect("valid binomial").sample(rng);
    }
    let mut left = m;
    let mut heads = 0u64;
    while left >= 64 {
        heads += u64::from(rng.random::<u64>().count_ones());
        left -= 64;
    }
    if left > 0 {
        heads += u64::from((rng.random::<u64>() & ((1u64 << left) - 1)).count_ones());
    }
    heads
}

/// Drives one path from `z0` through the recorded step indices `record`
/// (starting with 0), reporting every step or leap and every record point
/// after the first.
fn drive<R: Rng>(schedule: &Schedule, p: f64, z0: f64, record: &[usize], rng: &mut R, mut on: impl FnMut(Event)) {
    match schedule.backend {
        SkewBackend::GridWalk => {
            let h = schedule.spacing();
            let mut k = (z0 / h).round() as i64;
            let mut step = 0usize;
            for &target in &record[1..] {
                while step < target {
                    let z = k as f64 * h;
                    if k == 0 {
                        k = if rng.random::<f64>() < p { 1 } else { -1 };
                        step += 1;
                        on(Event::Step(Increment {
                            z0: z,
                            z1: k as f64 * h,
                            dl: h,
                            dt: schedule.dt,
                        }));
                    } else {
                        // no visit to 0 before the last of these m steps
                        let m = (k.unsigned_abs() as usize).min(target - step);
                        let up = binomial_half(m, rng);
                        k += 2 * up as i64 - m as i64;
                        step += m;
                        on(Event::Step(Increment {
                            z0: z,
                            z1: k as f64 * h,
                            dl: 0.0,
                            dt: m as f64 * schedule.dt,
                        }));
                    }
                }
                on(Event::Record);
            }
        }
        SkewBackend::EulerMollified => {
            let dt = schedule.dt;
            let sq = dt.sqrt();
            let mut z = z0;
            let mut step = 0usize;
            for &target in &record[1..] {
                while step < target {
                    let y = z.abs();
                    let xi: f64 = rng.sample(StandardNormal);
                    let y1 = y + sq * xi;
                    let hit = y1 <= 0.0 || rng.random::<f64>() < (-2.0 * y * y1 / dt).exp();
                    let sign = if hit {
                        if rng.random::<f64>() < p {
                            1.0
                        } else {
                            -1.0
                        }
                    } else if z > 0.0 {
                        1.0
                    } else {
                        -1.0
                    };
                    let z1 = sign * y1.abs();
                    let dl = if y < sq { 0.5 * sq } else { 0.0 };
                    on(Event::Step(Increment { z0: z, z1, dl, dt }));
                    z = z1;
                    step += 1;
                }
                on(Event::Record);
            }
        }
    }
}

/// Paths of the skew Brownian motion `Z` started at 0, with its symmetric
/// local time `L̂` and martingale part `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkewEnsemble {
    pub p: f64,
    pub backend: SkewBackend,
    /// Time step of the walk or of the Gaussian scheme.
    pub dt: f64,
    pub seed: u64,
    pub times: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    pub local_time: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
}

impl SkewEnsemble {
    pub fn n_paths(&self) -> usize {
        self.z.len()
    }

    pub fn final_z(&self) -> Vec<f64> {
        self.z.iter().map(|v| *v.last().expect("non-empty path")).collect()
    }

    pub fn final_local_time(&self) -> Vec<f64> {
        self.local_time
            .iter()
            .map(|v| *v.last().expect("non-empty path"))
            .collect()
    }
}

/// Simulates `n` skew Brownian paths on `[0, t_final]`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_skew_bm(
    p: f64,
    t_final: f64,
    dt: f64,
    n: usize,
    seed: u64,
    backend: SkewBackend,
    recording: Recording,
) -> Result<SkewEnsemble> {
    check_p(p)?;
    if n == 0 {
        return Err(HomogError::InvalidArgument("need at least one path".into()));
    }
    let schedule = Schedule::new(backend, t_final, dt)?;
    let record = recording.record_steps(schedule.steps);
    let times: Vec<f64> = record.iter().map(|&s| s as f64 * schedule.dt).collect();
    let paths: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i as u64);
            let (mut z, mut l, mut w) = (0.0, CompensatedSum::default(), CompensatedSum::default());
            let mut zs = vec![0.0];
            let mut ls = vec![0.0];
            let mut ws = vec![0.0];
            drive(&schedule, p, 0.0, &record, &mut rng, |e| match e {
                Event::Step(s) => {
                    z = s.z1;
                    l.add(s.dl);
                    w.add(s.z1 - s.z0 - (2.0 * p - 1.0) * s.dl);
                }
                Event::Record => {
                    zs.push(z);
                    ls.push(l.value());
                    ws.push(w.value());
                }
            });
            (zs, ls, ws)
        })
        .collect();
    let mut z = Vec::with_capacity(n);
    let mut local_time = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for (a, b, c) in paths {
        z.push(a);
        local_time.push(b);
        w.push(c);
    }
    Ok(SkewEnsemble {
        p,
        backend,
        dt: schedule.dt,
        seed,
        times,
        z,
        local_time,
        w,
    })
}

/// `g(z)`: `√D⁺₁₁ z` for `z > 0`, `√D⁻₁₁ z` otherwise.
pub fn normal_map(model: &EffectiveModel, z: f64) -> f64 {
    if z > 0.0 {
        model.m_plus[0][0] * z
    } else {
        model.m_minus[0][0] * z
    }
}

/// Factor converting the local time of `Z` into that of `X̄₁`.
pub fn local_time_factor(model: &EffectiveModel) -> f64 {
    let p = model.skew_p;
    model.m_plus[0][0] * p + model.m_minus[0][0] * (1.0 - p)
}

/// Paths of the limit process with the local time of `X̄₁`.
#[derive(Clone, Debug, PartialEq)]
pub struct LimitEnsemble {
    pub dimension: usize,
    pub model: EffectiveModel,
    pub backend: SkewBackend,
    pub dt: f64,
    pub seed: u64,
    pub times: Vec<f64>,
    /// Recorded states back to back, `dimension` values per record.
    pub states: Vec<Vec<f64>>,
    /// Local time of `X̄₁` at every record.
    pub local_time: Vec<Vec<f64>>,
    /// The driving skew Brownian motion at every record.
    pub z: Vec<Vec<f64>>,
}

impl LimitEnsemble {
    pub fn n_paths(&self) -> usize {
        self.states.len()
    }

    pub fn n_records(&self) -> usize {
        self.times.len()
    }

    pub fn state(&self, path: usize, record: usize) -> &[f64] {
        let d = self.dimension;
        &self.states[path][record * d..(record + 1) * d]
    }

    pub fn final_component(&self, k: usize) -> Vec<f64> {
        let last = self.n_records() - 1;
        (0..self.n_paths()).map(|p| self.state(p, last)[k]).collect()
    }

    /// CSV with header `path,t,x1..xd,L`.
    pub fn write_csv<W: Write>(&self, w: W, thin: usize) -> Result<()> {
        write_paths_csv(
            w,
            self.dimension,
            &self.times,
            thin,
            self.n_paths(),
            &["L"],
            |p, r, row| {
                row.extend(self.state(p, r).iter().map(|v| v.to_string()));
                row.push(self.local_time[p][r].to_string());
            },
        )
    }
}

/// Simulates `n` paths of the limit process started at `x0`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_limit(
    model: &EffectiveModel,
    x0: &[f64],
    t_final: f64,
    dt: f64,
    n: usize,
    seed: u64,
    backend: SkewBackend,
    recording: Recording,
) -> Result<LimitEnsemble> {
    model.validate()?;
    let d = model.dimension();
    if x0.len() != d || x0.iter().any(|v| !v.is_finite()) {
        return Err(HomogError::InvalidArgument(format!(
            "starting point must have {d} finite components"
        )));
    }
    if n == 0 {
        return Err(HomogError::InvalidArgument("need at least one path".into()));
    }
    let schedule = Schedule::new(backend, t_final, dt)?;
    let record = recording.record_steps(schedule.steps);
    let times: Vec<f64> = record.iter().map(|&s| s as f64 * schedule.dt).collect();
    let p = model.skew_p;
    let (a, b) = (model.m_plus[0][0], model.m_minus[0][0]);
    let z0 = if x0[0] > 0.0 { x0[0] / a } else { x0[0] / b };
    let c = local_time_factor(model);
    let paths: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i as u64);
            let mut noise = path_rng(seed, (i as u64) | (1 << 63));
            let mut x = [0.0; MAX_DIM];
            x[..d].copy_from_slice(x0);
            let mut l = CompensatedSum::default();
            let mut z = z0;
            let mut xs = Vec::with_capacity(record.len() * d);
            xs.extend_from_slice(x0);
            let mut ls = vec![0.0];
            let mut zs = vec![z0];
            drive(&schedule, p, z0, &record, &mut rng, |e| match e {
                Event::Step(s) => {
                    let m = if s.z0 > 0.0 { &model.m_plus } else { &model.m_minus };
                    let dw = s.z1 - s.z0 - (2.0 * p - 1.0) * s.dl;
                    let dlx = c * s.dl;
                    let sq = s.dt.sqrt();
                    let mut xi = [0.0; MAX_DIM];
                    for v in xi[1..d].iter_mut() {
                        *v = sq * noise.sample::<f64, _>(StandardNormal);
                    }
                    for j in 1..d {
                        let mut dx = m[j][0] * dw + model.alpha[j - 1] * dlx;
                        for k in 1..d {
                            dx += m[j][k] * xi[k];
                        }
                        x[j] += dx;
                    }
                    x[0] = if s.z1 > 0.0 { a * s.z1 } else { b * s.z1 };
                    l.add(dlx);
                    z = s.z1;
                }
                Event::Record => {
                    xs.extend_from_slice(&x[..d]);
                    ls.push(l.value());
                    zs.push(z);
                }
            });
            (xs, ls, zs)
        })
        .collect();
    let mut states = Vec::with_capacity(n);
    let mut local_time = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for (x, l, zz) in paths {
        states.push(x);
        local_time.push(l);
        z.push(zz);
    }
    Ok(LimitEnsemble {
        dimension: d,
        model: model.clone(),
        backend,
        dt: schedule.dt,
        seed,
        times,
        states,
        local_time,
        z,
    })
}

/// `f(x) = φ±(x₁) + Σ β_j x_j` with `φ±(x₁) = s± x₁ + ½ k± x₁²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticTestFunction {
    /// Slopes `s±` and tangential gradient `β`.
    pub gluing: GluingTestFunction,
    pub curvature_plus: f64,
    pub curvature_minus: f64,
}

impl QuadraticTestFunction {
    /// Test function whose plus slope satisfies the gluing condition of
    /// `model`.
    pub fn glued(
        model: &EffectiveModel,
        slope_minus: f64,
        beta: Vec<f64>,
        curvature_plus: f64,
        curvature_minus: f64,
    ) -> Self {
        Self {
            gluing: GluingTestFunction::glued(model, slope_minus, beta),
            curvature_plus,
            curvature_minus,
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let g = &self.gluing;
        let normal = if x[0] > 0.0 {
            g.d1_plus * x[0] + 0.5 * self.curvature_plus * x[0] * x[0]
        } else {
            g.d1_minus * x[0] + 0.5 * self.curvature_minus * x[0] * x[0]
        };
        normal + g.tangential.iter().zip(&x[1..]).map(|(b, v)| b * v).sum::<f64>()
    }

    /// Limit generator away from the interface: `½ D±₁₁ k±`.
    pub fn generator(&self, model: &EffectiveModel, x: &[f64]) -> f64 {
        if x[0] > 0.0 {
            0.5 * model.d_plus.get(0, 0) * self.curvature_plus
        } else {
            0.5 * model.d_minus.get(0, 0) * self.curvature_minus
        }
    }
}

/// Sample mean of
/// `e^{-λT} f(X̄_T) - f(X̄_0) + ∫₀^T e^{-λs} (λf - L̄f)(X̄_s) ds`
/// with `L̄` the generator of `model` (the hypothesis under test; the
/// ensemble may come from a different model). The time integral uses the
/// trapezoidal rule on the recorded states.
pub fn martingale_residual(
    ensemble: &LimitEnsemble,
    model: &EffectiveModel,
    f: &QuadraticTestFunction,
    lambda: f64,
) -> Result<Estimate> {
    let r = gluing_residual(&f.gluing, model);
    if r.abs() > GLUING_TOLERANCE {
        return Err(HomogError::GluingViolated { residual: r });
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(HomogError::InvalidArgument(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    if ensemble.n_records() < 2 || f.gluing.tangential.len() + 1 != ensemble.dimension {
        return Err(HomogError::InvalidArgument(
            "ensemble needs at least two records and matching dimension".into(),
        ));
    }
    let times = &ensemble.times;
    let last = times.len() - 1;
    let samples: Vec<f64> = (0..ensemble.n_paths())
        .map(|p| {
            let g = |r: usize| {
                let x = ensemble.state(p, r);
                (-lambda * times[r]).exp() * (lambda * f.value(x) - f.generator(model, x))
            };
            let mut integral = CompensatedSum::default();
            let mut prev = g(0);
            for r in 1..=last {
                let cur = g(r);
                integral.add(0.5 * (prev + cur) * (times[r] - times[r - 1]));
                prev = cur;
            }
            (-lambda * times[last]).exp() * f.value(ensemble.state(p, last)) - f.value(ensemble.state(p, 0))
                + integral.value()
        })
        .collect();
    Ok(Estimate::from_samples(&samples, "discounted martingale residual"))
}
