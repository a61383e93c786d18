//! Euler–Maruyama simulation of the rescaled process
//! `dX = ε⁻¹ b(X/ε) dt + dB` and the interface statistics read off its paths.
//!
//! Every path draws from its own stream ([`crate::rng::path_rng`]) and
//! per-path results are collected in path order before they are summed, so
//! estimates do not depend on the number of worker threads.

use std::io::Write;

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::effective_model::Compensator;
use crate::error::{HomogError, Result};
use crate::field::InterfaceDrift;
use crate::grid::MAX_DIM;
use crate::rng::path_rng;
use crate::stats::{CompensatedSum, Estimate};
use crate::strip_measure::Side;

/// Default step as a multiple of `ε²`.
pub const STEP_FACTOR: f64 = 0.05;
/// Largest accepted user step as a multiple of `ε²`.
pub const MAX_STEP_FACTOR: f64 = 0.1;
/// Cap-hit fraction above which exit estimates carry a warning.
pub const CAP_WARNING_FRACTION: f64 = 0.01;

/// Time step for scale `eps`: `min(dt, 0.05 ε²)`. A requested step above
/// `0.1 ε²` is refused.
pub fn step_size(eps: f64, dt: Option<f64>) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(HomogError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let default = STEP_FACTOR * eps * eps;
    match dt {
        None => Ok(default),
        Some(dt) if !(dt > 0.0 && dt.is_finite()) => {
            Err(HomogError::InvalidArgument(format!("dt must be positive, got {dt}")))
        }
        Some(dt) if dt > MAX_STEP_FACTOR * eps * eps => Err(HomogError::StepTooLarge {
            dt,
            eps,
            suggested: default,
        }),
        Some(dt) => Ok(dt.min(default)),
    }
}

/// Which states of a path are stored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Recording {
    /// Initial and final state only.
    #[default]
    Final,
    /// Every `k`-th step, plus the final state.
    Stride(usize),
}

impl Recording {
    /// Step indices at which states are recorded, for a run of `steps`.
    pub fn record_steps(self, steps: usize) -> Vec<usize> {
        let stride = match self {
            Recording::Final => steps.max(1),
            Recording::Stride(k) => k.max(1),
        };
        let mut out: Vec<usize> = (0..=steps).step_by(stride).collect();
        if *out.last().expect("step 0 is always recorded") != steps {
            out.push(steps);
        }
        out
    }
}

/// Discretized paths of a process in `R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    pub dimension: usize,
    pub eps: f64,
    pub dt: f64,
    pub seed: u64,
    pub times: Vec<f64>,
    /// `states[path]` holds the recorded states back to back.
    pub states: Vec<Vec<f64>>,
}

impl PathEnsemble {
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

    /// Component `k` of every path at the last recorded time.
    pub fn final_component(&self, k: usize) -> Vec<f64> {
        let last = self.n_records() - 1;
        (0..self.n_paths()).map(|p| self.state(p, last)[k]).collect()
    }

    /// CSV with header `path,t,x1..xd`, keeping every `thin`-th record (the
    /// last record is always kept).
    pub fn write_csv<W: Write>(&self, w: W, thin: usize) -> Result<()> {
        write_paths_csv(
            w,
            self.dimension,
            &self.times,
            thin,
            self.n_paths(),
            &[],
            |p, r, row| {
                row.extend(self.state(p, r).iter().map(|v| v.to_string()));
            },
        )
    }
}

/// Shared CSV layout of path ensembles: `path,t,x1..xd` followed by
/// `extra` columns.
pub(crate) fn write_paths_csv<W: Write>(
    w: W,
    d: usize,
    times: &[f64],
    thin: usize,
    n_paths: usize,
    extra: &[&str],
    row: impl Fn(usize, usize, &mut Vec<String>),
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["path".to_string(), "t".to_string()];
    header.extend((1..=d).map(|k| format!("x{k}")));
    header.extend(extra.iter().map(|s| s.to_string()));
    out.write_record(&header)?;
    let thin = thin.max(1);
    let last = times.len() - 1;
    for p in 0..n_paths {
        for (r, t) in times.iter().enumerate() {
            if r % thin != 0 && r != last {
                continue;
            }
            let mut rec = vec![p.to_string(), t.to_string()];
            row(p, r, &mut rec);
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// One Euler–Maruyama step of the rescaled dynamics.
#[derive(Clone, Copy)]
struct Stepper<'a> {
    field: &'a InterfaceDrift,
    d: usize,
    inv_eps: f64,
    dt: f64,
    sqdt: f64,
}

impl<'a> Stepper<'a> {
    fn new(field: &'a InterfaceDrift, eps: f64, dt: f64) -> Self {
        Self {
            field,
            d: field.dimension(),
            inv_eps: 1.0 / eps,
            dt,
            sqdt: dt.sqrt(),
        }
    }

    /// `ε⁻¹ b(x/ε)`.
    #[inline]
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let mut y = [0.0; MAX_DIM];
        for k in 0..self.d {
            y[k] = x[k] * self.inv_eps;
        }
        self.field.eval(&y[..self.d], &mut out[..self.d]);
        for o in out[..self.d].iter_mut() {
            *o *= self.inv_eps;
        }
    }

    #[inline]
    fn step<R: Rng>(&self, x: &mut [f64], rng: &mut R) {
        let mut b = [0.0; MAX_DIM];
        self.drift(x, &mut b);
        for k in 0..self.d {
            let z: f64 = rng.sample(StandardNormal);
            x[k] += b[k] * self.dt + self.sqdt * z;
        }
    }
}

fn check_start(field: &InterfaceDrift, x0: &[f64]) -> Result<()> {
    if x0.len() != field.dimension() {
        return Err(HomogError::InvalidArgument(format!(
            "starting point has {} components, field has dimension {}",
            x0.len(),
            field.dimension()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(HomogError::InvalidArgument("starting point must be finite".into()));
    }
    Ok(())
}

fn check_paths(n: usize) -> Result<()> {
    if n == 0 {
        return Err(HomogError::InvalidArgument("need at least one path".into()));
    }
    Ok(())
}

/// Simulates `n` paths of `X^ε` on `[0, t_final]` started at `x0`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_eps(
    field: &InterfaceDrift,
    eps: f64,
    x0: &[f64],
    t_final: f64,
    dt: Option<f64>,
    n: usize,
    seed: u64,
    recording: Recording,
) -> Result<PathEnsemble> {
    check_start(field, x0)?;
    check_paths(n)?;
    if !(t_final > 0.0 && t_final.is_finite()) {
        return Err(HomogError::InvalidArgument(format!(
            "horizon must be positive, got {t_final}"
        )));
    }
    let max_dt = step_size(eps, dt)?;
    let steps = (t_final / max_dt).ceil() as usize;
    let dt = t_final / steps as f64;
    let stepper = Stepper::new(field, eps, dt);
    let record = recording.record_steps(steps);
    let times: Vec<f64> = record.iter().map(|&s| s as f64 * dt).collect();
    let d = field.dimension();
    let states: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let mut x = [0.0; MAX_DIM];
            x[..d].copy_from_slice(x0);
            let mut out = Vec::with_capacity(record.len() * d);
            out.extend_from_slice(&x[..d]);
            let mut done = 0;
            for &target in &record[1..] {
                while done < target {
                    stepper.step(&mut x[..d], &mut rng);
                    done += 1;
                }
                out.extend_from_slice(&x[..d]);
            }
            out
        })
        .collect();
    Ok(PathEnsemble {
        dimension: d,
        eps,
        dt,
        seed,
        times,
        states,
    })
}

/// `Y^ε = X^ε + ε g(X^ε/ε)` along every recorded state.
pub fn corrected_paths(ensemble: &PathEnsemble, compensator: &Compensator) -> PathEnsemble {
    let d = ensemble.dimension;
    let eps = ensemble.eps;
    let states = ensemble
        .states
        .par_iter()
        .map(|path| {
            let mut out = path.clone();
            let mut y = [0.0; MAX_DIM];
            let mut g = [0.0; MAX_DIM];
            for x in out.chunks_exact_mut(d) {
                for k in 0..d {
                    y[k] = x[k] / eps;
                }
                compensator.eval(&y[..d], &mut g[..d]);
                for k in 0..d {
                    x[k] += eps * g[k];
                }
            }
            out
        })
        .collect();
    PathEnsemble {
        states,
        ..ensemble.clone()
    }
}

/// Controls for runs stopped at the first exit from a slab `|x₁| < δ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitOptions {
    /// Requested step; the step rule of [`step_size`] applies.
    pub dt: Option<f64>,
    /// Paths still inside the slab at this time are counted as capped.
    pub horizon: f64,
}

impl ExitOptions {
    /// Horizon `50 δ² / min(D⁺₁₁, D⁻₁₁)`.
    pub fn for_slab(delta: f64, min_d11: f64) -> Self {
        Self {
            dt: None,
            horizon: exit_horizon(delta, min_d11),
        }
    }
}

pub fn exit_horizon(delta: f64, min_d11: f64) -> f64 {
    50.0 * delta * delta / min_d11
}

struct ExitOutcome {
    side: Option<Side>,
    /// State at the interpolated crossing (or at the cap).
    state: [f64; MAX_DIM],
}

/// Runs one path until `|x₁| >= delta` or `max_steps` steps. `visit` sees the
/// state at the start of every step.
fn run_to_exit<R: Rng>(
    stepper: &Stepper<'_>,
    x0: &[f64],
    delta: f64,
    max_steps: usize,
    rng: &mut R,
    mut visit: impl FnMut(&[f64]),
) -> ExitOutcome {
    let d = stepper.d;
    let mut x = [0.0; MAX_DIM];
    x[..d].copy_from_slice(x0);
    let mut prev = x;
    for _ in 0..max_steps {
        visit(&x[..d]);
        prev[..d].copy_from_slice(&x[..d]);
        stepper.step(&mut x[..d], rng);
        if x[0].abs() >= delta {
            let (side, level) = if x[0] > 0.0 {
                (Side::Plus, delta)
            } else {
                (Side::Minus, -delta)
            };
            let theta = ((level - prev[0]) / (x[0] - prev[0])).clamp(0.0, 1.0);
            let mut state = [0.0; MAX_DIM];
            for k in 0..d {
                state[k] = prev[k] + theta * (x[k] - prev[k]);
            }
            state[0] = level;
            return ExitOutcome {
                side: Some(side),
                state,
            };
        }
    }
    ExitOutcome { side: None, state: x }
}

fn check_slab(field: &InterfaceDrift, eps: f64, x0: &[f64], delta: f64) -> Result<()> {
    check_start(field, x0)?;
    if delta < 10.0 * eps {
        return Err(HomogError::InvalidArgument(format!(
            "slab half-width {delta} must be at least 10 eps = {}",
            10.0 * eps
        )));
    }
    let limit = eps * field.half_width();
    if x0[0].abs() > limit * (1.0 + 1e-12) {
        return Err(HomogError::InvalidArgument(format!(
            "start x1 = {} lies outside the interface strip |x1| <= {limit}",
            x0[0]
        )));
    }
    Ok(())
}

fn cap_warning(capped: usize, n: usize) -> Option<String> {
    let frac = capped as f64 / n as f64;
    (frac > CAP_WARNING_FRACTION)
        .then(|| format!("{capped} of {n} paths ({:.2}%) reached the horizon cap", 100.0 * frac))
}

/// Exit-side frequencies from one batch of paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitSideEstimate {
    pub plus: Estimate,
    pub minus: Estimate,
    pub plus_count: usize,
    pub minus_count: usize,
    pub capped: usize,
    pub cap_fraction: f64,
}

/// Frequency of exiting `(-δ, δ)` through `x₁ = δ`.
#[allow(clippy::too_many_arguments)]
pub fn exit_side_probability(
    field: &InterfaceDrift,
    eps: f64,
    x0: &[f64],
    delta: f64,
    n: usize,
    seed: u64,
    options: ExitOptions,
) -> Result<ExitSideEstimate> {
    check_slab(field, eps, x0, delta)?;
    check_paths(n)?;
    let dt = step_size(eps, options.dt)?;
    let stepper = Stepper::new(field, eps, dt);
    let max_steps = (options.horizon / dt).ceil() as usize;
    let sides: Vec<Option<Side>> = (0..n)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            run_to_exit(&stepper, x0, delta, max_steps, &mut rng, |_| {}).side
        })
        .collect();
    let plus_count = sides.iter().filter(|s| **s == Some(Side::Plus)).count();
    let minus_count = sides.iter().filter(|s| **s == Some(Side::Minus)).count();
    let capped = n - plus_count - minus_count;
    let warning = cap_warning(capped, n);
    let mut plus = Estimate::proportion(plus_count, n, "exit-side frequency");
    let mut minus = Estimate::proportion(minus_count, n, "exit-side frequency");
    plus.warning.clone_from(&warning);
    minus.warning = warning;
    Ok(ExitSideEstimate {
        plus,
        minus,
        plus_count,
        minus_count,
        capped,
        cap_fraction: capped as f64 / n as f64,
    })
}

/// `E ∫₀^∞ e^{-λt} 1{|X₁(t)| < δ} dt`, estimated by running each path up to
/// an independent `Exp(λ)` time and recording its occupation of the slab.
#[allow(clippy::too_many_arguments)]
pub fn discounted_occupation(
    field: &InterfaceDrift,
    eps: f64,
    delta: f64,
    lambda: f64,
    x0: &[f64],
    n: usize,
    seed: u64,
    dt: Option<f64>,
) -> Result<Estimate> {
    check_start(field, x0)?;
    check_paths(n)?;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(HomogError::InvalidArgument(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let dt = step_size(eps, dt)?;
    let stepper = Stepper::new(field, eps, dt);
    let d = field.dimension();
    let samples: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let kill: f64 = rng.sample::<f64, _>(Exp1) / lambda;
            let full = (kill / dt).floor() as usize;
            let tail = kill - full as f64 * dt;
            let mut x = [0.0; MAX_DIM];
            x[..d].copy_from_slice(x0);
            let mut inside = 0usize;
            for _ in 0..full {
                if x[0].abs() < delta {
                    inside += 1;
                }
                stepper.step(&mut x[..d], &mut rng);
            }
            let last = if x[0].abs() < delta { tail } else { 0.0 };
            inside as f64 * dt + last
        })
        .collect();
    Ok(Estimate::from_samples(&samples, "exponential killing"))
}

/// `E ∫₀^t 1{|X₁(s)| < δ} ds`.
#[allow(clippy::too_many_arguments)]
pub fn occupation_time(
    field: &InterfaceDrift,
    eps: f64,
    delta: f64,
    t: f64,
    x0: &[f64],
    n: usize,
    seed: u64,
    dt: Option<f64>,
) -> Result<Estimate> {
    check_start(field, x0)?;
    check_paths(n)?;
    let max_dt = step_size(eps, dt)?;
    let steps = (t / max_dt).ceil() as usize;
    let dt = t / steps as f64;
    let stepper = Stepper::new(field, eps, dt);
    let d = field.dimension();
    let samples: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let mut x = [0.0; MAX_DIM];
            x[..d].copy_from_slice(x0);
            let mut inside = 0usize;
            for _ in 0..steps {
                if x[0].abs() < delta {
                    inside += 1;
                }
                stepper.step(&mut x[..d], &mut rng);
            }
            inside as f64 * dt
        })
        .collect();
    Ok(Estimate::from_samples(&samples, "left-point occupation"))
}

/// Scaled moments of the displacement parallel to the interface at the
/// exit from the slab.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncrementMoments {
    /// `δ⁻¹ E[X_j(τ) - x_j]`, `j = 2..d`.
    pub first: Vec<Estimate>,
    /// `δ⁻² E|X̃(τ) - x̃|²`.
    pub second: Estimate,
    pub capped: usize,
}

/// Moments of `X̃(τ^δ) - x̃` over the paths that left the slab.
#[allow(clippy::too_many_arguments)]
pub fn interface_increment_moments(
    field: &InterfaceDrift,
    eps: f64,
    delta: f64,
    x0: &[f64],
    n: usize,
    seed: u64,
    options: ExitOptions,
) -> Result<IncrementMoments> {
    check_slab(field, eps, x0, delta)?;
    check_paths(n)?;
    let dt = step_size(eps, options.dt)?;
    let stepper = Stepper::new(field, eps, dt);
    let max_steps = (options.horizon / dt).ceil() as usize;
    let d = field.dimension();
    let outcomes: Vec<ExitOutcome> = (0..n)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            run_to_exit(&stepper, x0, delta, max_steps, &mut rng, |_| {})
        })
        .collect();
    let exited: Vec<&ExitOutcome> = outcomes.iter().filter(|o| o.side.is_some()).collect();
    let capped = n - exited.len();
    if exited.len() < 2 {
        return Err(HomogError::InvalidArgument("fewer than two paths left the slab".into()));
    }
    let warning = cap_warning(capped, n);
    let first = (1..d)
        .map(|j| {
            let s: Vec<f64> = exited.iter().map(|o| (o.state[j] - x0[j]) / delta).collect();
            let mut e = Estimate::from_samples(&s, "scaled exit displacement");
            e.warning.clone_from(&warning);
            e
        })
        .collect();
    let sq: Vec<f64> = exited
        .iter()
        .map(|o| (1..d).map(|j| (o.state[j] - x0[j]).powi(2)).sum::<f64>() / (delta * delta))
        .collect();
    let mut second = Estimate::from_samples(&sq, "scaled squared exit displacement");
    second.warning = warning;
    Ok(IncrementMoments { first, second, capped })
}

/// `n⁻¹ E ∫₀^{τⁿ} b(X_s) ds` for the unscaled process (`ε = 1`), `τⁿ` the
/// exit time from `|x₁| < n`; one estimate per drift component.
pub fn drift_estimate_nonrescaled(
    field: &InterfaceDrift,
    n_strip: usize,
    x0: &[f64],
    paths: usize,
    seed: u64,
    options: ExitOptions,
) -> Result<Vec<Estimate>> {
    check_start(field, x0)?;
    check_paths(paths)?;
    if n_strip < 8 {
        return Err(HomogError::InvalidArgument(format!("strip size {n_strip} below 8")));
    }
    if x0[0].abs() > field.half_width() {
        return Err(HomogError::InvalidArgument(format!(
            "start x1 = {} lies outside the interface strip",
            x0[0]
        )));
    }
    let dt = step_size(1.0, options.dt)?;
    let stepper = Stepper::new(field, 1.0, dt);
    let max_steps = (options.horizon / dt).ceil() as usize;
    let d = field.dimension();
    let scale = n_strip as f64;
    let per_path: Vec<(Vec<f64>, bool)> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let mut acc = vec![CompensatedSum::default(); d];
            let mut b = [0.0; MAX_DIM];
            let out = run_to_exit(&stepper, x0, scale, max_steps, &mut rng, |x| {
                stepper.drift(x, &mut b);
                for (a, v) in acc.iter_mut().zip(&b[..d]) {
                    a.add(v * dt);
                }
            });
            (acc.iter().map(|a| a.value() / scale).collect(), out.side.is_some())
        })
        .collect();
    let capped = per_path.iter().filter(|(_, ok)| !ok).count();
    let warning = cap_warning(capped, paths);
    Ok((0..d)
        .map(|k| {
            let s: Vec<f64> = per_path.iter().map(|(v, _)| v[k]).collect();
            let mut e = Estimate::from_samples(&s, "time-integrated drift");
            e.warning.clone_from(&warning);
            e
        })
        .collect())
}
