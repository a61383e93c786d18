//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::time::{Duration, Instant};

use homog_core::effective_model::{assemble_model, build_model, Blend, EffectiveModel};
use homog_core::eps_sim::{interface_increment_moments, ExitOptions, Recording};
use homog_core::field::{builtin_field, InterfaceDrift};
use homog_core::grid::GridSpec;
use homog_core::limit_sim::{
    martingale_residual, simulate_limit, simulate_skew_bm, QuadraticTestFunction, SkewBackend,
};
use homog_core::stats::ks_statistic;
use homog_core::torus_cell::{solve_cell, DiffusionTensor};
use homog_core::verify::{full_pipeline, ComparisonReport, SimSettings};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn field(name: &str, p: &[(&str, f64)]) -> InterfaceDrift {
    let params: BTreeMap<String, f64> = p.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    builtin_field(name, &params).unwrap()
}

fn grid2(res: usize, f: &InterfaceDrift) -> GridSpec {
    GridSpec::uniform(2, res, GridSpec::default_strip_half_width(f.half_width()))
}

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    s * h / 3.0
}

fn c1_zero_field() -> Outcome {
    let start = Instant::now();
    let f = field("zero", &[]);
    let m = build_model(&f, &grid2(64, &f), Blend::Symmetric).unwrap().model;
    let elapsed = start.elapsed();
    let id = DiffusionTensor::identity(2);
    let d_err = (0..2)
        .flat_map(|i| (0..2).map(move |j| (i, j)))
        .map(|(i, j)| {
            (m.d_plus.get(i, j) - id.get(i, j))
                .abs()
                .max((m.d_minus.get(i, j) - id.get(i, j)).abs())
        })
        .fold(0.0, f64::max);
    let q_err = (m.q_plus - 0.5).abs().max((m.q_minus - 0.5).abs());
    let p_err = (m.p_plus - 0.5).abs().max((m.p_minus - 0.5).abs());
    let sums = m.q_plus + m.q_minus == 1.0 && m.p_plus + m.p_minus == 1.0;
    let a_err = m.alpha.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let k_err = m.k.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let passed = d_err <= 1e-8
        && q_err <= 1e-12
        && p_err <= 1e-12
        && sums
        && a_err <= 1e-8
        && k_err <= 1e-8
        && elapsed < Duration::from_secs(60);
    outcome(
        passed,
        format!(
            "|D-I| {d_err:.1e}, |q-1/2| {q_err:.1e}, |p-1/2| {p_err:.1e}, sums exact {sums}, |alpha| {a_err:.1e}, |K| {k_err:.1e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn c2_shear_dispersion() -> Outcome {
    let f = field("torus_shear", &[("c", 1.0)]);
    let exact = 1.0 + 1.0 / (2.0 * PI * PI);
    let err = |res: usize| {
        let cell = solve_cell(f.plus(), &GridSpec::uniform(2, res, 9)).unwrap();
        (cell.tensor.get(1, 1) - exact).abs()
    };
    let (e32, e64, e128) = (err(32), err(64), err(128));
    let passed = e128 <= 1e-5 && e64 <= 0.5 * e32;
    outcome(
        passed,
        format!(
            "D22 error {e128:.2e} at 128 (64: {e64:.2e}, 32: {e32:.2e}; refinement ratio {:.1})",
            e32 / e64
        ),
    )
}

fn c3_two_integral() -> Outcome {
    let f = field("gradient1d", &[("amplitude", 1.0)]);
    let cell = solve_cell(f.plus(), &GridSpec::new(vec![256, 8], 9)).unwrap();
    let v = |x: f64| (2.0 * PI * x).cos();
    let a = simpson(|x| (2.0 * v(x)).exp(), 0.0, 1.0, 4000);
    let b = simpson(|x| (-2.0 * v(x)).exp(), 0.0, 1.0, 4000);
    let oracle = 1.0 / (a * b);
    let err = (cell.tensor.get(0, 0) - oracle).abs();
    outcome(
        err <= 1e-6,
        format!(
            "D11 {:.9} vs quadrature {oracle:.9}, error {err:.1e}",
            cell.tensor.get(0, 0)
        ),
    )
}

fn c4_paper_example() -> Outcome {
    let f = field("paper_shear", &[]);
    let m = build_model(&f, &grid2(64, &f), Blend::Symmetric).unwrap().model;
    let bump = |t: f64| {
        if t.abs() < 1.0 {
            (-1.0 / (1.0 - t * t)).exp()
        } else {
            0.0
        }
    };
    let integral = simpson(bump, -1.0, 1.0, 20_000);
    let p_err = (m.p_plus - 0.5).abs().max((m.p_minus - 0.5).abs());
    let a_err = (m.alpha[0] - integral).abs();
    let mom =
        interface_increment_moments(&f, 0.02, 0.4, &[0.0, 0.0], 10_000, 4, ExitOptions::for_slab(0.4, 1.0)).unwrap();
    let first = &mom.first[0];
    let z = (first.value - m.alpha[0]) / first.se;
    let passed = p_err <= 1e-6 && a_err <= 1e-6 && z.abs() <= 3.0 && mom.capped == 0;
    outcome(
        passed,
        format!(
            "|p-1/2| {p_err:.1e}, alpha2 {:.8} vs integral {integral:.8} ({a_err:.1e}); MC first moment {:.4} ± {:.4} ({z:+.2} SE)",
            m.alpha[0], first.value, first.se
        ),
    )
}

fn c7_skew_backends() -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for (i, p) in [0.3, 0.5, 0.7].into_iter().enumerate() {
        let g = simulate_skew_bm(
            p,
            1.0,
            6.25e-6,
            100_000,
            70 + i as u64,
            SkewBackend::GridWalk,
            Recording::Final,
        )
        .unwrap();
        let e = simulate_skew_bm(
            p,
            1.0,
            1e-3,
            100_000,
            80 + i as u64,
            SkewBackend::EulerMollified,
            Recording::Final,
        )
        .unwrap();
        let (zg, ze) = (g.final_z(), e.final_z());
        let ks = ks_statistic(&zg, &ze);
        let se = (p * (1.0 - p) / 1e5).sqrt();
        let zs: Vec<f64> = [&zg, &ze]
            .iter()
            .map(|z| (z.iter().filter(|v| **v > 0.0).count() as f64 / 1e5 - p) / se)
            .collect();
        passed &= ks < 0.01 && zs.iter().all(|z| z.abs() <= 3.0);
        parts.push(format!("p={p}: KS {ks:.4}, P(Z>0) {:+.2}/{:+.2} SE", zs[0], zs[1]));
    }
    outcome(passed, parts.join("; "))
}

fn checks<'a>(r: &'a ComparisonReport, prefix: &'a str) -> Vec<&'a homog_core::verify::Check> {
    r.section(prefix).collect()
}

fn c5_transmissivity(two_sided: &ComparisonReport) -> Outcome {
    let trend = checks(two_sided, "transmissivity_gap_trend");
    let last = checks(two_sided, "transmissivity_final");
    let passed = !trend.is_empty() && trend.iter().all(|c| c.passed) && last.len() == 1 && last[0].passed;
    let mut gaps: Vec<String> = trend.iter().take(1).map(|c| format!("{:.4}", c.predicted)).collect();
    gaps.extend(trend.iter().map(|c| format!("{:.4}", c.estimated)));
    let steps: Vec<String> = trend
        .iter()
        .map(|c| format!("{:+.4} <= {:.4}", c.estimated - c.predicted, 2.0 * c.se))
        .collect();
    outcome(
        passed,
        format!(
            "|p_hat - p+| {} (each step may rise by at most 2 combined SE: {}); at eps=0.025 p_hat {:.4} ± {:.4} vs p+ {:.4} (3 SE)",
            gaps.join(", "),
            steps.join(", "),
            last[0].estimated,
            last[0].se,
            last[0].predicted
        ),
    )
}

/// `u(0)` for `λu - ½u'' = 1{|x|<δ}` by second-order finite differences on
/// `[-R, R]` with `u(±R) = 0`.
fn resolvent_oracle(delta: f64, lambda: f64) -> f64 {
    let r = 12.0;
    let n = 240_001usize;
    let h = 2.0 * r / (n - 1) as f64;
    let x = |i: usize| -r + i as f64 * h;
    // tridiagonal (Thomas) solve on interior nodes
    let m = n - 2;
    let diag = lambda + 1.0 / (h * h);
    let off = -0.5 / (h * h);
    let rhs: Vec<f64> = (1..=m).map(|i| if x(i).abs() < delta { 1.0 } else { 0.0 }).collect();
    let mut c = vec![0.0; m];
    let mut d = vec![0.0; m];
    c[0] = off / diag;
    d[0] = rhs[0] / diag;
    for i in 1..m {
        let den = diag - off * c[i - 1];
        c[i] = off / den;
        d[i] = (rhs[i] - off * d[i - 1]) / den;
    }
    let mut u = vec![0.0; m];
    u[m - 1] = d[m - 1];
    for i in (0..m - 1).rev() {
        u[i] = d[i] - c[i] * u[i + 1];
    }
    u[(n - 1) / 2 - 1]
}

fn c6_occupation(reports: &[&ComparisonReport], zero: &ComparisonReport) -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for r in reports {
        let dec = checks(r, "occupation_decrease");
        passed &= !dec.is_empty() && dec.iter().all(|c| c.passed);
        let vals: Vec<String> = std::iter::once(dec[0].predicted)
            .chain(dec.iter().map(|c| c.estimated))
            .map(|v| format!("{v:.4}"))
            .collect();
        parts.push(format!("{} {}", r.field, vals.join(">")));
    }
    for c in checks(zero, "occupation_brownian") {
        let u = resolvent_oracle(c.params["delta"], 1.0);
        let z = (c.estimated - u) / c.se;
        passed &= z.abs() <= 3.0;
        parts.push(format!(
            "zero eps={}: {:.4} vs oracle {u:.4} ({z:+.2} SE)",
            c.params["eps"], c.estimated
        ));
    }
    outcome(passed, parts.join("; "))
}

fn c8_martingale(zero: &ComparisonReport, shear: &ComparisonReport) -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for r in [zero, shear] {
        let c = checks(r, "martingale_residual");
        passed &= c.len() == 1 && c[0].passed;
        parts.push(format!("{}: {:.4} ± {:.4}", r.field, c[0].estimated, c[0].se));
    }
    // asymmetric reference model, p+ = 2/3
    let model = assemble_model(
        DiffusionTensor::diagonal(&[2.0, 1.0]),
        DiffusionTensor::identity(2),
        0.5,
        0.5,
        vec![0.0],
    )
    .unwrap();
    let f = QuadraticTestFunction::glued(&model, 1.0, vec![0.0], -1.0, 1.0);
    let stride = 160;
    let run = |m: &EffectiveModel, seed: u64| {
        let ens = simulate_limit(
            m,
            &[0.0, 0.0],
            1.0,
            6.25e-6,
            10_000,
            seed,
            SkewBackend::GridWalk,
            Recording::Stride(stride),
        )
        .unwrap();
        martingale_residual(&ens, &model, &f, 1.0).unwrap()
    };
    let good = run(&model, 91);
    let swapped = run(&model.with_swapped_transmissivity().unwrap(), 92);
    passed &= good.value.abs() <= 3.0 * good.se && swapped.value.abs() > 3.0 * swapped.se;
    parts.push(format!(
        "asymmetric model {:.4} ± {:.4}; swapped p {:.4} ± {:.4} ({:.1} SE)",
        good.value,
        good.se,
        swapped.value,
        swapped.se,
        swapped.value / swapped.se
    ));
    outcome(passed, parts.join("; "))
}

fn c9_marginals(reports: &[&ComparisonReport], elapsed: Duration) -> Outcome {
    let mut passed = elapsed < Duration::from_secs(30 * 60);
    let mut parts = Vec::new();
    for r in reports {
        let trend = checks(r, "marginal_ks_trend");
        let fin = checks(r, "marginal_ks_final");
        passed &= !trend.is_empty() && trend.iter().all(|c| c.passed) && fin.len() == 2 && fin.iter().all(|c| c.passed);
        let per: Vec<String> = fin
            .iter()
            .map(|c| {
                let coord = &c.name["marginal_ks_final".len()..];
                let seq: Vec<String> = trend
                    .iter()
                    .filter(|t| t.name.ends_with(coord))
                    .enumerate()
                    .flat_map(|(i, t)| {
                        if i == 0 {
                            vec![t.predicted, t.estimated]
                        } else {
                            vec![t.estimated]
                        }
                    })
                    .map(|v| format!("{v:.4}"))
                    .collect();
                format!("{coord} {}", seq.join(","))
            })
            .collect();
        parts.push(format!("{} {}", r.field, per.join(" ")));
    }
    parts.push("non-increasing within 2 combined SE, final < 0.05".into());
    parts.push(format!("suite {:.0}s", elapsed.as_secs_f64()));
    outcome(passed, parts.join("; "))
}

fn c10_blend_invariance() -> Outcome {
    let mut passed = true;
    let mut worst = 0.0f64;
    for name in ["zero", "paper_shear", "torus_shear", "gradient1d", "two_sided"] {
        let f = field(name, &[]);
        let g = grid2(64, &f);
        let a = build_model(&f, &g, Blend::Symmetric).unwrap().model.alpha;
        let b = build_model(&f, &g, Blend::Skewed).unwrap().model.alpha;
        for (x, y) in a.iter().zip(&b) {
            // relative to |alpha|, with an absolute floor of 1e-12 for alpha = 0
            let rel = (x - y).abs() / x.abs().max(1e-6);
            worst = worst.max(rel);
            passed &= rel <= 1e-6;
        }
    }
    outcome(passed, format!("largest relative change of alpha {worst:.1e}"))
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, title: &'static str, o: Outcome| {
        println!(
            "criterion {n:2} [{}] {title}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, title, o));
    };
    report(1, "zero-field identity", c1_zero_field());
    report(2, "shear-dispersion oracle", c2_shear_dispersion());
    report(3, "two-integral oracle", c3_two_integral());
    report(10, "compensator invariance", c10_blend_invariance());
    report(4, "shear example", c4_paper_example());
    report(7, "skew-BM backend agreement", c7_skew_backends());

    let settings = SimSettings::default();
    let start = Instant::now();
    let mut pipelines = Vec::new();
    for name in ["zero", "paper_shear", "two_sided"] {
        let f = field(name, &[]);
        let out = full_pipeline(&f, &grid2(64, &f), Blend::Symmetric, &settings, None).unwrap();
        pipelines.push(out.report);
    }
    let elapsed = start.elapsed();
    let (zero, shear, two) = (&pipelines[0], &pipelines[1], &pipelines[2]);
    report(5, "transmissivity convergence", c5_transmissivity(two));
    report(6, "occupation-time decay", c6_occupation(&[zero, shear, two], zero));
    report(8, "limit martingale property", c8_martingale(zero, shear));
    report(
        9,
        "weak-convergence marginals",
        c9_marginals(&[zero, shear, two], elapsed),
    );

    results.sort_by_key(|r| r.0);
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
