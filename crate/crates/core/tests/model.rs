use std::collections::BTreeMap;
use std::f64::consts::PI;

use homog_core::config::RunConfig;
use homog_core::effective_model::{build_model, Blend};
use homog_core::field::builtin_field;
use homog_core::grid::GridSpec;
use homog_core::strip_measure::{cell_masses, write_cell_masses_csv};

/// `I₀(x)` from its power series.
fn bessel_i0(x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..60 {
        term *= (x / 2.0) * (x / 2.0) / (k * k) as f64;
        sum += term;
    }
    sum
}

#[test]
fn two_sided_model_against_closed_forms() {
    let field = builtin_field("two_sided", &BTreeMap::new()).unwrap();
    let grid = GridSpec::uniform(2, 32, GridSpec::default_strip_half_width(field.half_width()));
    let run = build_model(&field, &grid, Blend::Symmetric).unwrap();
    let m = &run.model;

    // plus tail is a gradient field with potential a cos 2πx₁, a = 1/2
    let d11 = 1.0 / bessel_i0(1.0).powi(2);
    let err32 = (m.d_plus.get(0, 0) - d11).abs();
    assert!(err32 < 1e-4, "{} vs {d11}", m.d_plus.get(0, 0));
    let coarse = build_model(
        &field,
        &GridSpec::uniform(2, 16, grid.strip_half_width),
        Blend::Symmetric,
    )
    .unwrap();
    let err16 = (coarse.model.d_plus.get(0, 0) - d11).abs();
    assert!(err16 / err32 > 10.0, "refinement ratio {}", err16 / err32);
    assert!((m.d_plus.get(1, 1) - 1.0).abs() < 1e-8);
    // minus tail is a shear c sin 2πx₁ along x₂, c = 2
    let d22 = 1.0 + 4.0 / (2.0 * PI * PI);
    assert!(
        (m.d_minus.get(1, 1) - d22).abs() < 1e-4,
        "{} vs {d22}",
        m.d_minus.get(1, 1)
    );
    assert!((m.d_minus.get(0, 0) - 1.0).abs() < 1e-8);
    for d in [&m.d_plus, &m.d_minus] {
        assert!(d.is_symmetric_psd());
    }

    assert!((m.q_plus + m.q_minus - 1.0).abs() <= 1e-12);
    assert!((m.p_plus + m.p_minus - 1.0).abs() <= 1e-12);
    assert!(m.q_plus > 0.0 && m.q_minus > 0.0);
    assert_eq!(m.k[0], m.p_plus - m.p_minus);
    assert_eq!(&m.k[1..], &m.alpha[..]);
    m.validate().unwrap();
    assert!(m.factor_error() < 1e-10);
}

#[test]
fn cell_masses_cover_both_sides() {
    let field = builtin_field("paper_shear", &BTreeMap::new()).unwrap();
    let grid = GridSpec::uniform(2, 32, GridSpec::default_strip_half_width(field.half_width()));
    let run = build_model(&field, &grid, Blend::Symmetric).unwrap();
    let masses = cell_masses(&run.strip);
    assert_eq!(masses.len(), 2 * grid.strip_half_width);
    assert!(masses.iter().all(|c| c.mass > 0.0));
    let mut buf = Vec::new();
    write_cell_masses_csv(&masses, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + masses.len());
    // no tail drift on either side: flat cell masses and q± = 1/2
    assert!((run.model.q_plus - 0.5).abs() < 1e-10);
}

#[test]
fn config_hash_tracks_content() {
    let text = r#"
[field]
builtin = "two_sided"
params = { a_plus = 0.25 }

[simulation]
seed = 3
"#;
    let a = RunConfig::from_toml(text).unwrap().resolved().unwrap();
    let b = RunConfig::from_toml(&a.to_toml().unwrap()).unwrap().resolved().unwrap();
    assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    let c = RunConfig::from_toml(&text.replace("seed = 3", "seed = 4"))
        .unwrap()
        .resolved()
        .unwrap();
    assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    assert_eq!(a.grid().unwrap().resolution, vec![64, 64]);
}
