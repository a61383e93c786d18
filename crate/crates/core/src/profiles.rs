//! Smooth one-dimensional profiles used for interface blends and bumps.

/// `exp(-1/t)` for `t > 0`, zero otherwise.
#[inline]
fn flat_exp(t: f64) -> f64 {
    if t > 0.0 {
        (-1.0 / t).exp()
    } else {
        0.0
    }
}

/// C∞ monotone switch from 0 (at `t <= 0`) to 1 (at `t >= 1`).
#[inline]
pub fn smooth_step(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        let a = flat_exp(t);
        a / (a + flat_exp(1.0 - t))
    }
}

/// C∞ switch over `[lo, hi]`.
#[inline]
pub fn smooth_switch(x: f64, lo: f64, hi: f64) -> f64 {
    smooth_step((x - lo) / (hi - lo))
}

/// Standard bump `exp(-1/(1 - t^2))` supported on `(-1, 1)`.
#[inline]
pub fn bump(t: f64) -> f64 {
    if t.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - t * t)).exp()
    }
}
