//! Standard normal functions evaluated in the log domain, and the marginal of
//! Uniform[0,1] data convolved with Gaussian noise.
//!
//! Tails beyond |z| = 5 go through the continued fraction for the Mills ratio,
//! so `ln_sf` stays accurate where `erfc` underflows (|z| ≳ 38).

use std::f64::consts::{FRAC_1_SQRT_2, PI};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const CF_SWITCH: f64 = 5.0;
const CF_TERMS: usize = 200;

/// Default lower clamp for the denominator bracket of the uniform score.
pub const DENOMINATOR_FLOOR: f64 = 1e-300;

#[inline]
pub fn ln_pdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

#[inline]
pub fn pdf(z: f64) -> f64 {
    ln_pdf(z).exp()
}

/// Mills ratio `Φc(z)/φ(z)` for `z > 0` by backward continued fraction.
fn mills_ratio(z: f64) -> f64 {
    let mut t = z;
    for k in (1..=CF_TERMS).rev() {
        t = z + k as f64 / t;
    }
    1.0 / t
}

/// `ln(1 − Φ(z))`.
pub fn ln_sf(z: f64) -> f64 {
    if z >= CF_SWITCH {
        ln_pdf(z) + mills_ratio(z).ln()
    } else if z <= -CF_SWITCH {
        (-sf(-z)).ln_1p()
    } else {
        (0.5 * libm::erfc(z * FRAC_1_SQRT_2)).ln()
    }
}

/// `1 − Φ(z)`.
pub fn sf(z: f64) -> f64 {
    if z >= CF_SWITCH {
        ln_sf(z).exp()
    } else {
        0.5 * libm::erfc(z * FRAC_1_SQRT_2)
    }
}

/// `ln Φ(z)`.
pub fn ln_cdf(z: f64) -> f64 {
    ln_sf(-z)
}

pub fn cdf(z: f64) -> f64 {
    sf(-z)
}

/// Log-density pieces of `p(x) = Φ(x/s) − Φ((x−1)/s)`, folded so that
/// `x ≤ 1/2` (the density is symmetric about 1/2).
struct Folded {
    /// `ln Φ(a)` with `a = x/s`.
    ln_head: f64,
    /// `−expm1(ln Φ(b) − ln Φ(a))`, the bracket `1 − Φ(b)/Φ(a)`.
    bracket: f64,
    a: f64,
    b: f64,
}

fn fold(x: f64, s: f64) -> Folded {
    let a = x / s;
    let b = (x - 1.0) / s;
    let ln_head = ln_cdf(a);
    let bracket = -(ln_cdf(b) - ln_head).exp_m1();
    Folded { ln_head, bracket, a, b }
}

/// `ln p(x)` for Uniform[0,1] convolved with `N(0, s²)`.
pub fn uniform_log_density(x: f64, s: f64) -> f64 {
    let x = if x > 0.5 { 1.0 - x } else { x };
    let f = fold(x, s);
    f.ln_head + f.bracket.max(f64::MIN_POSITIVE).ln()
}

/// Score `∂ₓ ln p(x)` of Uniform[0,1] ⊛ N(0, s²).
///
/// Returns the value and whether the denominator floor was engaged.
pub fn uniform_score(x: f64, s: f64, floor: f64) -> (f64, bool) {
    if x > 0.5 {
        let (v, clamped) = uniform_score(1.0 - x, s, floor);
        return (-v, clamped);
    }
    let f = fold(x, s);
    let (bracket, clamped) = if f.bracket < floor { (floor, true) } else { (f.bracket, false) };
    // φ(a) − φ(b) = φ(a)·(1 − exp((2x−1)/(2s²)))
    let num_bracket = -((2.0 * x - 1.0) / (2.0 * s * s)).exp_m1();
    let mills = (ln_pdf(f.a) - f.ln_head).exp();
    (mills * num_bracket / (s * bracket), clamped)
}

/// `∂ₓ` of [`uniform_score`], i.e. `p''/p − score²`.
pub fn uniform_score_derivative(x: f64, s: f64, floor: f64) -> f64 {
    let x = if x > 0.5 { 1.0 - x } else { x };
    let f = fold(x, s);
    let bracket = f.bracket.max(floor);
    let q = ((2.0 * x - 1.0) / (2.0 * s * s)).exp();
    let m = (ln_pdf(f.a) - f.ln_head).exp() / bracket;
    let score = m * (1.0 - q) / s;
    -m * (f.a - f.b * q) / (s * s) - score * score
}

/// Differential entropy (nats) of Uniform[0,1] ⊛ N(0, s²).
///
/// Composite Simpson over the region where the density is non-negligible;
/// the edges of width ~s get their own panels.
pub fn uniform_convolution_entropy(s: f64) -> f64 {
    if s == 0.0 {
        return 0.0;
    }
    let reach = 12.0 * s;
    let integrand = |x: f64| {
        let lp = uniform_log_density(x, s);
        -lp.exp() * lp
    };
    if 2.0 * reach >= 1.0 {
        return simpson(integrand, -reach, 1.0 + reach, 8000);
    }
    let left = simpson(integrand, -reach, reach, 4000);
    let middle = simpson(integrand, reach, 1.0 - reach, 2000);
    let right = simpson(integrand, 1.0 - reach, 1.0 + reach, 4000);
    left + middle + right
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + h * k as f64);
    }
    acc * h / 3.0
}

/// Entropy (nats) of a 1-D Gaussian with variance `var`.
pub fn gaussian_entropy_1d(var: f64) -> f64 {
    0.5 * (2.0 * PI * std::f64::consts::E * var).ln()
}
