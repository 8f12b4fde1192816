//! Scalar helpers shared by the transforms and entropy models.
//!
//! All probability math runs through the standard normal CDF `Phi`; it is
//! expressed via `erfc` so both tails keep full relative precision.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Standard normal cumulative distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Upper tail mass P(X > x) for a standard normal, precise for large x.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// ln(1 + e^x) without overflow for large |x|.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// d/dx softplus(x), the logistic function, stable in both tails.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus: returns y with softplus(y) = x, for x > 0.
pub fn softplus_inv(x: f64) -> f64 {
    // ln(e^x - 1) = x + ln(1 - e^-x)
    x + (-(-x).exp()).ln_1p()
}
