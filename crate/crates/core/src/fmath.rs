//! Scalar float helpers backed by `libm`.
//!
//! Routing every transcendental through `libm` keeps results bit-identical
//! across platforms and build profiles, which the determinism contracts
//! (same seed → same checkpoint bytes) rely on.

pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

pub fn ceil(x: f64) -> f64 {
    libm::ceil(x)
}

pub fn pow(base: f64, exp: f64) -> f64 {
    libm::pow(base, exp)
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// x·ln(x) with the 0·ln(0) = 0 convention.
pub fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * ln(x)
    }
}
