//! Pointwise kernels shared by graph evaluation and the scalar activation API.

use std::f64::consts::LN_2;

/// `Relu'(0) = 0` by convention.
#[inline]
pub fn heaviside(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Antiderivative of ReLU through the origin: `0.5 * max(0, x)^2`.
#[inline]
pub fn irelu(x: f64) -> f64 {
    if x > 0.0 {
        0.5 * x * x
    } else {
        0.0
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    0.5 + 0.5 * (0.5 * x).tanh()
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn shifted_softplus(x: f64) -> f64 {
    softplus(x) - LN_2
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}
