//! Scalar math shims over `libm` so the crate builds without `std`.

pub const LN_2PI: f64 = 1.8378770664093453;
pub const SQRT_2: f64 = core::f64::consts::SQRT_2;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn expm1(x: f64) -> f64 {
    libm::expm1(x)
}

#[inline]
pub fn ln_1p(x: f64) -> f64 {
    libm::log1p(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

#[inline]
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Standard normal CDF via the complementary error function.
#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// Log-density of `Normal(mean, 1/precision)` at `x`.
#[inline]
pub fn normal_logpdf(x: f64, mean: f64, precision: f64) -> f64 {
    let d = x - mean;
    0.5 * (ln(precision) - LN_2PI) - 0.5 * precision * d * d
}

/// Log-density of `Gamma(shape, rate)` at `x > 0`.
#[inline]
pub fn gamma_logpdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * ln(rate) - ln_gamma(shape) + (shape - 1.0) * ln(x) - rate * x
}
