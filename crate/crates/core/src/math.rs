//! Thin wrappers over `libm` so the crate stays `no_std`.

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn powi(x: f64, n: i32) -> f64 {
    libm::pow(x, n as f64)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

/// Round half away from zero. `libm::round` already has this tie behavior;
/// the alias exists so the rounding contract is named at call sites.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    libm::round(x)
}
