//! Conversions between cyclic and angular frequency.

use std::f64::consts::TAU;

/// Cyclic frequency (Hz) to angular frequency (rad/s).
#[inline]
pub fn hz(f: f64) -> f64 {
    TAU * f
}

#[inline]
pub fn khz(f: f64) -> f64 {
    TAU * f * 1e3
}

#[inline]
pub fn mhz(f: f64) -> f64 {
    TAU * f * 1e6
}

#[inline]
pub fn ghz(f: f64) -> f64 {
    TAU * f * 1e9
}

/// Angular frequency (rad/s) to cyclic frequency (Hz).
#[inline]
pub fn to_hz(omega: f64) -> f64 {
    omega / TAU
}

#[inline]
pub fn to_khz(omega: f64) -> f64 {
    omega / TAU * 1e-3
}
