//! Excitations spent per line crossing in a stepped frequency sweep.

use crate::dynamics::{PulseSegment, SegmentKind};
use crate::{Error, Result};

/// |∫ env(t) e^{−2πift} dt|² by midpoint quadrature.
fn power(seg: &PulseSegment, f: f64) -> f64 {
    let n = 400;
    let h = seg.duration / n as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for i in 0..n {
        let t = (i as f64 + 0.5) * h;
        let e = seg.envelope(t);
        let w = std::f64::consts::TAU * f * (t - 0.5 * seg.duration);
        re += e * w.cos();
        im += e * w.sin();
    }
    (re * re + im * im) * h * h
}

/// Full width at half maximum of the envelope's power spectrum (Hz).
pub fn spectral_fwhm(kind: SegmentKind, duration: f64) -> Result<f64> {
    let seg = PulseSegment::drive(kind, 0.0, 1.0, duration);
    seg.validate()?;
    let p0 = power(&seg, 0.0);
    let mut hi = 1.0 / duration;
    while power(&seg, hi) > 0.5 * p0 {
        hi *= 2.0;
        if hi > 1e6 / duration {
            return Err(Error::NoConvergence {
                what: "spectral width search",
                iterations: 0,
            });
        }
    }
    let mut lo = 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if power(&seg, mid) > 0.5 * p0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo + hi)
}

/// Sweep points within the pulse's spectral FWHM of a line; at least one.
/// `step` is the sweep step in Hz.
pub fn excitation_count(kind: SegmentKind, duration: f64, step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter("sweep step must be positive".into()));
    }
    Ok((spectral_fwhm(kind, duration)? / step).max(1.0))
}
