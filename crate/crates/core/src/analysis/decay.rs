//! Exponential and damped-oscillation fits for time-domain signals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::lm::{self, Problem};
use crate::detector::FluorescenceCurve;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpFit {
    pub amplitude: f64,
    /// s
    pub tau: f64,
    pub offset: f64,
    pub sigma_amplitude: f64,
    pub sigma_tau: f64,
    pub sigma_offset: f64,
}

struct Exp<'a> {
    t: &'a [f64],
    y: &'a [f64],
    t_scale: f64,
}

impl Problem for Exp<'_> {
    fn n_params(&self) -> usize {
        3
    }
    fn n_residuals(&self) -> usize {
        self.t.len()
    }
    fn residuals(&self, p: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.t.len(),
            self.t
                .iter()
                .zip(self.y)
                .map(|(&t, &y)| p[0] * (-t / (p[1] * self.t_scale)).exp() + p[2] - y),
        )
    }
    fn jacobian(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.t.len(), 3);
        for (i, &t) in self.t.iter().enumerate() {
            let x = t / self.t_scale;
            let e = (-x / p[1]).exp();
            j[(i, 0)] = e;
            j[(i, 1)] = p[0] * e * x / (p[1] * p[1]);
            j[(i, 2)] = 1.0;
        }
        j
    }
}

fn check(t: &[f64], y: &[f64], min: usize) -> Result<()> {
    if t.len() != y.len() {
        return Err(Error::InvalidParameter("t and y differ in length".into()));
    }
    if t.len() < min {
        return Err(Error::InvalidParameter(format!("{} points; at least {min} are needed", t.len())));
    }
    Ok(())
}

/// `a·exp(−t/τ) + c`.
pub fn fit_exponential(t: &[f64], y: &[f64]) -> Result<ExpFit> {
    check(t, y, 4)?;
    let span = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - t.iter().cloned().fold(f64::INFINITY, f64::min);
    let t_scale = span.max(f64::MIN_POSITIVE);
    let tail = (y.len() / 10).max(1);
    let c0 = y[y.len() - tail..].iter().sum::<f64>() / tail as f64;
    let a0 = y[0] - c0;
    let prob = Exp { t, y, t_scale };
    let mut best: Option<lm::Report> = None;
    for tau0 in [0.05, 0.2, 0.5, 2.0] {
        if let Ok(r) = lm::minimize(&prob, DVector::from_vec(vec![a0, tau0, c0]), &lm::Options::default()) {
            if r.params[1] > 0.0 && best.as_ref().is_none_or(|b| r.cost < b.cost) {
                best = Some(r);
            }
        }
    }
    let r = best.ok_or_else(|| Error::Fit("exponential fit did not converge".into()))?;
    Ok(ExpFit {
        amplitude: r.params[0],
        tau: r.params[1] * t_scale,
        offset: r.params[2],
        sigma_amplitude: r.sigma(0),
        sigma_tau: r.sigma(1) * t_scale,
        sigma_offset: r.sigma(2),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DampedCosineFit {
    /// Hz
    pub frequency: f64,
    /// s; infinite when undamped.
    pub tau: f64,
    /// √(a² + b²) of the cosine and sine quadratures.
    pub amplitude: f64,
    pub offset: f64,
    pub sigma_frequency: f64,
    pub sigma_tau: f64,
}

/// Parameters: offset, a, b, f (1/t_scale), γ (1/t_scale).
struct DampedCos<'a> {
    t: &'a [f64],
    y: &'a [f64],
    t_scale: f64,
}

impl Problem for DampedCos<'_> {
    fn n_params(&self) -> usize {
        5
    }
    fn n_residuals(&self) -> usize {
        self.t.len()
    }
    fn residuals(&self, p: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.t.len(),
            self.t.iter().zip(self.y).map(|(&t, &y)| {
                let x = t / self.t_scale;
                let w = std::f64::consts::TAU * p[3] * x;
                p[0] + (-p[4] * x).exp() * (p[1] * w.cos() + p[2] * w.sin()) - y
            }),
        )
    }
    fn jacobian(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.t.len(), 5);
        for (i, &t) in self.t.iter().enumerate() {
            let x = t / self.t_scale;
            let w = std::f64::consts::TAU * p[3] * x;
            let (s, c) = w.sin_cos();
            let e = (-p[4] * x).exp();
            j[(i, 0)] = 1.0;
            j[(i, 1)] = e * c;
            j[(i, 2)] = e * s;
            j[(i, 3)] = e * (-p[1] * s + p[2] * c) * std::f64::consts::TAU * x;
            j[(i, 4)] = -x * e * (p[1] * c + p[2] * s);
        }
        j
    }
}

/// `c + exp(−t/τ)·A·cos(2πft + φ)`, started from the strongest Fourier
/// component of the mean-subtracted signal.
pub fn fit_damped_cosine(t: &[f64], y: &[f64]) -> Result<DampedCosineFit> {
    check(t, y, 8)?;
    let t0 = t.iter().cloned().fold(f64::INFINITY, f64::min);
    let span = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - t0;
    if !(span > 0.0) {
        return Err(Error::InvalidParameter("time axis has zero span".into()));
    }
    let t_scale = span;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    // Scan frequencies in cycles per span up to half the sample count.
    let f_max = 0.5 * (t.len() - 1) as f64;
    let mut best_f = 1.0;
    let mut best_p = -1.0;
    let steps = 20 * t.len();
    for k in 1..=steps {
        let f = 0.25 + (f_max - 0.25) * k as f64 / steps as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (&ti, &yi) in t.iter().zip(y) {
            let w = std::f64::consts::TAU * f * ti / t_scale;
            re += (yi - mean) * w.cos();
            im += (yi - mean) * w.sin();
        }
        let p = re * re + im * im;
        if p > best_p {
            best_p = p;
            best_f = f;
        }
    }
    let amp0 = y.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    let prob = DampedCos { t, y, t_scale };
    let mut best: Option<lm::Report> = None;
    for (a, b) in [(amp0, 0.0), (0.0, amp0), (-amp0, 0.0), (0.0, -amp0)] {
        for g in [0.1, 1.0] {
            let start = DVector::from_vec(vec![mean, a, b, best_f, g]);
            if let Ok(r) = lm::minimize(&prob, start, &lm::Options::default()) {
                if best.as_ref().is_none_or(|bb| r.cost < bb.cost) {
                    best = Some(r);
                }
            }
        }
    }
    let r = best.ok_or_else(|| Error::Fit("damped cosine fit did not converge".into()))?;
    let gamma = r.params[4] / t_scale;
    Ok(DampedCosineFit {
        frequency: r.params[3].abs() / t_scale,
        tau: if gamma > 0.0 { 1.0 / gamma } else { f64::INFINITY },
        amplitude: r.params[1].hypot(r.params[2]),
        offset: r.params[0],
        sigma_frequency: r.sigma(3) / t_scale,
        sigma_tau: if gamma > 0.0 { r.sigma(4) / t_scale / (gamma * gamma) } else { f64::INFINITY },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluorescenceFit {
    /// s
    pub t1: f64,
    pub sigma_t1: f64,
    /// Background count rate (1/s).
    pub gamma_dc: f64,
    pub sigma_gamma_dc: f64,
    /// Clicks per shot in the decaying part, a·T₁.
    pub epsilon: f64,
}

/// Exponential fit of a fluorescence histogram in count-rate units.
pub fn fit_fluorescence(curve: &FluorescenceCurve) -> Result<FluorescenceFit> {
    let rate = curve.rate();
    let f = fit_exponential(&curve.time, &rate)?;
    // Bin centres sample a·exp(−t/τ) at the midpoint; the bin average is
    // larger by sinh(x)/x with x = bin/(2τ).
    let x = curve.bin / (2.0 * f.tau);
    let mid = if x > 0.0 { x.sinh() / x } else { 1.0 };
    Ok(FluorescenceFit {
        t1: f.tau,
        sigma_t1: f.sigma_tau,
        gamma_dc: f.offset,
        sigma_gamma_dc: f.sigma_offset,
        epsilon: f.amplitude * f.tau / mid,
    })
}

/// Maximum-likelihood rate of exponential waiting times.
pub fn exponential_rate_mle(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("no samples".into()));
    }
    Ok(samples.len() as f64 / samples.iter().sum::<f64>())
}
