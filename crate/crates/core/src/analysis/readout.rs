//! Single-shot nuclear readout: threshold calibration and the readout
//! success curve.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use super::lm::{self, Problem};
use crate::{Error, Result};

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReadoutModel {
    pub epsilon: f64,
    /// 1/s
    pub gamma_dc: f64,
    /// Detection window per readout round (s).
    pub t_d: f64,
    pub p0: f64,
    pub eta: f64,
}

impl ReadoutModel {
    /// Separation of C_⇓ − C_⇑ over its standard deviation after `n` rounds.
    pub fn snr(&self, n: f64) -> f64 {
        let e = self.epsilon;
        let var = e * (1.0 - e) + 2.0 * self.gamma_dc * self.t_d;
        if var <= 0.0 {
            return if e > 0.0 { f64::INFINITY } else { 0.0 };
        }
        e / var.sqrt() * n.sqrt()
    }

    /// Probability that the nucleus is still in the prepared state.
    pub fn population(&self, n: f64) -> f64 {
        (self.p0 - 0.5) * (-2.0 * self.eta * n).exp() + 0.5
    }

    /// Φ(SNR)·p(N).
    pub fn success(&self, n: f64) -> f64 {
        phi(self.snr(n)) * self.population(n)
    }
}

struct CurveProblem<'a> {
    n: &'a [f64],
    p: &'a [f64],
    /// 1/σ per point.
    w: Vec<f64>,
    base: ReadoutModel,
}

impl Problem for CurveProblem<'_> {
    fn n_params(&self) -> usize {
        2
    }

    fn n_residuals(&self) -> usize {
        self.n.len()
    }

    fn residuals(&self, q: &DVector<f64>) -> DVector<f64> {
        let m = ReadoutModel {
            p0: q[0],
            eta: q[1] * 1e-4,
            ..self.base
        };
        DVector::from_iterator(
            self.n.len(),
            self.n.iter().zip(self.p).zip(&self.w).map(|((&n, &p), &w)| (m.success(n) - p) * w),
        )
    }

    fn jacobian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let eta = q[1] * 1e-4;
        let m = ReadoutModel { p0: q[0], eta, ..self.base };
        let mut j = DMatrix::zeros(self.n.len(), 2);
        for (i, &n) in self.n.iter().enumerate() {
            let f = phi(m.snr(n));
            let e = (-2.0 * eta * n).exp();
            j[(i, 0)] = f * e * self.w[i];
            j[(i, 1)] = f * (q[0] - 0.5) * e * (-2.0 * n) * 1e-4 * self.w[i];
        }
        j
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReadoutFit {
    pub model: ReadoutModel,
    pub sigma_p0: f64,
    pub sigma_eta: f64,
}

/// Fit (p₀, η) to measured success probabilities with ε, Γ_DC and t_D held
/// fixed. Unweighted; uncertainties scale with the residual spread.
pub fn fit_readout_curve(n_ro: &[f64], success: &[f64], epsilon: f64, gamma_dc: f64, t_d: f64) -> Result<ReadoutFit> {
    fit_curve(n_ro, success, None, epsilon, gamma_dc, t_d)
}

/// As [`fit_readout_curve`] with binomial weights from `shots[i]` trials per
/// point; uncertainties are taken from the known variances.
pub fn fit_readout_curve_weighted(
    n_ro: &[f64],
    success: &[f64],
    shots: &[f64],
    epsilon: f64,
    gamma_dc: f64,
    t_d: f64,
) -> Result<ReadoutFit> {
    if shots.len() != success.len() || shots.iter().any(|&k| !(k >= 1.0)) {
        return Err(Error::InvalidParameter("one shot count ≥ 1 per point is needed".into()));
    }
    fit_curve(n_ro, success, Some(shots), epsilon, gamma_dc, t_d)
}

fn fit_curve(n_ro: &[f64], success: &[f64], shots: Option<&[f64]>, epsilon: f64, gamma_dc: f64, t_d: f64) -> Result<ReadoutFit> {
    if n_ro.len() != success.len() {
        return Err(Error::InvalidParameter("N_RO and success differ in length".into()));
    }
    if n_ro.len() < 5 {
        return Err(Error::InvalidParameter(format!("{} points; at least 5 are needed", n_ro.len())));
    }
    let base = ReadoutModel {
        epsilon,
        gamma_dc,
        t_d,
        p0: 0.0,
        eta: 0.0,
    };
    let weights = |pred: &dyn Fn(usize) -> f64| -> Vec<f64> {
        match shots {
            // Probability clamped half a count away from 0 and 1.
            Some(k) => (0..n_ro.len())
                .map(|i| {
                    let q = pred(i).clamp(0.5 / k[i], 1.0 - 0.5 / k[i]);
                    (k[i] / (q * (1.0 - q))).sqrt()
                })
                .collect(),
            None => vec![1.0; n_ro.len()],
        }
    };
    let solve = |w: Vec<f64>| -> Result<lm::Report> {
        let prob = CurveProblem { n: n_ro, p: success, w, base };
        // η is carried in units of 1e-4 for conditioning.
        let mut best: Option<lm::Report> = None;
        for eta0 in [0.0, 1.0, 5.0, 20.0] {
            if let Ok(r) = lm::minimize(&prob, DVector::from_vec(vec![0.9, eta0]), &lm::Options::default()) {
                if best.as_ref().is_none_or(|b| r.cost < b.cost) {
                    best = Some(r);
                }
            }
        }
        best.ok_or_else(|| Error::Fit("readout curve did not converge".into()))
    };
    let mut r = solve(weights(&|i| success[i]))?;
    if shots.is_some() {
        // Reweight with the fitted curve; observed-p weights favour low points.
        for _ in 0..2 {
            let m = ReadoutModel {
                p0: r.params[0],
                eta: r.params[1] * 1e-4,
                ..base
            };
            r = solve(weights(&|i| m.success(n_ro[i])))?;
        }
    }
    let scale = if shots.is_some() {
        let dof = (n_ro.len() - 2) as f64;
        let s2 = 2.0 * r.cost / dof;
        if s2 > 0.0 { 1.0 / s2 } else { 1.0 }
    } else {
        1.0
    };
    Ok(ReadoutFit {
        model: ReadoutModel {
            p0: r.params[0],
            eta: r.params[1] * 1e-4,
            ..base
        },
        sigma_p0: (r.covariance[(0, 0)].max(0.0) * scale).sqrt(),
        sigma_eta: (r.covariance[(1, 1)].max(0.0) * scale).sqrt() * 1e-4,
    })
}

/// |B| from a measured cross-relaxation probability with the spin on
/// resonance with the cavity, inverting `η = B²/(4ω_I²)·κ²/(κ² + 4ω_I²)`.
pub fn b_from_eta(eta: f64, omega_i: f64, kappa: f64) -> f64 {
    2.0 * omega_i.abs() * (eta * (kappa * kappa + 4.0 * omega_i * omega_i)).sqrt() / kappa
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub weight: f64,
    pub mean: f64,
    pub sigma: f64,
}

impl Gaussian {
    fn pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sigma;
        (-0.5 * z * z).exp() / (self.sigma * (2.0 * std::f64::consts::PI).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub threshold: f64,
    /// 1 − ½[P(x > t | low) + P(x < t | high)].
    pub fidelity: f64,
    pub low: Gaussian,
    pub high: Gaussian,
}

fn one_gaussian_loglik(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).max(1e-300);
    -0.5 * n * ((2.0 * std::f64::consts::PI * v).ln() + 1.0)
}

fn quantile_sorted(s: &[f64], q: f64) -> f64 {
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Two-Gaussian mixture by expectation–maximization.
pub fn fit_two_gaussians(x: &[f64]) -> Result<(Gaussian, Gaussian, f64)> {
    let n = x.len();
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let spread = s[n - 1] - s[0];
    if spread <= 0.0 {
        return Err(Error::Unimodal);
    }
    let floor = 1e-3 * spread;
    let mut g = [
        Gaussian {
            weight: 0.5,
            mean: quantile_sorted(&s, 0.25),
            sigma: 0.25 * spread,
        },
        Gaussian {
            weight: 0.5,
            mean: quantile_sorted(&s, 0.75),
            sigma: 0.25 * spread,
        },
    ];
    let mut ll_old = f64::NEG_INFINITY;
    let mut ll = ll_old;
    for _ in 0..2000 {
        let mut acc = [[0.0f64; 3]; 2];
        ll = 0.0;
        for &v in x {
            let a = g[0].weight * g[0].pdf(v);
            let b = g[1].weight * g[1].pdf(v);
            let t = (a + b).max(1e-300);
            ll += t.ln();
            for (k, w) in [a / t, b / t].into_iter().enumerate() {
                acc[k][0] += w;
                acc[k][1] += w * v;
                acc[k][2] += w * v * v;
            }
        }
        for k in 0..2 {
            let w = acc[k][0].max(1e-12);
            let mean = acc[k][1] / w;
            let var = (acc[k][2] / w - mean * mean).max(floor * floor);
            g[k] = Gaussian {
                weight: w / n as f64,
                mean,
                sigma: var.sqrt(),
            };
        }
        if (ll - ll_old).abs() <= 1e-12 * ll.abs() {
            break;
        }
        ll_old = ll;
    }
    if g[0].mean > g[1].mean {
        g.swap(0, 1);
    }
    Ok((g[0], g[1], ll))
}

/// Equal-likelihood crossing of two normal densities between their means.
fn crossing(a: &Gaussian, b: &Gaussian) -> f64 {
    let (m1, s1, m2, s2) = (a.mean, a.sigma, b.mean, b.sigma);
    if ((s1 - s2) / (s1 + s2)).abs() < 1e-12 {
        return 0.5 * (m1 + m2);
    }
    // ln N(x; m1, s1) = ln N(x; m2, s2)
    let qa = 1.0 / (s2 * s2) - 1.0 / (s1 * s1);
    let qb = 2.0 * (m1 / (s1 * s1) - m2 / (s2 * s2));
    let qc = m2 * m2 / (s2 * s2) - m1 * m1 / (s1 * s1) + 2.0 * (s2 / s1).ln();
    let disc = (qb * qb - 4.0 * qa * qc).max(0.0).sqrt();
    let r1 = (-qb + disc) / (2.0 * qa);
    let r2 = (-qb - disc) / (2.0 * qa);
    let mid = 0.5 * (m1 + m2);
    let inside = |r: f64| r >= m1.min(m2) && r <= m1.max(m2);
    match (inside(r1), inside(r2)) {
        (true, false) => r1,
        (false, true) => r2,
        _ => {
            if (r1 - mid).abs() < (r2 - mid).abs() {
                r1
            } else {
                r2
            }
        }
    }
}

/// Threshold on δC = C_⇓ − C_⇑ from a two-Gaussian fit, with the
/// assignment fidelity of that threshold.
pub fn readout_threshold(samples: &[f64]) -> Result<Threshold> {
    if samples.len() < 100 {
        return Err(Error::InvalidParameter(format!("{} samples; at least 100 are needed", samples.len())));
    }
    let (low, high, ll2) = fit_two_gaussians(samples)?;
    let ll1 = one_gaussian_loglik(samples);
    let n = samples.len() as f64;
    // BIC with 2 vs 5 free parameters.
    if -2.0 * ll2 + 5.0 * n.ln() >= -2.0 * ll1 + 2.0 * n.ln() {
        return Err(Error::Unimodal);
    }
    let t = crossing(&low, &high);
    let p_low_above = 1.0 - phi((t - low.mean) / low.sigma);
    let p_high_below = phi((t - high.mean) / high.sigma);
    Ok(Threshold {
        threshold: t,
        fidelity: 1.0 - 0.5 * (p_low_above + p_high_below),
        low,
        high,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snr_at_reference_parameters() {
        let m = ReadoutModel {
            epsilon: 0.18,
            gamma_dc: 150.0,
            t_d: 2.6e-3,
            p0: 0.97,
            eta: 0.0,
        };
        assert!((m.snr(1.0) - 0.1869).abs() < 1e-4);
        assert!(m.success(1e4) > 0.969);
        assert!((m.population(1e9) - 0.97).abs() < 1e-15);
    }

    #[test]
    fn b_from_eta_matches_forward_formula() {
        let (wi, kappa) = (crate::units::khz(788.0), crate::units::khz(640.0));
        let b = crate::units::khz(74.0);
        let eta = b * b / (4.0 * wi * wi) * kappa * kappa / (kappa * kappa + 4.0 * wi * wi);
        assert!((b_from_eta(eta, wi, kappa) - b).abs() < 1e-9 * b);
    }

    #[test]
    fn crossing_of_equal_widths_is_midpoint() {
        let a = Gaussian { weight: 0.5, mean: -3.0, sigma: 1.0 };
        let b = Gaussian { weight: 0.5, mean: 5.0, sigma: 1.0 };
        assert_eq!(crossing(&a, &b), 1.0);
        let b = Gaussian { weight: 0.5, mean: 5.0, sigma: 2.0 };
        let t = crossing(&a, &b);
        assert!((a.pdf(t) - b.pdf(t)).abs() < 1e-12);
    }
}
