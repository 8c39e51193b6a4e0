//! Nuclear Larmor frequency from AC-Zeeman shifted forbidden lines, and the
//! anisotropic coupling from forbidden Rabi frequencies.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::lm::{self, Problem};
use crate::spin::Coupling;
use crate::{Error, Result};

/// One driven forbidden-line centre: drive amplitude Ω and |δ| (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftedLine {
    pub omega: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OmegaIFit {
    /// |ω_I| (rad/s)
    pub omega_i: f64,
    /// rad/s
    pub sigma: f64,
    /// rad/s
    pub rms_residual: f64,
}

impl OmegaIFit {
    /// Gyromagnetic ratio |ω_I|/(2π B₀) in Hz/T.
    pub fn gyromagnetic_ratio(&self, b0: f64) -> f64 {
        crate::units::to_hz(self.omega_i) / b0
    }
}

const SCALE: f64 = std::f64::consts::TAU * 1e3;

struct Branches<'a> {
    z: &'a [ShiftedLine],
    d: &'a [ShiftedLine],
    a: f64,
    b: f64,
    sign: f64,
}

impl Branches<'_> {
    fn model(&self, x: f64) -> Option<Vec<f64>> {
        let c = Coupling {
            omega_i: self.sign * x * SCALE,
            a: self.a,
            b: self.b,
        };
        let mut out = Vec::with_capacity(self.z.len() + self.d.len());
        for l in self.z {
            out.push(c.ac_zeeman_frequencies(l.omega).ok()?.1.abs());
        }
        for l in self.d {
            out.push(c.ac_zeeman_frequencies(l.omega).ok()?.0.abs());
        }
        Some(out)
    }
}

impl Problem for Branches<'_> {
    fn n_params(&self) -> usize {
        1
    }

    fn n_residuals(&self) -> usize {
        self.z.len() + self.d.len()
    }

    fn residuals(&self, p: &DVector<f64>) -> DVector<f64> {
        let data = self.z.iter().chain(self.d).map(|l| l.delta);
        match self.model(p[0]) {
            Some(m) => DVector::from_iterator(m.len(), m.iter().zip(data).map(|(m, y)| (m - y) / SCALE)),
            None => DVector::from_element(self.n_residuals(), f64::NAN),
        }
    }
}

/// Joint least-squares fit of |ω_I| to both driven branches with A and B
/// fixed. `omega_i_negative` selects the sign convention of the model.
pub fn fit_omega_i(
    zero_quantum: &[ShiftedLine],
    double_quantum: &[ShiftedLine],
    a: f64,
    b: f64,
    omega_i_negative: bool,
) -> Result<OmegaIFit> {
    if zero_quantum.len() < 3 || double_quantum.len() < 3 {
        return Err(Error::InvalidParameter("each branch needs at least 3 amplitudes".into()));
    }
    let prob = Branches {
        z: zero_quantum,
        d: double_quantum,
        a,
        b,
        sign: if omega_i_negative { -1.0 } else { 1.0 },
    };
    // High-field start: |δ| + Ω²/(2|δ|) ≈ |ω_I|.
    let all: Vec<&ShiftedLine> = zero_quantum.iter().chain(double_quantum).collect();
    let x0 = all.iter().map(|l| l.delta + l.omega * l.omega / (2.0 * l.delta)).sum::<f64>() / all.len() as f64 / SCALE;
    let r = lm::minimize(&prob, DVector::from_element(1, x0), &lm::Options::default())?;
    let rms = (2.0 * r.cost / prob.n_residuals() as f64).sqrt() * SCALE;
    Ok(OmegaIFit {
        omega_i: r.params[0].abs() * SCALE,
        sigma: r.sigma(0) * SCALE,
        rms_residual: rms,
    })
}

/// |B| from a forbidden Rabi frequency `omega_zd` and the allowed Rabi
/// frequency `omega` measured at amplitude ratio `alpha` (allowed drive over
/// forbidden drive), for a forbidden line detuned by `delta` from the cavity:
/// `α(Ω_zd/Ω)·(4ω_I² − A²)/(2|ω_I|)·√(1 + 4δ²/κ²)`.
pub fn extract_b_rabi(omega_zd: f64, omega: f64, alpha: f64, a: f64, omega_i: f64, delta: f64, kappa: f64) -> Result<f64> {
    if !(omega > 0.0) || !(alpha > 0.0) {
        return Err(Error::InvalidParameter("Ω and α must be positive".into()));
    }
    if !(kappa > 0.0) || omega_i == 0.0 {
        return Err(Error::InvalidParameter("κ must be positive and ω_I nonzero".into()));
    }
    let filter = (1.0 + 4.0 * delta * delta / (kappa * kappa)).sqrt();
    let lever = (4.0 * omega_i * omega_i - a * a) / (2.0 * omega_i.abs());
    Ok(alpha * (omega_zd.abs() / omega) * lever.abs() * filter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spin::CavityParams;
    use crate::units::{ghz, khz};

    #[test]
    fn b_from_rabi_reference_values() {
        let b = extract_b_rabi(khz(15.0), khz(97.0), 1.0 / 6.2, khz(34.5), khz(788.0), khz(788.0), khz(640.0)).unwrap();
        assert!((crate::units::to_khz(b) - 104.3).abs() < 0.2);
        assert_eq!(extract_b_rabi(0.0, khz(97.0), 0.16, khz(34.5), khz(788.0), khz(788.0), khz(640.0)).unwrap(), 0.0);
        assert!(extract_b_rabi(1.0, 0.0, 0.16, 0.0, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn rabi_round_trip() {
        let cav = CavityParams::new(ghz(7.7492), khz(640.0), khz(4.5)).unwrap();
        for (a, b, wi, delta) in [(34.5, 103.0, -788.1, 788.1), (12.0, 40.0, 500.0, -200.0), (-20.0, 7.5, -900.0, 0.0)] {
            let c = Coupling {
                omega_i: khz(wi),
                a: khz(a),
                b: khz(b),
            };
            let alpha = 1.0 / 6.2;
            let omega = khz(97.0);
            let w = c.forbidden_rabi(omega / alpha, &cav, khz(delta)).unwrap();
            let back = extract_b_rabi(w, omega, alpha, c.a, c.omega_i, khz(delta), cav.kappa).unwrap();
            assert!((back - c.b.abs()).abs() <= 1e-10 * c.b.abs());
        }
    }

    #[test]
    fn undriven_branches_invert_forbidden_frequencies() {
        let c = Coupling {
            omega_i: khz(-788.1),
            a: khz(34.5),
            b: khz(103.0),
        };
        let (d0, z0) = c.forbidden_frequencies().unwrap();
        let z = vec![ShiftedLine { omega: 0.0, delta: z0.abs() }; 3];
        let d = vec![ShiftedLine { omega: 0.0, delta: d0.abs() }; 3];
        let f = fit_omega_i(&z, &d, c.a, c.b, true).unwrap();
        assert!((f.omega_i - c.omega_i.abs()).abs() < 1e-6 * c.omega_i.abs());
    }
}
