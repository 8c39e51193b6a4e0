//! Lorentzian peak fits. Abscissae are in Hz.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::lm::{self, Problem};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LorentzianFit {
    /// Hz
    pub center: f64,
    /// Full width at half maximum (Hz).
    pub fwhm: f64,
    /// Peak height above the offset (counts).
    pub amplitude: f64,
    /// counts
    pub offset: f64,
    /// Covariance of (center, fwhm, amplitude, offset).
    pub covariance: [[f64; 4]; 4],
}

impl LorentzianFit {
    pub fn sigma_center(&self) -> f64 {
        self.covariance[0][0].max(0.0).sqrt()
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.offset + self.amplitude * lorentz(x, self.center, self.fwhm)
    }
}

pub fn lorentz(x: f64, center: f64, fwhm: f64) -> f64 {
    let u = 2.0 * (x - center) / fwhm;
    1.0 / (1.0 + u * u)
}

/// Shared offset plus `n` peaks; parameters `[offset, (c, w, a)…]`.
struct MultiPeak<'a> {
    x: &'a [f64],
    y: &'a [f64],
    n: usize,
}

impl Problem for MultiPeak<'_> {
    fn n_params(&self) -> usize {
        1 + 3 * self.n
    }

    fn n_residuals(&self) -> usize {
        self.x.len()
    }

    fn residuals(&self, p: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.x.len(),
            self.x.iter().zip(self.y).map(|(&x, &y)| {
                let mut m = p[0];
                for k in 0..self.n {
                    m += p[3 + 3 * k] * lorentz(x, p[1 + 3 * k], p[2 + 3 * k]);
                }
                m - y
            }),
        )
    }

    fn jacobian(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.x.len(), self.n_params());
        for (i, &x) in self.x.iter().enumerate() {
            j[(i, 0)] = 1.0;
            for k in 0..self.n {
                let (c, w, a) = (p[1 + 3 * k], p[2 + 3 * k], p[3 + 3 * k]);
                let l = lorentz(x, c, w);
                let d = x - c;
                j[(i, 1 + 3 * k)] = a * l * l * 8.0 * d / (w * w);
                j[(i, 2 + 3 * k)] = a * l * l * 8.0 * d * d / (w * w * w);
                j[(i, 3 + 3 * k)] = l;
            }
        }
        j
    }
}

fn check_input(x: &[f64], y: &[f64], n_peaks: usize) -> Result<()> {
    if n_peaks == 0 {
        return Err(Error::InvalidParameter("need at least one peak".into()));
    }
    if x.len() != y.len() {
        return Err(Error::InvalidParameter("x and y differ in length".into()));
    }
    if x.len() < 5 * n_peaks {
        return Err(Error::InvalidParameter(format!(
            "{} points cannot support {n_peaks} peaks (need {})",
            x.len(),
            5 * n_peaks
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("spectrum contains non-finite values".into()));
    }
    Ok(())
}

fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

fn to_fit(p: &DVector<f64>, cov: &DMatrix<f64>, k: usize) -> LorentzianFit {
    let idx = [1 + 3 * k, 2 + 3 * k, 3 + 3 * k, 0];
    let mut c = [[0.0; 4]; 4];
    for (a, &ia) in idx.iter().enumerate() {
        for (b, &ib) in idx.iter().enumerate() {
            c[a][b] = cov[(ia, ib)];
        }
    }
    LorentzianFit {
        center: p[1 + 3 * k],
        fwhm: p[2 + 3 * k].abs(),
        amplitude: p[3 + 3 * k],
        offset: p[0],
        covariance: c,
    }
}

fn run(x: &[f64], y: &[f64], n: usize, start: DVector<f64>) -> Option<lm::Report> {
    let prob = MultiPeak { x, y, n };
    lm::minimize(&prob, start, &lm::Options::default()).ok()
}

/// Single Lorentzian with constant offset.
pub fn fit_lorentzian(x: &[f64], y: &[f64]) -> Result<LorentzianFit> {
    Ok(fit_multi_lorentzian(x, y, 1)?.remove(0))
}

/// `n_peaks` Lorentzians on a shared offset, sorted by centre.
///
/// Starts from a greedy residual-peak search and from a grid of centre
/// combinations; the lowest-cost converged fit wins.
pub fn fit_multi_lorentzian(x: &[f64], y: &[f64], n_peaks: usize) -> Result<Vec<LorentzianFit>> {
    check_input(x, y, n_peaks)?;
    let (xmin, xmax) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (xmax - xmin).max(f64::MIN_POSITIVE);
    let offset0 = quantile(y, 0.2);
    let ymax = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let amp0 = (ymax - offset0).max(1e-12 * ymax.abs().max(1.0));
    let w0 = span / (4.0 * n_peaks as f64);

    let mut starts: Vec<Vec<f64>> = Vec::new();

    // Greedy: place peaks at successive residual maxima.
    let mut resid: Vec<f64> = y.iter().map(|v| v - offset0).collect();
    let mut greedy = Vec::new();
    for _ in 0..n_peaks {
        let (i, &a) = resid
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty");
        let c = x[i];
        greedy.push((c, w0, a.max(0.1 * amp0)));
        for (r, &xi) in resid.iter_mut().zip(x) {
            *r -= a.max(0.0) * lorentz(xi, c, w0);
        }
    }
    starts.push(pack(offset0, &greedy));

    // Grid of centre combinations.
    let grid = 8usize;
    let centres: Vec<f64> = (0..grid).map(|g| xmin + span * (g as f64 + 0.5) / grid as f64).collect();
    let mut combo: Vec<usize> = (0..n_peaks).collect();
    if n_peaks <= grid {
        loop {
            let peaks: Vec<(f64, f64, f64)> = combo.iter().map(|&g| (centres[g], w0, amp0)).collect();
            starts.push(pack(offset0, &peaks));
            // next combination
            let mut k = n_peaks;
            while k > 0 && combo[k - 1] == grid - n_peaks + k - 1 {
                k -= 1;
            }
            if k == 0 {
                break;
            }
            combo[k - 1] += 1;
            for j in k..n_peaks {
                combo[j] = combo[j - 1] + 1;
            }
        }
    }

    let mut best: Option<lm::Report> = None;
    for s in starts {
        if let Some(r) = run(x, y, n_peaks, DVector::from_vec(s)) {
            let ok = (0..n_peaks).all(|k| r.params[2 + 3 * k].abs() > 0.0 && r.params[2 + 3 * k].is_finite());
            if ok && best.as_ref().is_none_or(|b| r.cost < b.cost) {
                best = Some(r);
            }
        }
    }
    let best = best.ok_or_else(|| Error::Fit("no start converged".into()))?;
    let cov = sandwich(&MultiPeak { x, y, n: n_peaks }, &best).unwrap_or_else(|| best.covariance.clone());
    let mut fits: Vec<LorentzianFit> = (0..n_peaks).map(|k| to_fit(&best.params, &cov, k)).collect();
    fits.sort_by(|a, b| a.center.total_cmp(&b.center));
    Ok(fits)
}

/// Heteroscedasticity-consistent covariance (HC3): count noise is larger on
/// the peak than on the background, so s²(JᵀJ)⁻¹ understates the centre error.
fn sandwich(prob: &MultiPeak, r: &lm::Report) -> Option<DMatrix<f64>> {
    let j = &r.jacobian;
    let res = prob.residuals(&r.params);
    let jtj = j.transpose() * j;
    let inv = jtj.clone().pseudo_inverse(1e-14 * jtj.amax().max(f64::MIN_POSITIVE)).ok()?;
    let mut meat = DMatrix::zeros(j.ncols(), j.ncols());
    for i in 0..j.nrows() {
        let row = j.row(i);
        let h = (row * &inv * row.transpose())[(0, 0)];
        if !(h < 1.0) {
            return None;
        }
        let w = (res[i] / (1.0 - h)).powi(2);
        meat += row.transpose() * row * w;
    }
    Some(&inv * meat * &inv)
}

fn pack(offset: f64, peaks: &[(f64, f64, f64)]) -> Vec<f64> {
    let mut v = vec![offset];
    for &(c, w, a) in peaks {
        v.extend([c, w, a]);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_single_peak_is_exact() {
        let x: Vec<f64> = (0..51).map(|i| -50e3 + 2e3 * i as f64).collect();
        let y: Vec<f64> = x.iter().map(|&v| 0.4 + 2.5 * lorentz(v, 3.3e3, 12e3)).collect();
        let f = fit_lorentzian(&x, &y).unwrap();
        assert!((f.center - 3.3e3).abs() < 1e-8 * 12e3);
        assert!((f.fwhm - 12e3).abs() < 1e-8 * 12e3);
        assert!((f.amplitude - 2.5).abs() < 1e-8);
        assert!((f.offset - 0.4).abs() < 1e-8);
    }

    #[test]
    fn too_few_points() {
        let x = [0.0, 1.0, 2.0, 3.0];
        assert!(fit_lorentzian(&x, &x).is_err());
        let x: Vec<f64> = (0..9).map(|i| i as f64).collect();
        assert!(fit_multi_lorentzian(&x, &x, 2).is_err());
    }
}
