//! Phenomenological microwave photon counter.
//!
//! An emission inside a detection window is registered with probability ε,
//! unless it falls into the dead part of the detector's measurement cycle,
//! whose phase is uniform and independent per emission. Dark counts are a
//! homogeneous Poisson process.

use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    /// End-to-end probability that an emitted photon is counted.
    pub epsilon: f64,
    /// Dark-count rate (1/s).
    pub gamma_dc: f64,
    /// Measurement cycle duration (s).
    pub cycle: f64,
    /// Down-time per cycle (s).
    pub dead: f64,
}

impl DetectorParams {
    pub fn new(epsilon: f64, gamma_dc: f64) -> Result<Self> {
        Self {
            epsilon,
            gamma_dc,
            cycle: 17e-6,
            dead: 0.0,
        }
        .validated()
    }

    pub fn with_dead_time(self, cycle: f64, dead: f64) -> Result<Self> {
        Self { cycle, dead, ..self }.validated()
    }

    pub fn validated(self) -> Result<Self> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidParameter(format!(
                "detection efficiency must lie in [0, 1], got {}",
                self.epsilon
            )));
        }
        if !(self.gamma_dc >= 0.0 && self.gamma_dc.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "dark-count rate must be non-negative, got {}",
                self.gamma_dc
            )));
        }
        if !(self.cycle > 0.0 && self.dead >= 0.0 && self.dead < self.cycle) {
            return Err(Error::InvalidParameter(format!(
                "dead time {} s must be shorter than the cycle {} s",
                self.dead, self.cycle
            )));
        }
        Ok(self)
    }

    pub fn live_fraction(&self) -> f64 {
        1.0 - self.dead / self.cycle
    }

    /// Probability that a single emission in a window is counted.
    pub fn detection_probability(&self) -> f64 {
        self.epsilon * self.live_fraction()
    }
}

fn detected(p: &DetectorParams, rng: &mut Rng) -> bool {
    if p.dead > 0.0 && rng.random::<f64>() * p.cycle < p.dead {
        return false;
    }
    p.epsilon > 0.0 && rng.random::<f64>() < p.epsilon
}

fn dark_counts(p: &DetectorParams, span: f64, rng: &mut Rng) -> u64 {
    let mean = p.gamma_dc * span;
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as u64
}

/// Clicks registered in `[t0, t1)` for the given emission times.
pub fn count_window(
    emissions: impl IntoIterator<Item = f64>,
    window: (f64, f64),
    p: &DetectorParams,
    rng: &mut Rng,
) -> Result<u64> {
    let (t0, t1) = window;
    if !(t1 > t0) {
        return Err(Error::InvalidParameter(format!("empty window [{t0}, {t1})")));
    }
    let mut n = 0;
    for t in emissions {
        if t >= t0 && t < t1 && detected(p, rng) {
            n += 1;
        }
    }
    Ok(n + dark_counts(p, t1 - t0, rng))
}

/// Click times in `[t0, t1)`, emissions and dark counts merged and sorted.
pub fn click_times(
    emissions: impl IntoIterator<Item = f64>,
    window: (f64, f64),
    p: &DetectorParams,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let (t0, t1) = window;
    if !(t1 > t0) {
        return Err(Error::InvalidParameter(format!("empty window [{t0}, {t1})")));
    }
    let mut out: Vec<f64> = emissions
        .into_iter()
        .filter(|&t| t >= t0 && t < t1)
        .collect::<Vec<_>>()
        .into_iter()
        .filter(|_| detected(p, rng))
        .collect();
    let n_dark = dark_counts(p, t1 - t0, rng);
    out.extend((0..n_dark).map(|_| t0 + (t1 - t0) * rng.random::<f64>()));
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Mean clicks per shot versus time since the start of the first detection
/// window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluorescenceCurve {
    /// Bin centres (s).
    pub time: Vec<f64>,
    /// Mean clicks per shot per bin.
    pub counts: Vec<f64>,
    /// Bin width (s).
    pub bin: f64,
    pub shots: usize,
}

impl FluorescenceCurve {
    /// Count rate per bin (1/s).
    pub fn rate(&self) -> Vec<f64> {
        self.counts.iter().map(|c| c / self.bin).collect()
    }

    /// Clicks per shot above a flat background of `gamma_dc`.
    pub fn signal_integral(&self, gamma_dc: f64) -> f64 {
        self.counts.iter().map(|c| c - gamma_dc * self.bin).sum()
    }
}

/// Histogram of clicks over the first detection window of every trajectory.
pub fn fluorescence_curve(
    ensemble: &[Trajectory],
    bin: f64,
    p: &DetectorParams,
    rng: &mut Rng,
) -> Result<FluorescenceCurve> {
    if !(bin > 0.0) {
        return Err(Error::InvalidParameter(format!("bin width must be positive, got {bin}")));
    }
    let (t0, t1) = ensemble
        .iter()
        .find_map(|t| t.windows.first().copied())
        .ok_or_else(|| Error::InvalidParameter("ensemble has no detection window".into()))?;
    let n_bins = ((t1 - t0) / bin).floor() as usize;
    if n_bins == 0 {
        return Err(Error::InvalidParameter("window shorter than one bin".into()));
    }
    let span = n_bins as f64 * bin;
    let mut hist = vec![0u64; n_bins];
    let mut shots = 0usize;
    for traj in ensemble {
        let Some(&(w0, _)) = traj.windows.first() else { continue };
        shots += 1;
        let clicks = click_times(traj.emission_times(), (w0, w0 + span), p, rng)?;
        for c in clicks {
            let k = ((c - w0) / bin) as usize;
            hist[k.min(n_bins - 1)] += 1;
        }
    }
    Ok(FluorescenceCurve {
        time: (0..n_bins).map(|k| (k as f64 + 0.5) * bin).collect(),
        counts: hist.iter().map(|&h| h as f64 / shots as f64).collect(),
        bin,
        shots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn nothing_in_nothing_out() {
        let p = DetectorParams::new(0.0, 0.0).unwrap();
        let mut r = rng::stream(1, 0);
        for _ in 0..1000 {
            assert_eq!(count_window([0.5, 0.7], (0.0, 1.0), &p, &mut r).unwrap(), 0);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(DetectorParams::new(1.2, 0.0).is_err());
        assert!(DetectorParams::new(0.5, -1.0).is_err());
        assert!(DetectorParams::new(0.5, 1.0).unwrap().with_dead_time(2e-6, 2e-6).is_err());
        let p = DetectorParams::new(0.5, 1.0).unwrap();
        assert!(count_window([], (1.0, 1.0), &p, &mut rng::stream(0, 0)).is_err());
    }

    #[test]
    fn emissions_outside_window_are_ignored() {
        let p = DetectorParams::new(1.0, 0.0).unwrap();
        let mut r = rng::stream(2, 0);
        assert_eq!(count_window([-0.1, 0.2, 1.0, 3.0], (0.0, 1.0), &p, &mut r).unwrap(), 1);
    }

    #[test]
    fn dead_time_scales_efficiency() {
        let p = DetectorParams::new(1.0, 0.0).unwrap().with_dead_time(17e-6, 2e-6).unwrap();
        let mut r = rng::stream(3, 0);
        let n = 100_000;
        let hits: u64 = (0..n).map(|_| count_window([0.5], (0.0, 1.0), &p, &mut r).unwrap()).sum();
        let f = hits as f64 / n as f64;
        let expect = p.live_fraction();
        let sigma = (expect * (1.0 - expect) / n as f64).sqrt();
        assert!((f - expect).abs() < 4.0 * sigma, "{f} vs {expect}");
    }
}
