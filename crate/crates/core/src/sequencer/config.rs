use serde::{Deserialize, Serialize};

use crate::dynamics::SegmentKind;
use crate::spin::NuclearState;
use crate::units::{hz, khz};
use crate::{Error, Result};

/// Shape of the pulses a protocol applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseShape {
    pub kind: SegmentKind,
    /// s
    pub duration: f64,
    /// Peak drive (rad/s); `None` calibrates a rotation on the addressed line.
    pub amplitude: Option<f64>,
}

impl PulseShape {
    pub fn gaussian_pi() -> Self {
        Self {
            kind: SegmentKind::GaussianPi,
            duration: 80e-6,
            amplitude: None,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::InvalidParameter(format!("{what}: pulse duration must be positive")));
        }
        if let Some(a) = self.amplitude {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::InvalidParameter(format!("{what}: pulse amplitude must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Stepped-frequency sweep around the electron Larmor frequency ω_S.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepParams {
    /// Sweep centre relative to ω_S (rad/s).
    pub center: f64,
    /// rad/s
    pub span: f64,
    /// rad/s
    pub step: f64,
    /// Complete sweeps averaged into one spectrum.
    pub averages: usize,
    /// Integration window after each pulse (s).
    pub tau_int: f64,
    pub pulse: PulseShape,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            center: 0.0,
            span: khz(100.0),
            step: khz(2.0),
            averages: 200,
            tau_int: 2.0e-3,
            pulse: PulseShape::gaussian_pi(),
        }
    }
}

impl SweepParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(Error::InvalidParameter("sweep step must be positive".into()));
        }
        if !(self.span >= 0.0 && self.span.is_finite()) {
            return Err(Error::InvalidParameter("sweep span must be non-negative".into()));
        }
        if self.averages < 1 {
            return Err(Error::InvalidParameter("averages must be at least 1".into()));
        }
        if !(self.tau_int > 0.0) {
            return Err(Error::InvalidParameter("integration window must be positive".into()));
        }
        self.pulse.validate("sweep")
    }

    /// Sweep points relative to ω_S (rad/s), low to high.
    pub fn points(&self) -> Vec<f64> {
        let n = (self.span / self.step + 1e-9).floor() as usize + 1;
        let lo = self.center - 0.5 * (n - 1) as f64 * self.step;
        (0..n).map(|i| lo + i as f64 * self.step).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceParams {
    pub sweep: SweepParams,
    /// Acquisition stops with the first spectrum ending after this time (s).
    pub duration: f64,
}

impl TraceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::InvalidParameter("trace duration must be positive".into()));
        }
        self.sweep.validate()
    }
}

/// How a protocol learns the nuclear state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ReadoutMode {
    /// Read the simulated state directly, without disturbing it.
    Ideal,
    /// Interleaved π pulses and detection windows on both allowed lines.
    Simulated(ReadoutParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReadoutParams {
    /// π-pulse/window pairs per allowed line.
    pub n_ro: usize,
    /// Detection window after each pulse (s).
    pub t_d: f64,
    pub pulse: PulseShape,
}

impl Default for ReadoutParams {
    fn default() -> Self {
        Self {
            n_ro: 1000,
            t_d: 2.6e-3,
            pulse: PulseShape::gaussian_pi(),
        }
    }
}

impl ReadoutParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_ro < 1 {
            return Err(Error::InvalidParameter("N_RO must be at least 1".into()));
        }
        if !(self.t_d > 0.0) {
            return Err(Error::InvalidParameter("readout window must be positive".into()));
        }
        self.pulse.validate("readout")
    }
}

/// Solid-effect polarization by π pulses on forbidden lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnpParams {
    pub target: NuclearState,
    pub n_prep: usize,
    /// Wait after each pulse (s); `None` is 3/Γ_R.
    pub tau_w: Option<f64>,
    /// Square π-pulse duration (s).
    pub pulse_duration: f64,
    /// Nuclei to polarize; `None` is all of them.
    pub nuclei: Option<Vec<usize>>,
}

impl Default for DnpParams {
    fn default() -> Self {
        Self {
            target: NuclearState::Down,
            n_prep: 2,
            tau_w: None,
            pulse_duration: 40e-6,
            nuclei: None,
        }
    }
}

impl DnpParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.pulse_duration > 0.0) {
            return Err(Error::InvalidParameter("preparation pulse duration must be positive".into()));
        }
        if let Some(t) = self.tau_w {
            if !(t >= 0.0) {
                return Err(Error::InvalidParameter("τ_w must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Flat-top pulse scanned across a forbidden line after preparation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EldorParams {
    pub prepare: DnpParams,
    /// Scan points relative to ω_S (rad/s).
    pub center: f64,
    pub span: f64,
    pub step: f64,
    /// Allowed-transition Rabi frequency of the drive at its own carrier
    /// (rad/s), i.e. after the cavity filter.
    pub drive: f64,
    /// s
    pub duration: f64,
    /// Gaussian edge length (s).
    pub rise: f64,
    /// Repetitions per scan point.
    pub averages: usize,
    pub readout: ReadoutMode,
}

impl EldorParams {
    pub fn validate(&self) -> Result<()> {
        self.prepare.validate()?;
        if !(self.step > 0.0) {
            return Err(Error::InvalidParameter("scan step must be positive".into()));
        }
        if self.averages < 1 {
            return Err(Error::InvalidParameter("averages must be at least 1".into()));
        }
        if !(self.drive >= 0.0 && self.duration > 0.0 && self.rise >= 0.0 && 2.0 * self.rise <= self.duration) {
            return Err(Error::InvalidParameter("flat-top pulse parameters are inconsistent".into()));
        }
        if let ReadoutMode::Simulated(r) = &self.readout {
            r.validate()?;
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<f64> {
        SweepParams {
            center: self.center,
            span: self.span,
            step: self.step,
            ..SweepParams::default()
        }
        .points()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoherenceKind {
    Rabi,
    Ramsey,
    Echo,
}

/// Rabi, Ramsey or Hahn-echo scan on the allowed line of the current
/// nuclear state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceParams {
    pub kind: CoherenceKind,
    /// Pulse lengths (Rabi) or total free evolution times (s).
    pub delays: Vec<f64>,
    /// Carrier minus line frequency (rad/s).
    pub detuning: f64,
    /// π/2 pulse for Ramsey/echo; the drive shape for Rabi.
    pub pulse: PulseShape,
    pub shots: usize,
    /// Detection window after the sequence (s); the electron also relaxes
    /// during it before the next shot.
    pub tau_int: f64,
}

impl CoherenceParams {
    pub fn validate(&self) -> Result<()> {
        if self.delays.is_empty() || self.delays.iter().any(|&d| !(d >= 0.0)) {
            return Err(Error::InvalidParameter("delays must be non-empty and non-negative".into()));
        }
        if self.shots < 1 {
            return Err(Error::InvalidParameter("shots must be at least 1".into()));
        }
        if !(self.tau_int >= 0.0) {
            return Err(Error::InvalidParameter("integration window must be non-negative".into()));
        }
        self.pulse.validate("coherence")
    }
}

/// Closed-loop frequency tracking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingParams {
    /// Proportional gain (rad/s per count).
    pub p: f64,
    /// Integral gain (rad/s per count).
    pub i: f64,
    /// Filter memory in tracking steps; at least 1.
    pub f: f64,
    /// Ramsey free-evolution delay (s).
    pub tau: f64,
    /// ± phase Ramsey pairs per tracking step.
    pub n_track: usize,
    /// π/2 pulse.
    pub pulse: PulseShape,
    /// Detection window after each Ramsey sequence (s).
    pub tau_int: f64,
}

impl Default for TrackingParams {
    fn default() -> Self {
        Self {
            p: hz(10.0),
            i: hz(0.008),
            f: 2000.0,
            tau: 20e-6,
            n_track: 10,
            pulse: PulseShape {
                kind: SegmentKind::Square,
                duration: 4e-6,
                amplitude: None,
            },
            tau_int: 2.0e-3,
        }
    }
}

impl TrackingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.f >= 1.0) {
            return Err(Error::InvalidParameter(format!("filter memory f must be at least 1, got {}", self.f)));
        }
        if self.n_track < 1 {
            return Err(Error::InvalidParameter("N_track must be at least 1".into()));
        }
        if !(self.tau >= 0.0 && self.tau_int > 0.0) {
            return Err(Error::InvalidParameter("Ramsey delay and window must be valid".into()));
        }
        self.pulse.validate("tracking")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackingMode {
    Off,
    /// Recentre on a running mean of the fitted spectrum centres.
    Spectral,
    /// Interleave Ramsey sensor pairs after every sweep.
    PiLoop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Protocol {
    Spectroscopy(SweepParams),
    Trace(TraceParams),
    Readout { params: ReadoutParams, repetitions: usize },
    Eldor(EldorParams),
    Dnp { params: DnpParams, n_prep: Vec<usize>, repetitions: usize, readout: ReadoutMode },
    Coherence(CoherenceParams),
    Tracking { duration: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub protocol: Protocol,
    pub tracking: TrackingMode,
    pub tracker: TrackingParams,
}

impl ExperimentConfig {
    pub fn new(name: impl Into<String>, protocol: Protocol) -> Self {
        Self {
            name: name.into(),
            protocol,
            tracking: TrackingMode::Off,
            tracker: TrackingParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tracking != TrackingMode::Off || matches!(self.protocol, Protocol::Tracking { .. }) {
            self.tracker.validate()?;
        }
        match &self.protocol {
            Protocol::Spectroscopy(s) => s.validate(),
            Protocol::Trace(t) => t.validate(),
            Protocol::Readout { params, repetitions } => {
                if *repetitions < 1 {
                    return Err(Error::InvalidParameter("repetitions must be at least 1".into()));
                }
                params.validate()
            }
            Protocol::Eldor(e) => e.validate(),
            Protocol::Dnp {
                params,
                n_prep,
                repetitions,
                readout,
            } => {
                if n_prep.is_empty() || *repetitions < 1 {
                    return Err(Error::InvalidParameter("DNP needs N_prep values and repetitions ≥ 1".into()));
                }
                if let ReadoutMode::Simulated(r) = readout {
                    r.validate()?;
                }
                params.validate()
            }
            Protocol::Coherence(c) => c.validate(),
            Protocol::Tracking { duration } => {
                if !(*duration > 0.0) {
                    return Err(Error::InvalidParameter("tracking duration must be positive".into()));
                }
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sweep_has_51_points_centred() {
        let p = SweepParams::default().points();
        assert_eq!(p.len(), 51);
        assert!(p[25].abs() < 1e-6);
        assert!((p[50] - p[0] - khz(100.0)).abs() < 1e-6);
    }

    #[test]
    fn invariants_are_enforced() {
        let mut s = SweepParams::default();
        s.step = 0.0;
        assert!(s.validate().is_err());
        let mut s = SweepParams::default();
        s.averages = 0;
        assert!(s.validate().is_err());
        let mut t = TrackingParams::default();
        t.f = 0.5;
        assert!(t.validate().is_err());
    }
}
