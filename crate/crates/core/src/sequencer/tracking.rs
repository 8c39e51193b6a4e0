//! Closed-loop correction of a slowly drifting electron frequency.
//!
//! The sensor is the click difference between Ramsey sequences whose second
//! π/2 pulse is phased +90° and −90°. It vanishes on resonance and is odd
//! and, for τ·|Δ| ≪ 1, linear in the detuning Δ of the line from the
//! carrier.

use serde::{Deserialize, Serialize};

use super::config::TrackingParams;
use super::Lab;
use crate::dynamics::PulseSegment;
use crate::spin::TransitionKind;
use crate::units::to_hz;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerState {
    /// Filtered sensor (counts).
    pub y: f64,
    /// Σ of `y` over all steps (counts).
    pub sum_y: f64,
    pub params: TrackingParams,
}

impl TrackerState {
    pub fn new(params: TrackingParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            y: 0.0,
            sum_y: 0.0,
            params,
        })
    }

    /// P·Y + I·ΣY (rad/s).
    pub fn correction(&self) -> f64 {
        self.params.p * self.y + self.params.i * self.sum_y
    }
}

/// Fold one sensor reading into the tracker and return the carrier
/// correction to apply from now on.
pub fn track_step(t: &TrackerState, c: f64, c_bar: f64) -> (TrackerState, f64) {
    let mut next = *t;
    next.y = (1.0 - 1.0 / t.params.f) * t.y + (c - c_bar);
    next.sum_y += next.y;
    let corr = next.correction();
    (next, corr)
}

/// N_track Ramsey pairs on `line`; returns (C, C̄). C grows when the line
/// lies above the corrected carrier.
pub fn ramsey_sensor(lab: &mut Lab, line: usize, p: &TrackingParams) -> Result<(f64, f64)> {
    let freq = lab.engine().system().transition(line).frequency;
    let amp = p.pulse.amplitude.unwrap_or_else(|| {
        lab.amplitude_for(line, p.pulse.kind, p.pulse.duration, std::f64::consts::FRAC_PI_2, freq)
    });
    let first = PulseSegment::drive(p.pulse.kind, freq, amp, p.pulse.duration);
    let mut seq = vec![first];
    if p.tau > 0.0 {
        seq.push(PulseSegment::wait(p.tau));
    }
    let h = std::f64::consts::FRAC_PI_2;
    let mut plus = seq.clone();
    plus.push(first.with_phase(h));
    let mut minus = seq;
    minus.push(first.with_phase(-h));
    let (mut c, mut cb) = (0u64, 0u64);
    for _ in 0..p.n_track {
        c += lab.shot(&plus, p.tau_int)?.counts;
        cb += lab.shot(&minus, p.tau_int)?.counts;
    }
    Ok((c as f64, cb as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingRecord {
    /// End of each tracking step (s).
    pub time: Vec<f64>,
    /// Correction applied after each step (Hz).
    pub correction_hz: Vec<f64>,
    /// Line drift minus correction at the end of each step (Hz).
    pub residual_hz: Vec<f64>,
    /// C − C̄ of each step.
    pub sensor: Vec<f64>,
}

impl TrackingRecord {
    /// RMS residual over steps ending after `t0` (Hz).
    pub fn rms_residual_after(&self, t0: f64) -> Option<f64> {
        let r: Vec<f64> = self
            .time
            .iter()
            .zip(&self.residual_hz)
            .filter(|(t, _)| **t >= t0)
            .map(|(_, r)| *r)
            .collect();
        if r.is_empty() {
            return None;
        }
        Some((r.iter().map(|x| x * x).sum::<f64>() / r.len() as f64).sqrt())
    }
}

/// Run only the tracking loop for `duration` seconds on the allowed line of
/// the current nuclear state.
pub fn tracking_run(lab: &mut Lab, p: &TrackingParams, duration: f64) -> Result<TrackingRecord> {
    let mut t = TrackerState::new(*p)?;
    let t0 = lab.time();
    let mut rec = TrackingRecord {
        time: Vec::new(),
        correction_hz: Vec::new(),
        residual_hz: Vec::new(),
        sensor: Vec::new(),
    };
    while lab.time() - t0 < duration {
        let line = lab.transition_from(lab.nuclear(), TransitionKind::Allowed)?;
        let (c, cb) = ramsey_sensor(lab, line, p)?;
        let (next, corr) = track_step(&t, c, cb);
        t = next;
        lab.set_correction(corr);
        rec.time.push(lab.time() - t0);
        rec.correction_hz.push(to_hz(corr));
        rec.residual_hz.push(to_hz(lab.drift_offset() - corr));
        rec.sensor.push(c - cb);
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn setpoint_gives_no_correction() {
        let mut t = TrackerState::new(TrackingParams::default()).unwrap();
        for _ in 0..10_000 {
            let (n, c) = track_step(&t, 7.0, 7.0);
            assert_eq!(c, 0.0);
            t = n;
        }
        assert_eq!(t.y, 0.0);
        assert_eq!(t.sum_y, 0.0);
    }

    #[test]
    fn memory_recursion() {
        let p = TrackingParams {
            f: 4.0,
            p: 2.0,
            i: 0.5,
            ..TrackingParams::default()
        };
        let t = TrackerState::new(p).unwrap();
        let (t, c) = track_step(&t, 3.0, 1.0);
        assert_eq!((t.y, t.sum_y, c), (2.0, 2.0, 5.0));
        let (t, c) = track_step(&t, 1.0, 1.0);
        assert_eq!((t.y, t.sum_y, c), (1.5, 3.5, 4.75));
    }
}
