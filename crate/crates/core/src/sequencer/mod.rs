//! Measurement protocols executed shot by shot on a persistent simulated
//! sample.
//!
//! A [`Lab`] owns the stochastic state of one experiment run: the spin
//! state, the detector's random stream, the spectral-diffusion process, an
//! optional linear frequency drift, and the frequency correction applied to
//! every pulse. Protocols are functions over `&mut Lab`; they run strictly
//! sequentially so that slow processes (nuclear jumps, drift, tracking)
//! carry over from one shot to the next.

mod config;
mod protocols;
mod tracking;

pub use config::{
    CoherenceKind, CoherenceParams, DnpParams, EldorParams, ExperimentConfig, Protocol, PulseShape, ReadoutMode,
    ReadoutParams, SweepParams, TraceParams, TrackingMode, TrackingParams,
};
pub use protocols::{
    coherence_scan, dnp_experiment, dnp_prepare, eldor_scan, measure_nucleus, run_experiment, single_shot_readout,
    spectroscopy_sweep, spectrum_center, trace_experiment, CoherenceCurve, DnpCurve, EldorSpectrum,
    ExperimentOutput, PreparationRecord, ReadoutRecord, Spectrum, Trace,
};
pub use tracking::{ramsey_sensor, track_step, tracking_run, TrackerState, TrackingRecord};

use rand::Rng as _;

use crate::detector::{count_window, DetectorParams};
use crate::dynamics::{
    amplitude_for_angle, DiffusionState, Engine, PulseSchedule, PulseSegment, SegmentKind, SpectralDiffusion,
    SystemState,
};
use crate::rng::{self, Rng};
use crate::spin::{NuclearConfig, TransitionKind};
use crate::{Error, Result};

/// Outcome of one shot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shot {
    /// Clicks summed over the shot's detection windows.
    pub counts: u64,
    /// Decays out of excited levels during the shot.
    pub decays: u32,
    /// Whether the electron was excited right after the drive segments.
    pub excited: bool,
}

/// A simulated sample, detector and clock shared by consecutive protocols.
#[derive(Debug, Clone)]
pub struct Lab {
    engine: Engine,
    detector: DetectorParams,
    state: SystemState,
    det_rng: Rng,
    diff_rng: Rng,
    diffusion: SpectralDiffusion,
    diffusion_state: DiffusionState,
    /// Linear drift of every electron transition (rad/s per s).
    drift_rate: f64,
    /// Added to every pulse carrier (rad/s).
    correction: f64,
    decays: u64,
}

impl Lab {
    /// Electron in its ground manifold, nuclei in `nuclear`.
    pub fn new(engine: Engine, detector: DetectorParams, nuclear: NuclearConfig, seed: u64) -> Result<Self> {
        let detector = detector.validated()?;
        let n = engine.system().n_nuclei();
        if n < 32 && nuclear.0 >> n != 0 {
            return Err(Error::InvalidParameter(format!(
                "nuclear configuration {:#b} has bits beyond {n} nuclei",
                nuclear.0
            )));
        }
        let level = engine.system().level_index(false, nuclear);
        let state = engine.initial_state(level, rng::stream(seed, 0));
        Ok(Self {
            engine,
            detector,
            state,
            det_rng: rng::stream(seed, 1),
            diff_rng: rng::stream(seed, 2),
            diffusion: SpectralDiffusion::default(),
            diffusion_state: DiffusionState::default(),
            drift_rate: 0.0,
            correction: 0.0,
            decays: 0,
        })
    }

    pub fn with_diffusion(mut self, d: SpectralDiffusion) -> Self {
        self.diffusion = d;
        self
    }

    pub fn with_drift(mut self, rate: f64) -> Self {
        self.drift_rate = rate;
        self
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn detector(&self) -> &DetectorParams {
        &self.detector
    }

    /// Elapsed experiment time (s).
    pub fn time(&self) -> f64 {
        self.state.time
    }

    /// Advance the clock without driving.
    pub fn idle(&mut self, duration: f64) {
        if duration > 0.0 {
            let mut ev = Vec::new();
            self.engine.sample_relaxation(&mut self.state, duration, &mut ev);
            self.decays += ev.len() as u64;
            self.diffusion_step(duration);
        }
    }

    /// Decays out of excited levels since the lab was created.
    pub fn decays(&self) -> u64 {
        self.decays
    }

    /// Nuclear configuration of the current level, without collapsing.
    pub fn nuclear(&self) -> NuclearConfig {
        self.engine.system().levels()[self.state.peek_level()].nuclear
    }

    /// Put the electron in its ground manifold with nuclei in `cfg`.
    pub fn set_nuclear(&mut self, cfg: NuclearConfig) {
        let level = self.engine.system().level_index(false, cfg);
        self.state.set_level(level);
    }

    /// A uniformly random nuclear configuration, drawn from the sample stream.
    pub fn randomize_nuclear(&mut self) {
        let n = self.engine.system().n_nuclei();
        let bits: u32 = if n == 0 { 0 } else { self.state.rng.random::<u32>() & ((1u32 << n) - 1) };
        self.set_nuclear(NuclearConfig(bits));
    }

    pub fn correction(&self) -> f64 {
        self.correction
    }

    pub fn set_correction(&mut self, c: f64) {
        self.correction = c;
    }

    /// Current drift of the electron frequencies (rad/s), excluding the
    /// per-shot quasi-static part.
    pub fn drift_offset(&self) -> f64 {
        self.drift_rate * self.state.time + self.diffusion.offset(&self.diffusion_state)
    }

    fn diffusion_step(&mut self, dt: f64) {
        if self.diffusion.is_active() {
            self.diffusion.advance(&mut self.diffusion_state, dt, &mut self.diff_rng);
        }
    }

    /// Drive `segments` (carriers shifted by the current correction), then
    /// count for `window` seconds.
    pub fn shot(&mut self, segments: &[PulseSegment], window: f64) -> Result<Shot> {
        let start = self.state.time;
        let offset = self.drift_offset();
        self.engine.new_shot(&mut self.state, offset);
        let mut events = Vec::new();
        for seg in segments {
            let mut seg = *seg;
            if seg.is_drive() {
                seg.carrier += self.correction;
            }
            self.engine.apply_pulse(&mut self.state, &seg, &mut events)?;
        }
        let half = self.engine.system().n_levels() / 2;
        let excited = self.state.level() >= half;
        let mut counts = 0;
        if window > 0.0 {
            let schedule = PulseSchedule::new().push(PulseSegment::detect(window));
            let traj = self.engine.run_schedule(&mut self.state, &schedule)?;
            let mut emissions: Vec<f64> = events.iter().filter(|e| e.photon).map(|e| e.time).collect();
            emissions.extend(traj.emission_times());
            events.extend(traj.events.iter().copied());
            let blank = if segments.iter().any(|s| s.is_drive()) { self.engine.options().blanking.min(window) } else { 0.0 };
            let (w0, w1) = (traj.windows[0].0 + blank, traj.windows[0].1);
            counts = count_window(emissions, (w0, w1), &self.detector, &mut self.det_rng)?;
        }
        self.decays += events.len() as u64;
        self.diffusion_step(self.state.time - start);
        Ok(Shot {
            counts,
            decays: events.len() as u32,
            excited,
        })
    }

    /// Peak amplitude of a pulse of this shape rotating `transition` by
    /// `angle`, accounting for its matrix element and the cavity filter at
    /// `carrier`.
    pub fn amplitude_for(&self, transition: usize, kind: SegmentKind, duration: f64, angle: f64, carrier: f64) -> f64 {
        let sys = self.engine.system();
        let tr = sys.transition(transition);
        let filter = sys.cavity.filter_amplitude(carrier - sys.cavity.omega_0);
        amplitude_for_angle(kind, duration, angle) / (2.0 * tr.matrix_element * filter)
    }

    /// Calibrated π pulse resonant with `transition` (AC-Zeeman shift
    /// included for forbidden lines at the drive the pulse itself applies).
    pub fn pi_pulse(&self, transition: usize, kind: SegmentKind, duration: f64) -> Result<PulseSegment> {
        let sys = self.engine.system();
        let tr = *sys.transition(transition);
        let mut carrier = tr.frequency;
        let mut amp = self.amplitude_for(transition, kind, duration, std::f64::consts::PI, carrier);
        if let (Some(k), Some(fk)) = (tr.kind.flipped_nucleus(), tr.kind.forbidden_kind()) {
            if self.engine.options().ac_zeeman {
                if kind != SegmentKind::Square {
                    return Err(Error::InvalidParameter(
                        "AC-Zeeman-compensated forbidden π pulses must be square".into(),
                    ));
                }
                // The shift moves the carrier, which moves the filter; a few
                // fixed-point passes converge at these detunings.
                let mut solver = crate::spin::ForbiddenLineShift::new(sys.params.coupling(k), fk)?;
                for _ in 0..3 {
                    let filter = sys.cavity.filter_amplitude(carrier - sys.cavity.omega_0);
                    let peak = amp * filter;
                    carrier = tr.frequency + solver.shift(peak)?;
                    amp = self.amplitude_for(transition, kind, duration, std::f64::consts::PI, carrier);
                }
            }
        }
        Ok(PulseSegment::drive(kind, carrier, amp, duration))
    }

    /// Transition index of `kind` out of the ground level with nuclei `cfg`.
    pub fn transition_from(&self, cfg: NuclearConfig, kind: TransitionKind) -> Result<usize> {
        let sys = self.engine.system();
        let n = sys.n_nuclei();
        let idx = match kind {
            TransitionKind::Allowed => sys.allowed(cfg),
            TransitionKind::ZeroQuantum(k) if k < n => sys.zero_quantum(k, cfg),
            TransitionKind::DoubleQuantum(k) if k < n => sys.double_quantum(k, cfg),
            _ => return Err(Error::InvalidParameter(format!("no transition of kind {kind:?}"))),
        };
        Ok(idx)
    }
}
