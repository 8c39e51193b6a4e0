use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::{
    CoherenceKind, CoherenceParams, DnpParams, EldorParams, ExperimentConfig, Protocol, PulseShape, ReadoutMode,
    ReadoutParams, SweepParams, TraceParams, TrackingMode, TrackingParams,
};
use super::tracking::{ramsey_sensor, track_step, tracking_run, TrackerState, TrackingRecord};
use super::Lab;
use crate::analysis::fit_lorentzian;
use crate::dynamics::{PulseSegment, SegmentKind};
use crate::spin::{NuclearConfig, NuclearState, TransitionKind};
use crate::units::to_hz;
use crate::{Error, Result};

/// Fraction of the spectral centre error removed per spectrum in
/// [`TrackingMode::Spectral`].
const SPECTRAL_GAIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// Carrier offset from ω_S before tracking correction (Hz).
    pub detuning_hz: Vec<f64>,
    /// Mean clicks per shot.
    pub counts: Vec<f64>,
    pub averages: usize,
    /// Electron decays during acquisition, one per completed excitation.
    pub excitations: u64,
    /// s
    pub start: f64,
    /// s
    pub end: f64,
    pub final_nuclear: NuclearConfig,
}

/// Peak amplitude of a calibrated pulse on `transition`, or the configured one.
fn pulse_amplitude(lab: &Lab, shape: &PulseShape, transition: usize, angle: f64, carrier: f64) -> f64 {
    shape
        .amplitude
        .unwrap_or_else(|| lab.amplitude_for(transition, shape.kind, shape.duration, angle, carrier))
}

/// One spectrum: `averages` complete sweeps of π pulses, each followed by an
/// integration window.
pub fn spectroscopy_sweep(lab: &mut Lab, p: &SweepParams) -> Result<Spectrum> {
    p.validate()?;
    let omega_s = lab.engine().system().params.omega_s;
    let line = lab.transition_from(lab.nuclear(), TransitionKind::Allowed)?;
    let amp = pulse_amplitude(lab, &p.pulse, line, std::f64::consts::PI, lab.engine().system().transition(line).frequency);
    let points = p.points();
    let mut sums = vec![0u64; points.len()];
    let start = lab.time();
    let d0 = lab.decays();
    for _ in 0..p.averages {
        for (k, &d) in points.iter().enumerate() {
            let seg = PulseSegment::drive(p.pulse.kind, omega_s + d, amp, p.pulse.duration);
            sums[k] += lab.shot(&[seg], p.tau_int)?.counts;
        }
    }
    Ok(Spectrum {
        detuning_hz: points.iter().map(|&d| to_hz(d)).collect(),
        counts: sums.iter().map(|&c| c as f64 / p.averages as f64).collect(),
        averages: p.averages,
        excitations: lab.decays() - d0,
        start,
        end: lab.time(),
        final_nuclear: lab.nuclear(),
    })
}

/// Centre of the dominant peak (Hz): a Lorentzian fit over the points within
/// a sixth of the span of the smoothed maximum, or the background-subtracted
/// centroid around the maximum when the fit fails or leaves that window.
pub fn spectrum_center(s: &Spectrum) -> f64 {
    let x = &s.detuning_hz;
    let n = x.len();
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
            s.counts[a..=b].iter().sum::<f64>() / (b - a + 1) as f64
        })
        .collect();
    let imax = smooth
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    // Keeps a second line of a mixed-state spectrum out of the fit.
    let half = (x[n - 1] - x[0]).abs() / 6.0;
    let idx: Vec<usize> = (0..n).filter(|&i| (x[i] - x[imax]).abs() <= half).collect();
    let (lo, hi) = (x[idx[0]], x[idx[idx.len() - 1]]);
    if idx.len() >= 6 {
        let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| s.counts[i]).collect();
        if let Ok(f) = fit_lorentzian(&xs, &ys) {
            if f.center.is_finite() && f.center >= lo && f.center <= hi && f.amplitude > 0.0 && f.fwhm > 0.0 {
                return f.center;
            }
        }
    }
    let mut sorted = s.counts.clone();
    sorted.sort_by(f64::total_cmp);
    let base = sorted[sorted.len() / 2];
    let (a, b) = (imax.saturating_sub(3), (imax + 3).min(n - 1));
    let (mut w, mut wx) = (0.0, 0.0);
    for i in a..=b {
        let y = (s.counts[i] - base).max(0.0);
        w += y;
        wx += y * x[i];
    }
    if w > 0.0 {
        wx / w
    } else {
        x[imax]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub spectra: Vec<Spectrum>,
    /// Fitted centre of each spectrum (Hz).
    pub centers_hz: Vec<f64>,
    /// Carrier correction in force during each spectrum (Hz).
    pub corrections_hz: Vec<f64>,
}

impl Trace {
    /// Excitations per spectrum, for the cross-relaxation estimate.
    pub fn excitations(&self) -> Vec<f64> {
        self.spectra.iter().map(|s| s.excitations as f64).collect()
    }

    /// Nuclear flips of the simulated sample between consecutive spectra.
    pub fn true_jumps(&self) -> usize {
        self.spectra.windows(2).filter(|w| w[0].final_nuclear != w[1].final_nuclear).count()
    }
}

/// Consecutive spectra for `p.duration` seconds, with the sample evolving
/// continuously.
pub fn trace_experiment(lab: &mut Lab, p: &TraceParams, mode: TrackingMode, tracker: &TrackingParams) -> Result<Trace> {
    p.validate()?;
    if mode != TrackingMode::Off {
        tracker.validate()?;
    }
    let t0 = lab.time();
    let mut out = Trace {
        spectra: Vec::new(),
        centers_hz: Vec::new(),
        corrections_hz: Vec::new(),
    };
    let mut ts = TrackerState::new(*tracker)?;
    while lab.time() - t0 < p.duration {
        let corr = lab.correction();
        let s = spectroscopy_sweep(lab, &p.sweep)?;
        let c = spectrum_center(&s);
        match mode {
            TrackingMode::Off => {}
            TrackingMode::Spectral => {
                let err = nearest_line_error(lab, c)?;
                lab.set_correction(lab.correction() + SPECTRAL_GAIN * err);
            }
            TrackingMode::PiLoop => {
                let line = lab.transition_from(lab.nuclear(), TransitionKind::Allowed)?;
                let (cp, cm) = ramsey_sensor(lab, line, tracker)?;
                let (next, corr) = track_step(&ts, cp, cm);
                ts = next;
                lab.set_correction(corr);
            }
        }
        out.centers_hz.push(c);
        out.corrections_hz.push(to_hz(corr));
        out.spectra.push(s);
    }
    Ok(out)
}

/// Offset (rad/s) between a measured centre (Hz, uncorrected frame) and the
/// nearest undrifted allowed line.
fn nearest_line_error(lab: &Lab, center_hz: f64) -> Result<f64> {
    let sys = lab.engine().system();
    let omega_s = sys.params.omega_s;
    let c = crate::units::hz(center_hz);
    let n = sys.n_nuclei();
    (0..1u32 << n)
        .map(|cfg| sys.transition(sys.allowed(NuclearConfig(cfg))).frequency - omega_s)
        .map(|line| c - line)
        .min_by(|a, b| a.abs().total_cmp(&b.abs()))
        .ok_or_else(|| Error::InvalidParameter("system has no allowed line".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReadoutRecord {
    /// Clicks after pulses on the ⇓ allowed line.
    pub c_down: u64,
    /// Clicks after pulses on the ⇑ allowed line.
    pub c_up: u64,
    /// Sign of C_down − C_up; ties are split by a fair coin.
    pub called: NuclearState,
    pub before: NuclearState,
    pub after: NuclearState,
    pub excitations: u64,
}

fn single_nucleus(lab: &Lab) -> Result<()> {
    let n = lab.engine().system().n_nuclei();
    if n != 1 {
        return Err(Error::InvalidParameter(format!("single-shot readout needs one nucleus, system has {n}")));
    }
    Ok(())
}

/// N_RO interleaved π-pulse/window pairs on the ⇓ and ⇑ allowed lines.
pub fn single_shot_readout(lab: &mut Lab, p: &ReadoutParams) -> Result<ReadoutRecord> {
    p.validate()?;
    single_nucleus(lab)?;
    let sys = lab.engine().system();
    let down = sys.allowed(NuclearConfig(1));
    let up = sys.allowed(NuclearConfig::ALL_UP);
    let pulse = |lab: &Lab, t: usize| -> Result<PulseSegment> {
        let mut seg = lab.pi_pulse(t, p.pulse.kind, p.pulse.duration)?;
        if let Some(a) = p.pulse.amplitude {
            seg.amplitude = a;
        }
        Ok(seg)
    };
    let (pd, pu) = (pulse(lab, down)?, pulse(lab, up)?);
    let before = lab.nuclear().state(0);
    let d0 = lab.decays();
    let (mut c_down, mut c_up) = (0, 0);
    for _ in 0..p.n_ro {
        c_down += lab.shot(&[pd], p.t_d)?.counts;
        c_up += lab.shot(&[pu], p.t_d)?.counts;
    }
    let called = match c_down.cmp(&c_up) {
        std::cmp::Ordering::Greater => NuclearState::Down,
        std::cmp::Ordering::Less => NuclearState::Up,
        std::cmp::Ordering::Equal => {
            if lab.det_rng.random::<bool>() {
                NuclearState::Down
            } else {
                NuclearState::Up
            }
        }
    };
    Ok(ReadoutRecord {
        c_down,
        c_up,
        called,
        before,
        after: lab.nuclear().state(0),
        excitations: lab.decays() - d0,
    })
}

/// State of nucleus 0 as seen by `mode`.
pub fn measure_nucleus(lab: &mut Lab, mode: &ReadoutMode) -> Result<(NuclearState, Option<ReadoutRecord>)> {
    match mode {
        ReadoutMode::Ideal => {
            if lab.engine().system().n_nuclei() == 0 {
                return Err(Error::InvalidParameter("system has no nucleus to read".into()));
            }
            Ok((lab.nuclear().state(0), None))
        }
        ReadoutMode::Simulated(p) => {
            let r = single_shot_readout(lab, p)?;
            Ok((r.called, Some(r)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparationRecord {
    pub target: NuclearState,
    pub n_prep: usize,
    /// π pulses applied.
    pub pulses: usize,
    pub before: NuclearConfig,
    pub after: NuclearConfig,
}

fn wait_time(lab: &Lab, p: &DnpParams) -> f64 {
    p.tau_w.unwrap_or_else(|| {
        let sys = lab.engine().system();
        let up = sys.level_index(true, NuclearConfig::ALL_UP);
        let g = lab.engine().decay_rate(up);
        if g > 0.0 {
            3.0 / g
        } else {
            0.0
        }
    })
}

/// N_prep rounds of square π pulses on the forbidden lines that pump the
/// selected nuclei into `p.target`, each followed by τ_w of relaxation.
/// Zero-quantum lines pump into ⇓, double-quantum lines into ⇑. Every
/// spectator configuration of the other nuclei gets its own line.
pub fn dnp_prepare(lab: &mut Lab, p: &DnpParams) -> Result<PreparationRecord> {
    p.validate()?;
    let n = lab.engine().system().n_nuclei();
    let nuclei: Vec<usize> = p.nuclei.clone().unwrap_or_else(|| (0..n).collect());
    if let Some(&k) = nuclei.iter().find(|&&k| k >= n) {
        return Err(Error::InvalidParameter(format!("nucleus {k} of {n}")));
    }
    let mut pulses = Vec::new();
    for &k in &nuclei {
        for cfg in (0..1u32 << n).filter(|c| c >> k & 1 == 0) {
            let kind = match p.target {
                NuclearState::Down => TransitionKind::ZeroQuantum(k),
                NuclearState::Up => TransitionKind::DoubleQuantum(k),
            };
            let t = lab.transition_from(NuclearConfig(cfg), kind)?;
            pulses.push(lab.pi_pulse(t, SegmentKind::Square, p.pulse_duration)?);
        }
    }
    let tau_w = wait_time(lab, p);
    let before = lab.nuclear();
    for _ in 0..p.n_prep {
        for seg in &pulses {
            lab.shot(std::slice::from_ref(seg), 0.0)?;
            lab.idle(tau_w);
        }
    }
    Ok(PreparationRecord {
        target: p.target,
        n_prep: p.n_prep,
        pulses: p.n_prep * pulses.len(),
        before,
        after: lab.nuclear(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnpCurve {
    pub n_prep: Vec<usize>,
    /// Fraction of repetitions read out in the target state.
    pub p_target: Vec<f64>,
    /// Binomial standard error.
    pub sigma: Vec<f64>,
    pub repetitions: usize,
}

/// P(target) versus N_prep, each repetition starting from a random nuclear
/// state.
pub fn dnp_experiment(
    lab: &mut Lab,
    p: &DnpParams,
    n_prep: &[usize],
    repetitions: usize,
    readout: &ReadoutMode,
) -> Result<DnpCurve> {
    if repetitions < 1 {
        return Err(Error::InvalidParameter("repetitions must be at least 1".into()));
    }
    let mut p_target = Vec::with_capacity(n_prep.len());
    let mut sigma = Vec::with_capacity(n_prep.len());
    for &n in n_prep {
        let mut hits = 0usize;
        for _ in 0..repetitions {
            lab.randomize_nuclear();
            dnp_prepare(lab, &DnpParams { n_prep: n, ..p.clone() })?;
            if measure_nucleus(lab, readout)?.0 == p.target {
                hits += 1;
            }
        }
        let f = hits as f64 / repetitions as f64;
        p_target.push(f);
        sigma.push((f * (1.0 - f) / repetitions as f64).sqrt());
    }
    Ok(DnpCurve {
        n_prep: n_prep.to_vec(),
        p_target,
        sigma,
        repetitions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EldorSpectrum {
    /// Carrier offset from ω_S (Hz).
    pub detuning_hz: Vec<f64>,
    /// Fraction of repetitions with nucleus 0 read out in ⇓.
    pub p_down: Vec<f64>,
    pub averages: usize,
}

/// Prepare, apply one flat-top pulse, relax, read out; for every scan point.
pub fn eldor_scan(lab: &mut Lab, p: &EldorParams) -> Result<EldorSpectrum> {
    p.validate()?;
    let sys = lab.engine().system();
    let omega_s = sys.params.omega_s;
    let cavity = sys.cavity;
    let points = p.points();
    let tau_w = wait_time(lab, &p.prepare);
    let mut downs = vec![0usize; points.len()];
    for _ in 0..p.averages {
        for (k, &d) in points.iter().enumerate() {
            dnp_prepare(lab, &p.prepare)?;
            let carrier = omega_s + d;
            let amp = p.drive / cavity.filter_amplitude(carrier - cavity.omega_0);
            let seg = PulseSegment::drive(SegmentKind::FlatTop { rise: p.rise }, carrier, amp, p.duration);
            lab.shot(&[seg], 0.0)?;
            lab.idle(tau_w);
            if measure_nucleus(lab, &p.readout)?.0 == NuclearState::Down {
                downs[k] += 1;
            }
        }
    }
    Ok(EldorSpectrum {
        detuning_hz: points.iter().map(|&d| to_hz(d)).collect(),
        p_down: downs.iter().map(|&c| c as f64 / p.averages as f64).collect(),
        averages: p.averages,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceCurve {
    pub kind: CoherenceKind,
    /// s
    pub delay: Vec<f64>,
    /// Excited fraction right after the sequence. For Ramsey and echo this
    /// is with the final pulse phased to excite at zero delay.
    pub excited: Vec<f64>,
    /// Same with the final pulse phase inverted; empty for Rabi.
    pub excited_inverted: Vec<f64>,
    /// `excited − excited_inverted`: the coherence, free of population
    /// relaxation. Equal to `excited` for Rabi.
    pub contrast: Vec<f64>,
    /// Mean clicks per shot in the window after the sequence.
    pub counts: Vec<f64>,
}

/// Rabi, Ramsey or echo scan on the allowed line of the current nuclear
/// state. The nuclear state should be frozen or η negligible.
pub fn coherence_scan(lab: &mut Lab, p: &CoherenceParams) -> Result<CoherenceCurve> {
    p.validate()?;
    let line = lab.transition_from(lab.nuclear(), TransitionKind::Allowed)?;
    let freq = lab.engine().system().transition(line).frequency;
    let carrier = freq + p.detuning;
    let half_pi = std::f64::consts::FRAC_PI_2;
    let shape = p.pulse;
    let mut out = CoherenceCurve {
        kind: p.kind,
        delay: p.delays.clone(),
        excited: Vec::new(),
        excited_inverted: Vec::new(),
        contrast: Vec::new(),
        counts: Vec::new(),
    };
    for &d in &p.delays {
        let run = |lab: &mut Lab, segs: &[PulseSegment]| -> Result<(f64, f64)> {
            let (mut e, mut c) = (0usize, 0u64);
            for _ in 0..p.shots {
                let s = lab.shot(segs, p.tau_int)?;
                e += s.excited as usize;
                c += s.counts;
            }
            Ok((e as f64 / p.shots as f64, c as f64 / p.shots as f64))
        };
        match p.kind {
            CoherenceKind::Rabi => {
                let amp = pulse_amplitude(lab, &shape, line, std::f64::consts::PI, carrier);
                let segs: Vec<PulseSegment> = if d > 0.0 {
                    vec![PulseSegment::drive(SegmentKind::Square, carrier, amp, d)]
                } else {
                    Vec::new()
                };
                let (e, c) = run(lab, &segs)?;
                out.excited.push(e);
                out.contrast.push(e);
                out.counts.push(c);
            }
            CoherenceKind::Ramsey | CoherenceKind::Echo => {
                let amp = pulse_amplitude(lab, &shape, line, half_pi, carrier);
                let p2 = PulseSegment::drive(shape.kind, carrier, amp, shape.duration);
                let mut seq = vec![p2];
                // Phase of the last pulse that excites at zero delay.
                let excite_phase = if p.kind == CoherenceKind::Ramsey {
                    if d > 0.0 {
                        seq.push(PulseSegment::wait(d));
                    }
                    0.0
                } else {
                    if d > 0.0 {
                        seq.push(PulseSegment::wait(0.5 * d));
                    }
                    seq.push(PulseSegment::drive(shape.kind, carrier, 2.0 * amp, shape.duration));
                    if d > 0.0 {
                        seq.push(PulseSegment::wait(0.5 * d));
                    }
                    std::f64::consts::PI
                };
                let mut a = seq.clone();
                a.push(p2.with_phase(excite_phase));
                let mut b = seq;
                b.push(p2.with_phase(excite_phase + std::f64::consts::PI));
                let (ea, ca) = run(lab, &a)?;
                let (eb, cb) = run(lab, &b)?;
                out.excited.push(ea);
                out.excited_inverted.push(eb);
                out.contrast.push(ea - eb);
                out.counts.push(0.5 * (ca + cb));
            }
        }
    }
    Ok(out)
}

/// Everything a protocol produced, for persistence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExperimentOutput {
    Spectrum(Spectrum),
    Trace(Trace),
    Readout(Vec<ReadoutRecord>),
    Eldor(EldorSpectrum),
    Dnp(DnpCurve),
    Coherence(CoherenceCurve),
    Tracking(TrackingRecord),
}

/// Run one configured experiment on `lab`.
pub fn run_experiment(lab: &mut Lab, cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    Ok(match &cfg.protocol {
        Protocol::Spectroscopy(s) => ExperimentOutput::Spectrum(spectroscopy_sweep(lab, s)?),
        Protocol::Trace(t) => ExperimentOutput::Trace(trace_experiment(lab, t, cfg.tracking, &cfg.tracker)?),
        Protocol::Readout { params, repetitions } => {
            let mut v = Vec::with_capacity(*repetitions);
            for _ in 0..*repetitions {
                v.push(single_shot_readout(lab, params)?);
            }
            ExperimentOutput::Readout(v)
        }
        Protocol::Eldor(e) => ExperimentOutput::Eldor(eldor_scan(lab, e)?),
        Protocol::Dnp {
            params,
            n_prep,
            repetitions,
            readout,
        } => ExperimentOutput::Dnp(dnp_experiment(lab, params, n_prep, *repetitions, readout)?),
        Protocol::Coherence(c) => ExperimentOutput::Coherence(coherence_scan(lab, c)?),
        Protocol::Tracking { duration } => ExperimentOutput::Tracking(tracking_run(lab, &cfg.tracker, *duration)?),
    })
}
