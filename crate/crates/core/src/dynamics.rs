//! Quantum-jump Monte Carlo over pulse schedules.
//!
//! The state is a single level, or a coherent superposition of the two
//! levels of the currently driven transition. Coherent evolution is exact on
//! piecewise-constant steps; radiative decay uses the waiting-time form of
//! the quantum-jump method: the unnormalized norm of the upper amplitude
//! decays as `exp(−Γt)`, and a jump fires when it crosses a pre-drawn
//! uniform threshold. Undriven levels carry populations only.
//!
//! Coherences are kept in the interaction picture of the addressed
//! transition, including the per-shot frequency offset of the electron.

use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::{Cauchy, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Rng};
use crate::spin::{ForbiddenLineShift, SpinSystem, TransitionKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SegmentKind {
    /// Gaussian envelope with σ = duration/5, truncated at ±2.5σ.
    GaussianPi,
    /// Half-Gaussian edges of length `rise` around a flat top.
    FlatTop { rise: f64 },
    Square,
    Wait,
    DetectWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseSegment {
    pub kind: SegmentKind,
    /// rad/s
    pub carrier: f64,
    /// Peak drive as the allowed-transition Rabi frequency of a spin at the
    /// resonator frequency (rad/s).
    pub amplitude: f64,
    /// s
    pub duration: f64,
    /// Drive phase (rad).
    pub phase: f64,
}

/// Gaussian σ as a fraction of the pulse duration.
pub const GAUSSIAN_SIGMA_FRACTION: f64 = 0.2;

impl PulseSegment {
    pub fn wait(duration: f64) -> Self {
        Self {
            kind: SegmentKind::Wait,
            carrier: 0.0,
            amplitude: 0.0,
            duration,
            phase: 0.0,
        }
    }

    pub fn detect(duration: f64) -> Self {
        Self {
            kind: SegmentKind::DetectWindow,
            ..Self::wait(duration)
        }
    }

    pub fn drive(kind: SegmentKind, carrier: f64, amplitude: f64, duration: f64) -> Self {
        Self {
            kind,
            carrier,
            amplitude,
            duration,
            phase: 0.0,
        }
    }

    pub fn with_phase(mut self, phase: f64) -> Self {
        self.phase = phase;
        self
    }

    pub fn is_drive(&self) -> bool {
        matches!(
            self.kind,
            SegmentKind::GaussianPi | SegmentKind::FlatTop { .. } | SegmentKind::Square
        ) && self.amplitude > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "segment duration must be positive, got {}",
                self.duration
            )));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "segment amplitude must be non-negative, got {}",
                self.amplitude
            )));
        }
        if let SegmentKind::FlatTop { rise } = self.kind {
            if !(rise >= 0.0 && 2.0 * rise <= self.duration) {
                return Err(Error::InvalidParameter(format!(
                    "flat-top rise {rise} s does not fit in {} s",
                    self.duration
                )));
            }
        }
        Ok(())
    }

    /// Envelope value in [0, 1] at time `t` into the segment.
    pub fn envelope(&self, t: f64) -> f64 {
        match self.kind {
            SegmentKind::GaussianPi => {
                let s = GAUSSIAN_SIGMA_FRACTION * self.duration;
                let x = (t - 0.5 * self.duration) / s;
                (-0.5 * x * x).exp()
            }
            SegmentKind::FlatTop { rise } => {
                if rise == 0.0 {
                    return 1.0;
                }
                let s = rise / 2.5;
                let edge = if t < rise {
                    rise - t
                } else if t > self.duration - rise {
                    t - (self.duration - rise)
                } else {
                    0.0
                };
                (-0.5 * (edge / s).powi(2)).exp()
            }
            SegmentKind::Square => 1.0,
            SegmentKind::Wait | SegmentKind::DetectWindow => 0.0,
        }
    }

    /// ∫ envelope dt over the segment (s).
    pub fn envelope_area(&self) -> f64 {
        match self.kind {
            SegmentKind::GaussianPi => {
                let s = GAUSSIAN_SIGMA_FRACTION * self.duration;
                let half = 0.5 * self.duration / (s * std::f64::consts::SQRT_2);
                s * (2.0 * std::f64::consts::PI).sqrt() * statrs::function::erf::erf(half)
            }
            SegmentKind::FlatTop { rise } => {
                let s = rise / 2.5;
                let edge = s * (std::f64::consts::PI / 2.0).sqrt() * statrs::function::erf::erf(2.5 / std::f64::consts::SQRT_2);
                (self.duration - 2.0 * rise) + 2.0 * edge
            }
            SegmentKind::Square => self.duration,
            SegmentKind::Wait | SegmentKind::DetectWindow => 0.0,
        }
    }
}

/// Peak amplitude giving a rotation `angle` for a segment of this shape when
/// the effective coupling equals the amplitude.
pub fn amplitude_for_angle(kind: SegmentKind, duration: f64, angle: f64) -> f64 {
    let seg = PulseSegment::drive(kind, 0.0, 1.0, duration);
    angle / seg.envelope_area()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PulseSchedule {
    pub segments: Vec<PulseSegment>,
}

impl PulseSchedule {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(mut self, seg: PulseSegment) -> Self {
        self.segments.push(seg);
        self
    }

    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }
}

/// Non-radiative cross-relaxation on one channel only. It competes with the
/// radiative channels out of the relevant excited levels and emits nothing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtraChannel {
    pub nucleus: usize,
    /// `true` for the double-quantum channel (⇑ → ⇓ on decay), `false` for
    /// zero-quantum (⇓ → ⇑).
    pub double_quantum: bool,
    /// 1/s
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsOptions {
    /// Ramsey decay time; the part beyond `t2` is quasi-static (per shot).
    pub t2_star: Option<f64>,
    /// Echo decay time; sets the Markovian dephasing rate.
    pub t2: Option<f64>,
    pub extra_channel: Option<ExtraChannel>,
    /// Redirect every decay onto the nuclear-preserving channel.
    pub freeze_nuclear: bool,
    /// Emissions within this delay after the start of a detection window
    /// are not counted (s).
    pub blanking: f64,
    /// Shift driven forbidden lines by the AC-Zeeman effect.
    pub ac_zeeman: bool,
}

impl Default for DynamicsOptions {
    fn default() -> Self {
        Self {
            t2_star: None,
            t2: None,
            extra_channel: None,
            freeze_nuclear: false,
            blanking: 0.0,
            ac_zeeman: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    /// s
    pub time: f64,
    pub from: usize,
    pub to: usize,
    /// Index into the system transitions; `None` for the non-radiative channel.
    pub transition: Option<usize>,
    pub kind: TransitionKind,
    pub photon: bool,
}

#[derive(Debug, Clone, Copy)]
struct Coherence {
    transition: usize,
    lower: usize,
    upper: usize,
    c_l: Complex64,
    c_u: Complex64,
    /// Origin of the drive phase reference.
    epoch: f64,
}

/// Per-trajectory state.
#[derive(Debug, Clone)]
pub struct SystemState {
    level: usize,
    pub time: f64,
    coherence: Option<Coherence>,
    threshold: f64,
    /// Static offset of every electron transition in this shot (rad/s).
    pub offset: f64,
    pub rng: Rng,
}

impl SystemState {
    pub fn new(level: usize, rng: Rng) -> Self {
        let mut s = Self {
            level,
            time: 0.0,
            coherence: None,
            threshold: 0.0,
            offset: 0.0,
            rng,
        };
        s.threshold = s.rng.random();
        s
    }

    /// Level, collapsing a coherent superposition if there is one.
    pub fn level(&mut self) -> usize {
        self.collapse();
        self.level
    }

    /// Level without collapsing; the lower level if coherent.
    pub fn peek_level(&self) -> usize {
        match self.coherence {
            Some(c) => {
                if c.c_u.norm_sqr() > c.c_l.norm_sqr() {
                    c.upper
                } else {
                    c.lower
                }
            }
            None => self.level,
        }
    }

    /// Replace the state by a definite level.
    pub fn set_level(&mut self, level: usize) {
        self.coherence = None;
        self.level = level;
    }

    /// Population of the upper level of the coherent pair, if any.
    pub fn upper_population(&self) -> Option<f64> {
        self.coherence.map(|c| {
            let n = c.c_l.norm_sqr() + c.c_u.norm_sqr();
            c.c_u.norm_sqr() / n
        })
    }

    /// Bloch vector (x, y, z) of the coherent pair, z = +1 in the upper level.
    pub fn bloch(&self) -> Option<[f64; 3]> {
        self.coherence.map(|c| {
            let n = c.c_l.norm_sqr() + c.c_u.norm_sqr();
            let r = c.c_l.conj() * c.c_u / n;
            [2.0 * r.re, 2.0 * r.im, (c.c_u.norm_sqr() - c.c_l.norm_sqr()) / n]
        })
    }

    fn normalize(&mut self) {
        if let Some(c) = self.coherence.as_mut() {
            let n = c.c_l.norm_sqr() + c.c_u.norm_sqr();
            let s = n.sqrt();
            c.c_l /= s;
            c.c_u /= s;
            self.threshold /= n;
        }
    }

    fn collapse(&mut self) {
        if let Some(c) = self.coherence.take() {
            let n = c.c_l.norm_sqr() + c.c_u.norm_sqr();
            let p_u = c.c_u.norm_sqr() / n;
            let u: f64 = self.rng.random();
            self.level = if u < p_u { c.upper } else { c.lower };
            self.threshold = self.rng.random();
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Channel {
    to: usize,
    rate: f64,
    transition: Option<usize>,
    kind: TransitionKind,
    photon: bool,
}

/// Ornstein–Uhlenbeck drift plus a symmetric telegraph on the electron
/// frequency. Evolved between shots by the sequencer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SpectralDiffusion {
    /// Stationary standard deviation of the drift (rad/s).
    pub ou_sigma: f64,
    /// Correlation time of the drift (s).
    pub ou_tau: f64,
    /// Half the telegraph jump size (rad/s).
    pub telegraph_amplitude: f64,
    /// Switching rate of the telegraph (1/s).
    pub telegraph_rate: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DiffusionState {
    pub drift: f64,
    pub telegraph_up: bool,
}

impl SpectralDiffusion {
    pub fn is_active(&self) -> bool {
        self.ou_sigma > 0.0 || (self.telegraph_amplitude > 0.0 && self.telegraph_rate > 0.0)
    }

    pub fn advance(&self, s: &mut DiffusionState, dt: f64, rng: &mut Rng) {
        if self.ou_sigma > 0.0 && self.ou_tau > 0.0 {
            let a = (-dt / self.ou_tau).exp();
            let z: f64 = StandardNormal.sample(rng);
            s.drift = s.drift * a + self.ou_sigma * (1.0 - a * a).sqrt() * z;
        }
        if self.telegraph_amplitude > 0.0 && self.telegraph_rate > 0.0 {
            let p_odd = 0.5 * (1.0 - (-2.0 * self.telegraph_rate * dt).exp());
            if rng.random::<f64>() < p_odd {
                s.telegraph_up = !s.telegraph_up;
            }
        }
    }

    pub fn offset(&self, s: &DiffusionState) -> f64 {
        let t = if self.telegraph_amplitude > 0.0 {
            if s.telegraph_up {
                self.telegraph_amplitude
            } else {
                -self.telegraph_amplitude
            }
        } else {
            0.0
        };
        s.drift + t
    }
}

/// Kilohertz, in rad/s, within which two transitions are indistinguishable
/// to a carrier.
const AMBIGUITY: f64 = std::f64::consts::TAU * 1e3;

/// A spin system together with the options of its stochastic evolution.
#[derive(Debug, Clone)]
pub struct Engine {
    sys: SpinSystem,
    opts: DynamicsOptions,
    channels: Vec<Vec<Channel>>,
    gamma_tot: Vec<f64>,
    gamma_max: f64,
    shifts: Vec<Option<ForbiddenLineShift>>,
    /// Half-width of the per-shot Cauchy offset (rad/s).
    quasi_static: f64,
}

impl Engine {
    pub fn new(sys: SpinSystem, opts: DynamicsOptions) -> Result<Self> {
        if let (Some(t2s), Some(t2)) = (opts.t2_star, opts.t2) {
            if t2s > t2 {
                return Err(Error::InvalidParameter(format!(
                    "T2* = {t2s} s exceeds T2 = {t2} s"
                )));
            }
        }
        for t in [opts.t2_star, opts.t2].into_iter().flatten() {
            if !(t > 0.0) {
                return Err(Error::InvalidParameter(format!("coherence time must be positive, got {t}")));
            }
        }
        if !(opts.blanking >= 0.0) {
            return Err(Error::InvalidParameter("blanking delay must be non-negative".into()));
        }
        let n = sys.n_levels();
        let half = n / 2;
        let mut channels = vec![Vec::new(); n];
        for upper in half..n {
            for &t in sys.decay_channels(upper) {
                let tr = sys.transition(t);
                if tr.rate <= 0.0 {
                    continue;
                }
                let to = if opts.freeze_nuclear {
                    sys.level_index(false, sys.levels()[upper].nuclear)
                } else {
                    tr.lower
                };
                channels[upper].push(Channel {
                    to,
                    rate: tr.rate,
                    transition: if opts.freeze_nuclear { Some(sys.transition_between(to, upper).expect("valid")) } else { Some(t) },
                    kind: if opts.freeze_nuclear { TransitionKind::Allowed } else { tr.kind },
                    photon: true,
                });
            }
        }
        if let Some(x) = opts.extra_channel {
            if x.nucleus >= sys.n_nuclei() {
                return Err(Error::InvalidParameter(format!(
                    "extra channel names nucleus {} of {}",
                    x.nucleus,
                    sys.n_nuclei()
                )));
            }
            if !(x.rate >= 0.0) {
                return Err(Error::InvalidParameter("extra channel rate must be non-negative".into()));
            }
            if x.rate > 0.0 && !opts.freeze_nuclear {
                for upper in half..n {
                    let cfg = sys.levels()[upper].nuclear;
                    let k = x.nucleus;
                    let state = cfg.state(k);
                    // Double-quantum decay leaves ⇑ → ⇓, zero-quantum ⇓ → ⇑.
                    let applies = if x.double_quantum {
                        state == crate::spin::NuclearState::Up
                    } else {
                        state == crate::spin::NuclearState::Down
                    };
                    if applies {
                        let to = sys.level_index(false, cfg.with(k, state.flipped()));
                        channels[upper].push(Channel {
                            to,
                            rate: x.rate,
                            transition: None,
                            kind: if x.double_quantum {
                                TransitionKind::DoubleQuantum(k)
                            } else {
                                TransitionKind::ZeroQuantum(k)
                            },
                            photon: false,
                        });
                    }
                }
            }
        }
        let gamma_tot: Vec<f64> = channels.iter().map(|c| c.iter().map(|ch| ch.rate).sum()).collect();
        let gamma_max = gamma_tot.iter().cloned().fold(0.0, f64::max);

        let shifts = sys
            .transitions()
            .iter()
            .map(|tr| match (tr.kind.flipped_nucleus(), tr.kind.forbidden_kind()) {
                (Some(k), Some(fk)) => ForbiddenLineShift::new(sys.params.coupling(k), fk).ok(),
                _ => None,
            })
            .collect();

        let quasi_static = match opts.t2_star {
            Some(t2s) => {
                let markov = opts.t2.map(|t2| 1.0 / t2).unwrap_or(1.0 / t2s);
                (1.0 / t2s - markov).max(0.0)
            }
            None => 0.0,
        };

        Ok(Self {
            sys,
            opts,
            channels,
            gamma_tot,
            gamma_max,
            shifts,
            quasi_static,
        })
    }

    pub fn system(&self) -> &SpinSystem {
        &self.sys
    }

    pub fn options(&self) -> &DynamicsOptions {
        &self.opts
    }

    /// Total decay rate out of `level`, including any non-radiative channel.
    pub fn decay_rate(&self, level: usize) -> f64 {
        self.gamma_tot[level]
    }

    /// Branching probabilities out of `level` as (destination, probability, photon).
    pub fn branching(&self, level: usize) -> Vec<(usize, f64, bool)> {
        let g = self.gamma_tot[level];
        self.channels[level]
            .iter()
            .map(|c| (c.to, c.rate / g, c.photon))
            .collect()
    }

    /// Fresh state in `level` with per-shot noise drawn.
    pub fn initial_state(&self, level: usize, rng: Rng) -> SystemState {
        let mut s = SystemState::new(level, rng);
        self.new_shot(&mut s, 0.0);
        s
    }

    /// Redraw the per-shot quasi-static offset and add `extra_offset`.
    pub fn new_shot(&self, s: &mut SystemState, extra_offset: f64) {
        let q = if self.quasi_static > 0.0 {
            Cauchy::new(0.0, self.quasi_static).expect("positive scale").sample(&mut s.rng)
        } else {
            0.0
        };
        s.offset = q + extra_offset;
    }

    /// Markovian dephasing rate of the coherence on `transition` (1/s).
    fn markov_rate(&self, upper: usize) -> f64 {
        let t2 = match (self.opts.t2, self.opts.t2_star) {
            (Some(t2), _) => t2,
            (None, Some(t2s)) => t2s,
            (None, None) => return 0.0,
        };
        (1.0 / t2 - 0.5 * self.gamma_tot[upper]).max(0.0)
    }

    fn fire_jump(&self, s: &mut SystemState, from: usize, at: f64, events: &mut Vec<JumpEvent>) {
        let chans = &self.channels[from];
        let g = self.gamma_tot[from];
        let mut u = s.rng.random::<f64>() * g;
        let mut pick = chans[chans.len() - 1];
        for c in chans {
            if u < c.rate {
                pick = *c;
                break;
            }
            u -= c.rate;
        }
        events.push(JumpEvent {
            time: at,
            from,
            to: pick.to,
            transition: pick.transition,
            kind: pick.kind,
            photon: pick.photon,
        });
        s.coherence = None;
        s.level = pick.to;
        s.threshold = s.rng.random();
    }

    fn flip_phase(&self, s: &mut SystemState, upper: usize, dt: f64) {
        let g = self.markov_rate(upper);
        if g > 0.0 {
            // Flips at rate γ/2 give coherence decay exp(−γt); only parity matters.
            let p_odd = 0.5 * (1.0 - (-g * dt).exp());
            if s.rng.random::<f64>() < p_odd {
                if let Some(c) = s.coherence.as_mut() {
                    c.c_u = -c.c_u;
                }
            }
        }
    }

    /// Free (undriven) evolution for `dt` seconds. Radiative jumps are
    /// sampled exactly; each one is appended to `events`.
    pub fn sample_relaxation(&self, s: &mut SystemState, dt: f64, events: &mut Vec<JumpEvent>) {
        let end = s.time + dt;
        loop {
            let remaining = end - s.time;
            if remaining <= 0.0 {
                s.time = end;
                return;
            }
            match s.coherence {
                Some(c) => {
                    let g = self.gamma_tot[c.upper];
                    let pl = c.c_l.norm_sqr();
                    let pu = c.c_u.norm_sqr();
                    if g > 0.0 && s.threshold > pl && pu > 0.0 {
                        let t_star = -((s.threshold - pl) / pu).ln() / g;
                        if t_star <= remaining {
                            self.fire_jump(s, c.upper, s.time + t_star, events);
                            s.time += t_star;
                            continue;
                        }
                    }
                    if let Some(cc) = s.coherence.as_mut() {
                        cc.c_u *= (-0.5 * g * remaining).exp();
                    }
                    self.flip_phase(s, c.upper, remaining);
                    s.time = end;
                    return;
                }
                None => {
                    let g = self.gamma_tot[s.level];
                    if g <= 0.0 {
                        s.time = end;
                        return;
                    }
                    let t_star = -s.threshold.ln() / g;
                    if t_star <= remaining {
                        let from = s.level;
                        self.fire_jump(s, from, s.time + t_star, events);
                        s.time += t_star;
                    } else {
                        s.threshold *= (g * remaining).exp();
                        s.time = end;
                        return;
                    }
                }
            }
        }
    }

    /// Evolve until no excited population remains.
    pub fn relax_fully(&self, s: &mut SystemState, events: &mut Vec<JumpEvent>) {
        s.collapse();
        let half = self.sys.n_levels() / 2;
        while s.level >= half && self.gamma_tot[s.level] > 0.0 {
            let from = s.level;
            let t_star = -s.threshold.ln() / self.gamma_tot[from];
            self.fire_jump(s, from, s.time + t_star, events);
            s.time += t_star;
        }
    }

    /// Transition addressed by `carrier` from the current state.
    /// Transition out of the current pair with the largest response
    /// (mΩ)²/((mΩ)² + Δ² + (2/T)²) to a pulse of peak amplitude `drive` and
    /// length T. Forbidden lines are taken at their AC-Zeeman-shifted
    /// frequency.
    fn addressed(&self, s: &SystemState, carrier: f64, drive: f64, duration: f64) -> Result<usize> {
        let levels: &[usize] = match &s.coherence {
            Some(c) => &[c.lower, c.upper],
            None => std::slice::from_ref(&s.level),
        };
        let mut cands: Vec<(usize, f64, f64)> = Vec::new();
        for &l in levels {
            for &t in self.sys.touching(l) {
                if cands.iter().any(|c| c.0 == t) {
                    continue;
                }
                let tr = self.sys.transition(t);
                let mut freq = tr.frequency + s.offset;
                if self.opts.ac_zeeman && drive > 0.0 {
                    if let Some(template) = &self.shifts[t] {
                        // A line with no continuous root is scored at its bare position.
                        freq += template.clone().shift(drive).unwrap_or(0.0);
                    }
                }
                let d = (freq - carrier).abs();
                let rabi = 2.0 * tr.matrix_element * drive;
                let width = 2.0 / duration;
                let score = if rabi == 0.0 { 0.0 } else { rabi * rabi / (rabi * rabi + d * d + width * width) };
                cands.push((t, d, score));
            }
        }
        // Highest score first; nearest first among equal (e.g. zero-drive) scores.
        cands.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.1.total_cmp(&y.1)));
        let &(t, d, score) = cands
            .first()
            .ok_or_else(|| Error::InvalidParameter("level has no transitions".into()))?;
        if let Some(&(t2, d2, score2)) = cands.get(1) {
            if d <= AMBIGUITY && d2 <= AMBIGUITY && score2 >= 0.5 * score {
                return Err(Error::AmbiguousTransition {
                    carrier_hz: crate::units::to_hz(carrier),
                    first: t,
                    second: t2,
                });
            }
        }
        Ok(t)
    }

    /// Drive `seg` on the transition it addresses, interleaving radiative decay.
    pub fn apply_pulse(&self, s: &mut SystemState, seg: &PulseSegment, events: &mut Vec<JumpEvent>) -> Result<()> {
        seg.validate()?;
        if !seg.is_drive() {
            self.sample_relaxation(s, seg.duration, events);
            return Ok(());
        }
        let start = s.time;
        let end = start + seg.duration;
        let mut dt = seg.duration / 100.0;
        if self.gamma_max > 0.0 {
            dt = dt.min(1.0 / (50.0 * self.gamma_max));
        }
        let n_steps = (seg.duration / dt).ceil().max(1.0) as usize;
        let dt = seg.duration / n_steps as f64;
        let filter = self.sys.cavity.filter_amplitude(seg.carrier - self.sys.cavity.omega_0);
        let mut shift_solver: Option<(usize, ForbiddenLineShift)> = None;

        for k in 0..n_steps {
            let t0 = start + k as f64 * dt;
            let t1 = t0 + dt;
            // The pair is chosen once per pulse and again only after a jump;
            // re-addressing from a partly excited pair would turn virtual
            // off-resonant population into real transfer.
            let tr_idx = match s.coherence {
                Some(c) if k > 0 => c.transition,
                _ => self.ensure_pair(s, seg.carrier, seg.amplitude * filter, seg.duration)?,
            };
            let tr = *self.sys.transition(tr_idx);
            let env = seg.envelope((k as f64 + 0.5) * dt);
            let drive = seg.amplitude * env * filter;
            let rabi = drive * 2.0 * tr.matrix_element;

            let mut shift = 0.0;
            if self.opts.ac_zeeman {
                if let Some(template) = &self.shifts[tr_idx] {
                    if shift_solver.as_ref().is_none_or(|(i, _)| *i != tr_idx) {
                        shift_solver = Some((tr_idx, template.clone()));
                    }
                    shift = shift_solver.as_mut().expect("set above").1.shift(drive)?;
                }
            }
            let detuning = seg.carrier - (tr.frequency + s.offset);
            let d = shift - detuning;

            let c = s.coherence.as_mut().expect("pair ensured");
            let phi0 = detuning * (t0 - c.epoch) + seg.phase;
            let phi1 = detuning * (t1 - c.epoch) + seg.phase;
            let bl = c.c_l;
            let bu = c.c_u * Complex64::from_polar(1.0, phi0);
            // exp(−iH dt) for H = [[0, Ω/2], [Ω/2, d]].
            let w = (d * d + rabi * rabi).sqrt();
            let (nl, nu) = if w == 0.0 {
                (bl, bu)
            } else {
                let (sn, cs) = (0.5 * w * dt).sin_cos();
                let g = Complex64::from_polar(1.0, -0.5 * d * dt);
                let i = Complex64::i();
                let m00 = -0.5 * d;
                let m01 = 0.5 * rabi;
                let f = 2.0 * sn / w;
                let u00 = g * (cs - i * f * m00);
                let u01 = g * (-i * f * m01);
                let u11 = g * (cs + i * f * m00);
                (u00 * bl + u01 * bu, u01 * bl + u11 * bu)
            };
            c.c_l = nl;
            c.c_u = nu * Complex64::from_polar(1.0, -phi1);

            let g = self.gamma_tot[c.upper];
            c.c_u *= (-0.5 * g * dt).exp();
            let upper = c.upper;
            let norm = c.c_l.norm_sqr() + c.c_u.norm_sqr();
            self.flip_phase(s, upper, dt);
            s.time = t1;
            if norm < s.threshold {
                self.fire_jump(s, upper, t1, events);
            }
        }
        s.normalize();
        s.time = end;
        Ok(())
    }

    /// Make the coherent pair the transition addressed by `carrier`.
    fn ensure_pair(&self, s: &mut SystemState, carrier: f64, drive: f64, duration: f64) -> Result<usize> {
        let t = self.addressed(s, carrier, drive, duration)?;
        if let Some(c) = s.coherence {
            if c.transition == t {
                return Ok(t);
            }
            s.collapse();
        }
        let t = self.addressed(s, carrier, drive, duration)?;
        let tr = self.sys.transition(t);
        let (c_l, c_u) = if s.level == tr.lower {
            (Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0))
        } else {
            (Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0))
        };
        s.coherence = Some(Coherence {
            transition: t,
            lower: tr.lower,
            upper: tr.upper,
            c_l,
            c_u,
            epoch: s.time,
        });
        Ok(t)
    }

    /// Run a schedule from the current state.
    pub fn run_schedule(&self, s: &mut SystemState, schedule: &PulseSchedule) -> Result<Trajectory> {
        let mut events = Vec::new();
        let mut windows = Vec::new();
        let mut after_drive = false;
        for seg in &schedule.segments {
            if seg.kind == SegmentKind::DetectWindow {
                seg.validate()?;
                let blank = if after_drive { self.opts.blanking.min(seg.duration) } else { 0.0 };
                windows.push((s.time + blank, s.time + seg.duration));
            }
            self.apply_pulse(s, seg, &mut events)?;
            after_drive = seg.is_drive();
        }
        Ok(Trajectory {
            events,
            windows,
            final_level: s.peek_level(),
        })
    }
}

/// One stochastic realization of a schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub events: Vec<JumpEvent>,
    /// Detection windows [t0, t1) in trajectory time (s).
    pub windows: Vec<(f64, f64)>,
    pub final_level: usize,
}

impl Trajectory {
    pub fn emission_times(&self) -> impl Iterator<Item = f64> + '_ {
        self.events.iter().filter(|e| e.photon).map(|e| e.time)
    }
}

/// `n` independent trajectories from `initial_level`, trajectory `i` using
/// stream `i` of `seed`. Output order is by index.
pub fn run_trajectories(
    n: usize,
    schedule: &PulseSchedule,
    engine: &Engine,
    initial_level: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(Error::InvalidParameter("need at least one trajectory".into()));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = engine.initial_state(initial_level, rng::stream(seed, i as u64));
            engine.run_schedule(&mut s, schedule)
        })
        .collect()
}
