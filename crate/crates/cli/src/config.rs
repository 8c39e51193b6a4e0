//! Run configuration: a TOML document with unit-tagged quantities.
//!
//! Top-level keys: `seed`, `output`, `lattice`, and the tables `[system]`,
//! `[cavity]`, `[detector]`, `[dynamics]`, `[sample]` and `[[experiment]]`.
//! Every experiment table carries a `kind` and optional `name`; the other
//! keys depend on the kind. Unknown keys are rejected with their path.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;
use spinfluor_core::analysis::b_from_eta;
use spinfluor_core::detector::DetectorParams;
use spinfluor_core::dynamics::{DynamicsOptions, SegmentKind, SpectralDiffusion};
use spinfluor_core::sequencer::{
    CoherenceKind, DnpParams, PulseShape, ReadoutMode, ReadoutParams, SweepParams, TrackingMode, TrackingParams,
};
use spinfluor_core::spin::{CavityParams, NuclearConfig, NuclearState, Nucleus, SpinParams};

use crate::error::CliError;
use crate::units::{Drift, Frequency, Rate, Time};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    output: Option<PathBuf>,
    lattice: Option<String>,
    system: Option<SystemSection>,
    cavity: Option<CavitySection>,
    detector: Option<DetectorSection>,
    #[serde(default)]
    dynamics: DynamicsSection,
    #[serde(default)]
    sample: SampleSection,
    #[serde(default)]
    experiment: Vec<toml::Table>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub omega_s: Frequency,
    pub omega_i: Frequency,
    #[serde(default)]
    pub nuclei: Vec<NucleusSection>,
}

/// Give either `b` or the cross-relaxation probability `eta`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NucleusSection {
    pub a: Frequency,
    pub b: Option<Frequency>,
    pub eta: Option<f64>,
    #[serde(default)]
    pub initial: InitialState,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialState {
    #[default]
    Up,
    Down,
    Random,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavitySection {
    pub omega_0: Frequency,
    pub kappa: Frequency,
    pub g0: Frequency,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    /// End-to-end efficiency.
    pub epsilon: f64,
    /// Multiplies `epsilon` when given.
    pub intrinsic_efficiency: Option<f64>,
    pub dark_rate: Rate,
    pub cycle: Option<Time>,
    pub dead_time: Option<Time>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSection {
    pub t2_star: Option<Time>,
    pub t2: Option<Time>,
    #[serde(default)]
    pub freeze_nuclear: bool,
    pub blanking: Option<Time>,
    pub ac_zeeman: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    pub drift: Option<Drift>,
    pub diffusion: Option<DiffusionSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    pub ou_sigma: Frequency,
    pub ou_tau: Time,
    #[serde(default = "zero_freq")]
    pub telegraph_amplitude: Frequency,
    #[serde(default = "zero_rate")]
    pub telegraph_rate: Rate,
}

fn zero_freq() -> Frequency {
    Frequency(0.0)
}

fn zero_rate() -> Rate {
    Rate(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PulseKind {
    Gaussian,
    Square,
    FlatTop,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSection {
    pub kind: PulseKind,
    pub duration: Time,
    /// Edge length of a flat-top pulse.
    pub rise: Option<Time>,
    /// Peak Rabi frequency; omitted means calibrated to the rotation.
    pub amplitude: Option<Frequency>,
}

impl PulseSection {
    fn shape(&self) -> Result<PulseShape, String> {
        let kind = match (self.kind, self.rise) {
            (PulseKind::Gaussian, None) => SegmentKind::GaussianPi,
            (PulseKind::Square, None) => SegmentKind::Square,
            (PulseKind::FlatTop, Some(r)) => SegmentKind::FlatTop { rise: r.0 },
            (PulseKind::FlatTop, None) => return Err("flat-top pulse needs `rise`".into()),
            (_, Some(_)) => return Err("`rise` only applies to flat-top pulses".into()),
        };
        Ok(PulseShape {
            kind,
            duration: self.duration.0,
            amplitude: self.amplitude.map(|a| a.0),
        })
    }
}

fn pulse_or(p: &Option<PulseSection>, default: PulseShape) -> Result<PulseShape, String> {
    p.as_ref().map_or(Ok(default), PulseSection::shape)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub center: Option<Frequency>,
    pub span: Option<Frequency>,
    pub step: Option<Frequency>,
    pub averages: Option<usize>,
    pub window: Option<Time>,
    pub pulse: Option<PulseSection>,
}

impl SweepSection {
    fn params(&self) -> Result<SweepParams, String> {
        let d = SweepParams::default();
        Ok(SweepParams {
            center: self.center.map_or(d.center, |v| v.0),
            span: self.span.map_or(d.span, |v| v.0),
            step: self.step.map_or(d.step, |v| v.0),
            averages: self.averages.unwrap_or(d.averages),
            tau_int: self.window.map_or(d.tau_int, |v| v.0),
            pulse: pulse_or(&self.pulse, d.pulse)?,
        })
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerSection {
    /// Proportional gain per count.
    pub p: Option<Frequency>,
    /// Integral gain per count.
    pub i: Option<Frequency>,
    pub f: Option<f64>,
    pub tau: Option<Time>,
    pub n_track: Option<usize>,
    pub window: Option<Time>,
    pub pulse: Option<PulseSection>,
}

impl TrackerSection {
    fn params(&self) -> Result<TrackingParams, String> {
        let d = TrackingParams::default();
        Ok(TrackingParams {
            p: self.p.map_or(d.p, |v| v.0),
            i: self.i.map_or(d.i, |v| v.0),
            f: self.f.unwrap_or(d.f),
            tau: self.tau.map_or(d.tau, |v| v.0),
            n_track: self.n_track.unwrap_or(d.n_track),
            pulse: pulse_or(&self.pulse, d.pulse)?,
            tau_int: self.window.map_or(d.tau_int, |v| v.0),
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatedReadout {
    pub n_ro: usize,
    pub t_d: Option<Time>,
    pub pulse: Option<PulseSection>,
}

fn readout_mode(r: &Option<SimulatedReadout>) -> Result<ReadoutMode, String> {
    let Some(r) = r else { return Ok(ReadoutMode::Ideal) };
    let d = ReadoutParams::default();
    Ok(ReadoutMode::Simulated(ReadoutParams {
        n_ro: r.n_ro,
        t_d: r.t_d.map_or(d.t_d, |v| v.0),
        pulse: pulse_or(&r.pulse, d.pulse)?,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Up,
    Down,
}

impl From<Target> for NuclearState {
    fn from(t: Target) -> Self {
        match t {
            Target::Up => NuclearState::Up,
            Target::Down => NuclearState::Down,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareSection {
    pub target: Target,
    pub n_prep: usize,
    pub wait: Option<Time>,
    pub pulse_duration: Option<Time>,
    pub nuclei: Option<Vec<usize>>,
}

impl PrepareSection {
    fn params(&self) -> DnpParams {
        let d = DnpParams::default();
        DnpParams {
            target: self.target.into(),
            n_prep: self.n_prep,
            tau_w: self.wait.map(|v| v.0),
            pulse_duration: self.pulse_duration.map_or(d.pulse_duration, |v| v.0),
            nuclei: self.nuclei.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackingChoice {
    #[default]
    Off,
    Spectral,
    PiLoop,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSection {
    pub duration: Time,
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub tracking: TrackingChoice,
    pub tracker: Option<TrackerSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutSection {
    /// One block of readouts per value.
    pub n_ro: Vec<usize>,
    pub repetitions: usize,
    pub t_d: Option<Time>,
    pub pulse: Option<PulseSection>,
    /// Draw a fresh nuclear state before every readout.
    #[serde(default = "yes")]
    pub randomize: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EldorSection {
    pub prepare: PrepareSection,
    pub center: Frequency,
    pub span: Frequency,
    pub step: Frequency,
    pub drive: Frequency,
    pub duration: Time,
    pub rise: Time,
    pub averages: usize,
    pub readout: Option<SimulatedReadout>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DnpSection {
    pub target: Target,
    pub n_prep: Vec<usize>,
    pub repetitions: usize,
    pub wait: Option<Time>,
    pub pulse_duration: Option<Time>,
    pub nuclei: Option<Vec<usize>>,
    pub readout: Option<SimulatedReadout>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sequence {
    Rabi,
    Ramsey,
    Echo,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoherenceSection {
    pub sequence: Sequence,
    pub delays: Vec<Time>,
    #[serde(default = "zero_freq")]
    pub detuning: Frequency,
    pub pulse: PulseSection,
    pub shots: usize,
    pub window: Time,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackingSection {
    pub duration: Time,
    /// Residual RMS is taken after this settling time.
    pub settle: Option<Time>,
    pub tracker: Option<TrackerSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasuredSection {
    pub label: String,
    pub a: Frequency,
    pub sigma_a: Frequency,
    pub b: Frequency,
    pub sigma_b: Frequency,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSection {
    /// Structure file or `builtin:cawo4`; falls back to the top-level `lattice`.
    pub structure: Option<String>,
    /// Field tilt out of the plane (degrees).
    pub beta: f64,
    /// In-plane angle range "lo:hi:n" (degrees).
    pub theta: String,
    /// Nominal θ interval for assignment, if narrower than the sweep.
    pub nominal: Option<[f64; 2]>,
    #[serde(default)]
    pub measured: Vec<MeasuredSection>,
    /// Largest accepted normalized distance.
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone)]
pub enum ExperimentKind {
    Spectroscopy(SweepParams),
    Trace {
        sweep: SweepParams,
        duration: f64,
        tracking: TrackingMode,
        tracker: TrackingParams,
    },
    Readout {
        n_ro: Vec<usize>,
        repetitions: usize,
        params: ReadoutParams,
        randomize: bool,
    },
    Eldor(spinfluor_core::sequencer::EldorParams),
    Dnp {
        params: DnpParams,
        n_prep: Vec<usize>,
        repetitions: usize,
        readout: ReadoutMode,
    },
    Coherence(spinfluor_core::sequencer::CoherenceParams),
    Tracking {
        duration: f64,
        settle: f64,
        tracker: TrackingParams,
    },
    Lattice {
        structure: Structure,
        beta: f64,
        theta: ThetaRange,
        nominal: Option<(f64, f64)>,
        measured: Vec<(String, spinfluor_core::lattice::MeasuredCoupling)>,
        tolerance: f64,
    },
}

impl ExperimentKind {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Spectroscopy(_) => "spectroscopy",
            Self::Trace { .. } => "trace",
            Self::Readout { .. } => "readout",
            Self::Eldor(_) => "eldor",
            Self::Dnp { .. } => "dnp",
            Self::Coherence(_) => "coherence",
            Self::Tracking { .. } => "tracking",
            Self::Lattice { .. } => "lattice",
        }
    }

    pub fn needs_system(&self) -> bool {
        !matches!(self, Self::Lattice { .. })
    }
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub name: String,
    pub kind: ExperimentKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Structure {
    Builtin,
    File(PathBuf),
}

impl Structure {
    /// `builtin:cawo4` or a path; relative paths resolve against `base`.
    pub fn parse(s: &str, base: &Path) -> Result<Self, String> {
        if let Some(name) = s.strip_prefix("builtin:") {
            return match name {
                "cawo4" => Ok(Self::Builtin),
                _ => Err(format!("unknown builtin structure {name:?}; available: cawo4")),
            };
        }
        let p = base.join(s);
        if !p.is_file() {
            return Err(format!("structure file {} does not exist", p.display()));
        }
        Ok(Self::File(p))
    }

    pub fn describe(&self) -> String {
        match self {
            Self::Builtin => "builtin:cawo4".into(),
            Self::File(p) => p.display().to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaRange {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl std::str::FromStr for ThetaRange {
    type Err = String;

    /// "lo:hi:n" in degrees.
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let err = || format!("{s:?}: expected lo:hi:n, e.g. -0.3:0.1:41");
        let [lo, hi, n] = parts.as_slice() else { return Err(err()) };
        let (lo, hi): (f64, f64) = (lo.parse().map_err(|_| err())?, hi.parse().map_err(|_| err())?);
        let n: usize = n.parse().map_err(|_| err())?;
        if !(lo.is_finite() && hi.is_finite()) || n == 0 {
            return Err(err());
        }
        Ok(Self { lo, hi, n })
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub spin: Option<SpinParams>,
    pub initial: Vec<InitialState>,
    pub cavity: Option<CavityParams>,
    pub detector: Option<DetectorParams>,
    pub dynamics: DynamicsOptions,
    pub drift: f64,
    pub diffusion: SpectralDiffusion,
    pub experiments: Vec<Experiment>,
}

impl RunConfig {
    /// Nuclear configuration to start from; `None` for a random draw.
    pub fn initial_nuclear(&self) -> Option<NuclearConfig> {
        if self.initial.contains(&InitialState::Random) {
            return None;
        }
        let mut c = NuclearConfig::ALL_UP;
        for (k, s) in self.initial.iter().enumerate() {
            if *s == InitialState::Down {
                c = c.with(k, NuclearState::Down);
            }
        }
        Some(c)
    }

    pub fn needs_simulation(&self) -> bool {
        self.experiments.iter().any(|e| e.kind.needs_system())
    }
}

fn deserialize_at<T: DeserializeOwned>(value: toml::Value, prefix: &str) -> Result<T, CliError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        let path = if inner == "." { prefix.to_string() } else { format!("{prefix}.{inner}") };
        CliError::schema(path, e.into_inner().message().trim().to_string())
    })
}

fn invalid(path: impl Into<String>) -> impl FnOnce(String) -> CliError {
    let path = path.into();
    move |msg| CliError::schema(path, msg)
}

/// Parse a config file; relative paths inside it resolve against its directory.
pub fn load(path: &Path) -> Result<(RunConfig, String), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let cfg = parse(&text, base)?;
    Ok((cfg, text))
}

pub fn parse(text: &str, base: &Path) -> Result<RunConfig, CliError> {
    let de = toml::Deserializer::new(text);
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::schema(path, e.into_inner().message().trim().to_string())
    })?;

    let cavity = raw
        .cavity
        .as_ref()
        .map(|c| CavityParams::new(c.omega_0.0, c.kappa.0, c.g0.0))
        .transpose()
        .map_err(|e| CliError::schema("cavity", e.to_string()))?;

    let (spin, initial) = match &raw.system {
        None => (None, Vec::new()),
        Some(s) => {
            let mut nuclei = Vec::with_capacity(s.nuclei.len());
            for (k, n) in s.nuclei.iter().enumerate() {
                let path = format!("system.nuclei[{k}]");
                let b = match (n.b, n.eta) {
                    (Some(b), None) => b.0,
                    (None, Some(eta)) => {
                        let c = cavity
                            .as_ref()
                            .ok_or_else(|| CliError::schema(&path, "`eta` needs a [cavity] section".into()))?;
                        if !(eta > 0.0 && eta < 1.0) {
                            return Err(CliError::schema(format!("{path}.eta"), "must lie in (0, 1)".into()));
                        }
                        b_from_eta(eta, s.omega_i.0, c.kappa)
                    }
                    _ => return Err(CliError::schema(path, "give exactly one of `b` and `eta`".into())),
                };
                nuclei.push(Nucleus::new(n.a.0, b));
            }
            let p = SpinParams::new(s.omega_s.0, s.omega_i.0, nuclei)
                .map_err(|e| CliError::schema("system", e.to_string()))?;
            (Some(p), s.nuclei.iter().map(|n| n.initial).collect())
        }
    };

    let detector = raw
        .detector
        .as_ref()
        .map(|d| {
            let eps = d.epsilon * d.intrinsic_efficiency.unwrap_or(1.0);
            let mut p = DetectorParams::new(eps, d.dark_rate.0)?;
            if let Some(c) = d.cycle {
                p.cycle = c.0;
            }
            if let Some(t) = d.dead_time {
                p.dead = t.0;
            }
            p.validated()
        })
        .transpose()
        .map_err(|e| CliError::schema("detector", e.to_string()))?;

    let dd = DynamicsOptions::default();
    let dynamics = DynamicsOptions {
        t2_star: raw.dynamics.t2_star.map(|t| t.0),
        t2: raw.dynamics.t2.map(|t| t.0),
        extra_channel: None,
        freeze_nuclear: raw.dynamics.freeze_nuclear,
        blanking: raw.dynamics.blanking.map_or(dd.blanking, |t| t.0),
        ac_zeeman: raw.dynamics.ac_zeeman.unwrap_or(dd.ac_zeeman),
    };
    let diffusion = raw.sample.diffusion.as_ref().map_or_else(SpectralDiffusion::default, |d| SpectralDiffusion {
        ou_sigma: d.ou_sigma.0,
        ou_tau: d.ou_tau.0,
        telegraph_amplitude: d.telegraph_amplitude.0,
        telegraph_rate: d.telegraph_rate.0,
    });

    let mut experiments = Vec::with_capacity(raw.experiment.len());
    let mut names = std::collections::BTreeSet::new();
    for (i, mut table) in raw.experiment.into_iter().enumerate() {
        let at = format!("experiment[{i}]");
        let kind = match table.remove("kind") {
            Some(toml::Value::String(s)) => s,
            Some(_) => return Err(CliError::schema(format!("{at}.kind"), "must be a string".into())),
            None => return Err(CliError::schema(format!("{at}.kind"), "missing field `kind`".into())),
        };
        let name = match table.remove("name") {
            Some(toml::Value::String(s)) => s,
            Some(_) => return Err(CliError::schema(format!("{at}.name"), "must be a string".into())),
            None => kind.clone(),
        };
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(CliError::schema(
                format!("{at}.name"),
                format!("{name:?}: use letters, digits, '-' and '_'"),
            ));
        }
        if !names.insert(name.clone()) {
            return Err(CliError::schema(format!("{at}.name"), format!("duplicate experiment name {name:?}")));
        }
        let v = toml::Value::Table(table);
        let kind = build_experiment(&kind, v, &at, base, raw.lattice.as_deref())?;
        experiments.push(Experiment { name, kind });
    }

    let cfg = RunConfig {
        seed: raw.seed,
        output: raw.output.map(|o| base.join(o)),
        spin,
        initial,
        cavity,
        detector,
        dynamics,
        drift: raw.sample.drift.map_or(0.0, |d| d.0),
        diffusion,
        experiments,
    };
    if cfg.needs_simulation() {
        for (ok, what) in [
            (cfg.spin.is_some(), "system"),
            (cfg.cavity.is_some(), "cavity"),
            (cfg.detector.is_some(), "detector"),
        ] {
            if !ok {
                return Err(CliError::schema(what, format!("simulated experiments need a [{what}] section")));
            }
        }
    }
    Ok(cfg)
}

fn build_experiment(
    kind: &str,
    v: toml::Value,
    at: &str,
    base: &Path,
    lattice: Option<&str>,
) -> Result<ExperimentKind, CliError> {
    Ok(match kind {
        "spectroscopy" => {
            let s: SweepSection = deserialize_at(v, at)?;
            ExperimentKind::Spectroscopy(s.params().map_err(invalid(at))?)
        }
        "trace" => {
            let s: TraceSection = deserialize_at(v, at)?;
            let sweep = match &s.sweep {
                Some(sw) => sw.params().map_err(invalid(format!("{at}.sweep")))?,
                None => SweepParams::default(),
            };
            ExperimentKind::Trace {
                sweep,
                duration: s.duration.0,
                tracking: match s.tracking {
                    TrackingChoice::Off => TrackingMode::Off,
                    TrackingChoice::Spectral => TrackingMode::Spectral,
                    TrackingChoice::PiLoop => TrackingMode::PiLoop,
                },
                tracker: s.tracker.unwrap_or_default().params().map_err(invalid(format!("{at}.tracker")))?,
            }
        }
        "readout" => {
            let s: ReadoutSection = deserialize_at(v, at)?;
            if s.n_ro.is_empty() || s.n_ro.contains(&0) {
                return Err(CliError::schema(format!("{at}.n_ro"), "needs positive values".into()));
            }
            let d = ReadoutParams::default();
            ExperimentKind::Readout {
                n_ro: s.n_ro,
                repetitions: s.repetitions,
                params: ReadoutParams {
                    n_ro: d.n_ro,
                    t_d: s.t_d.map_or(d.t_d, |v| v.0),
                    pulse: pulse_or(&s.pulse, d.pulse).map_err(invalid(format!("{at}.pulse")))?,
                },
                randomize: s.randomize,
            }
        }
        "eldor" => {
            let s: EldorSection = deserialize_at(v, at)?;
            ExperimentKind::Eldor(spinfluor_core::sequencer::EldorParams {
                prepare: s.prepare.params(),
                center: s.center.0,
                span: s.span.0,
                step: s.step.0,
                drive: s.drive.0,
                duration: s.duration.0,
                rise: s.rise.0,
                averages: s.averages,
                readout: readout_mode(&s.readout).map_err(invalid(format!("{at}.readout")))?,
            })
        }
        "dnp" => {
            let s: DnpSection = deserialize_at(v, at)?;
            let d = DnpParams::default();
            ExperimentKind::Dnp {
                params: DnpParams {
                    target: s.target.into(),
                    n_prep: 0,
                    tau_w: s.wait.map(|v| v.0),
                    pulse_duration: s.pulse_duration.map_or(d.pulse_duration, |v| v.0),
                    nuclei: s.nuclei,
                },
                n_prep: s.n_prep,
                repetitions: s.repetitions,
                readout: readout_mode(&s.readout).map_err(invalid(format!("{at}.readout")))?,
            }
        }
        "coherence" => {
            let s: CoherenceSection = deserialize_at(v, at)?;
            ExperimentKind::Coherence(spinfluor_core::sequencer::CoherenceParams {
                kind: match s.sequence {
                    Sequence::Rabi => CoherenceKind::Rabi,
                    Sequence::Ramsey => CoherenceKind::Ramsey,
                    Sequence::Echo => CoherenceKind::Echo,
                },
                delays: s.delays.iter().map(|t| t.0).collect(),
                detuning: s.detuning.0,
                pulse: s.pulse.shape().map_err(invalid(format!("{at}.pulse")))?,
                shots: s.shots,
                tau_int: s.window.0,
            })
        }
        "tracking" => {
            let s: TrackingSection = deserialize_at(v, at)?;
            ExperimentKind::Tracking {
                duration: s.duration.0,
                settle: s.settle.map_or(s.duration.0 / 3.0, |v| v.0),
                tracker: s.tracker.unwrap_or_default().params().map_err(invalid(format!("{at}.tracker")))?,
            }
        }
        "lattice" => {
            let s: LatticeSection = deserialize_at(v, at)?;
            let spec = s.structure.as_deref().or(lattice).unwrap_or("builtin:cawo4");
            let structure = Structure::parse(spec, base).map_err(invalid(format!("{at}.structure")))?;
            let theta: ThetaRange = s.theta.parse().map_err(invalid(format!("{at}.theta")))?;
            let measured = s
                .measured
                .iter()
                .map(|m| {
                    (
                        m.label.clone(),
                        spinfluor_core::lattice::MeasuredCoupling {
                            a: spinfluor_core::units::to_hz(m.a.0),
                            sigma_a: spinfluor_core::units::to_hz(m.sigma_a.0),
                            b: spinfluor_core::units::to_hz(m.b.0),
                            sigma_b: spinfluor_core::units::to_hz(m.sigma_b.0),
                        },
                    )
                })
                .collect();
            ExperimentKind::Lattice {
                structure,
                beta: s.beta,
                theta,
                nominal: s.nominal.map(|[a, b]| (a, b)),
                measured,
                tolerance: s.tolerance.unwrap_or(1.0),
            }
        }
        other => {
            return Err(CliError::schema(
                format!("{at}.kind"),
                format!(
                    "unknown experiment kind {other:?}; expected one of spectroscopy, trace, readout, eldor, dnp, coherence, tracking, lattice"
                ),
            ))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 7

[system]
omega_s = "7.7492 GHz"
omega_i = "-788.1 kHz"

[[system.nuclei]]
a = "34.5 kHz"
eta = 3.2e-4
initial = "down"

[cavity]
omega_0 = "7.7492 GHz"
kappa = "640 kHz"
g0 = "4.5 kHz"

[detector]
epsilon = 0.18
dark_rate = "150 /s"
"#;

    fn parse_str(extra: &str) -> Result<RunConfig, CliError> {
        parse(&format!("{BASE}{extra}"), Path::new("."))
    }

    #[test]
    fn eta_sets_b_and_state() {
        let c = parse_str("").unwrap();
        let b = spinfluor_core::units::to_khz(c.spin.as_ref().unwrap().nuclei[0].b);
        assert!((b - 75.4).abs() < 1.0, "{b}");
        assert_eq!(c.initial_nuclear(), Some(NuclearConfig(1)));
        assert_eq!(c.seed, Some(7));
    }

    #[test]
    fn unknown_field_reports_its_path() {
        let e = parse_str("[[experiment]]\nkind = \"readout\"\nn_ro = [10]\nrepetitions = 5\nbogus = 1\n").unwrap_err();
        assert_eq!(e.path.as_deref(), Some("experiment[0].bogus"), "{e:?}");
        assert!(e.message.contains("bogus"), "{e:?}");

        let e = parse_str("[[experiment]]\nkind = \"trace\"\nduration = \"5 kHz\"\n").unwrap_err();
        assert_eq!(e.path.as_deref(), Some("experiment[0].duration"), "{e:?}");

        let e = parse("[detector]\nepsilon = 0.2\ndark_rate = \"150 Hz\"\n", Path::new(".")).unwrap_err();
        assert_eq!(e.path.as_deref(), Some("detector.dark_rate"), "{e:?}");
    }

    #[test]
    fn efficiencies_multiply() {
        let c = parse_str("").unwrap();
        assert_eq!(c.detector.unwrap().epsilon, 0.18);
        let text = BASE.replace("epsilon = 0.18", "epsilon = 0.5\nintrinsic_efficiency = 0.79");
        let c = parse(&text, Path::new(".")).unwrap();
        assert!((c.detector.unwrap().epsilon - 0.395).abs() < 1e-12);
    }

    #[test]
    fn simulation_needs_physical_sections() {
        let e = parse("seed = 1\n[[experiment]]\nkind = \"spectroscopy\"\n", Path::new(".")).unwrap_err();
        assert_eq!(e.path.as_deref(), Some("system"));
        let c = parse("[[experiment]]\nkind = \"lattice\"\nbeta = 0.8\ntheta = \"-0.3:0.1:5\"\n", Path::new(".")).unwrap();
        assert!(!c.needs_simulation());
    }

    #[test]
    fn theta_range() {
        let t: ThetaRange = "-0.3:0.1:41".parse().unwrap();
        assert_eq!((t.lo, t.hi, t.n), (-0.3, 0.1, 41));
        assert!("1:2".parse::<ThetaRange>().is_err());
        assert!("1:2:0".parse::<ThetaRange>().is_err());
    }
}
