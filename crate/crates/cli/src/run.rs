//! `run`: execute every configured experiment and persist the results.
//!
//! Each experiment gets its own sample seeded with `derive_seed(seed, i)`,
//! so results do not depend on `--parallel` or on the other experiments.
//! Output is assembled in a hidden sibling directory and renamed into
//! place only after everything succeeded.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spinfluor_core::analysis::{
    b_from_eta, classify_trace, estimate_eta_resolved, fit_damped_cosine, fit_exponential, fit_lorentzian,
    fit_readout_curve_weighted, readout_threshold, ClassifyOptions, EtaEstimate,
};
use spinfluor_core::dynamics::Engine;
use spinfluor_core::lattice::{angle_sweep, assign_site, CrystalModel};
use spinfluor_core::rng::derive_seed;
use spinfluor_core::sequencer::{
    coherence_scan, dnp_experiment, eldor_scan, single_shot_readout, spectroscopy_sweep, trace_experiment,
    tracking_run, CoherenceKind, Lab, ReadoutParams, TraceParams,
};
use spinfluor_core::spin::{build_system, NuclearConfig, NuclearState};
use spinfluor_core::units::to_hz;

use crate::config::{self, Experiment, ExperimentKind, RunConfig, Structure};
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Quantity {
    pub name: String,
    pub value: f64,
    /// One standard deviation.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sigma: Option<f64>,
    pub unit: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentEntry {
    pub index: usize,
    pub name: String,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    pub directory: String,
    pub files: Vec<String>,
    pub summary: Vec<Quantity>,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub software: String,
    pub version: String,
    pub config_file: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
    /// Seconds since the Unix epoch; the only field that differs between
    /// identical runs.
    pub created_unix: u64,
    pub experiments: Vec<ExperimentEntry>,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub parallel: usize,
    pub force: bool,
}

/// Files written for one experiment, relative to the run directory.
struct Sink {
    dir: PathBuf,
    rel: String,
    files: Vec<String>,
    summary: Vec<Quantity>,
    notes: Vec<String>,
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Degrees, rounded to 1e-9 so grid points print as typed.
fn deg(v: f64) -> String {
    num((v * 1e9).round() / 1e9 + 0.0)
}

impl Sink {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(format!("{}/{name}", self.rel));
        self.dir.join(name)
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(self.path(name))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn jsonl<T: Serialize>(&mut self, name: &str, items: impl IntoIterator<Item = T>) -> Result<(), CliError> {
        let mut f = std::io::BufWriter::new(fs::File::create(self.path(name))?);
        for it in items {
            serde_json::to_writer(&mut f, &it)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    fn put(&mut self, name: impl Into<String>, value: f64, sigma: Option<f64>, unit: &str) {
        if value.is_finite() {
            self.summary.push(Quantity {
                name: name.into(),
                value,
                sigma: sigma.filter(|s| s.is_finite()),
                unit: unit.into(),
            });
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn run(opts: &RunOptions) -> Result<PathBuf, CliError> {
    if opts.parallel == 0 {
        return Err(CliError::usage("--parallel must be at least 1"));
    }
    let (cfg, text) = config::load(&opts.config)?;
    let seed = opts.seed.or(cfg.seed);
    if cfg.needs_simulation() && seed.is_none() {
        return Err(CliError::schema("seed", "simulated experiments need a seed (config `seed` or --seed)".into()));
    }
    let out = opts
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| CliError::usage("no output directory: set `output` in the config or pass --out"))?;
    if out.exists() {
        if !out.is_dir() {
            return Err(CliError::io(format!("{} exists and is not a directory", out.display())));
        }
        if fs::read_dir(&out)?.next().is_some() && !opts.force {
            return Err(CliError::io(format!("{} is not empty; pass --force to replace it", out.display())));
        }
    }
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let staging = tempfile::Builder::new().prefix(".spinfluor-run-").tempdir_in(&parent)?;

    fs::write(staging.path().join("config.toml"), &text)?;
    let engine = match (&cfg.spin, &cfg.cavity) {
        (Some(s), Some(c)) if cfg.needs_simulation() => Some(Engine::new(build_system(s, c)?, cfg.dynamics.clone())?),
        _ => None,
    };

    let job = |(i, e): (usize, &Experiment)| run_one(&cfg, engine.as_ref(), seed, i, e, staging.path());
    let indexed: Vec<(usize, &Experiment)> = cfg.experiments.iter().enumerate().collect();
    let entries: Vec<ExperimentEntry> = if opts.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.parallel)
            .build()
            .map_err(|e| CliError::usage(e.to_string()))?;
        pool.install(|| indexed.into_par_iter().map(job).collect::<Result<_, _>>())?
    } else {
        indexed.into_iter().map(job).collect::<Result<_, _>>()?
    };

    let manifest = Manifest {
        software: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_file: opts.config.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
        config_sha256: sha256_hex(text.as_bytes()),
        seed,
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        experiments: entries,
    };
    fs::write(staging.path().join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;

    if out.exists() {
        // Only reached when empty or with --force.
        fs::remove_dir_all(&out)?;
    }
    let staged = staging.keep();
    if let Err(e) = fs::rename(&staged, &out) {
        let _ = fs::remove_dir_all(&staged);
        return Err(CliError::io(format!("cannot move results to {}: {e}", out.display())));
    }
    Ok(out)
}

fn make_lab(cfg: &RunConfig, engine: &Engine, seed: u64) -> Result<Lab, CliError> {
    let det = cfg.detector.ok_or_else(|| CliError::schema("detector", "missing".into()))?;
    let mut lab = Lab::new(engine.clone(), det, cfg.initial_nuclear().unwrap_or(NuclearConfig::ALL_UP), seed)?
        .with_diffusion(cfg.diffusion)
        .with_drift(cfg.drift);
    if cfg.initial_nuclear().is_none() {
        lab.randomize_nuclear();
    }
    Ok(lab)
}

fn run_one(
    cfg: &RunConfig,
    engine: Option<&Engine>,
    seed: Option<u64>,
    index: usize,
    e: &Experiment,
    root: &Path,
) -> Result<ExperimentEntry, CliError> {
    let rel = format!("{index:02}_{}", e.name);
    let dir = root.join(&rel);
    fs::create_dir(&dir)?;
    let mut sink = Sink {
        dir,
        rel,
        files: Vec::new(),
        summary: Vec::new(),
        notes: Vec::new(),
    };
    let exp_seed = seed.map(|s| derive_seed(s, index as u64));
    let with_context = |err: CliError| CliError {
        message: format!("experiment {:?}: {}", e.name, err.message),
        ..err
    };
    let lab = || -> Result<Lab, CliError> {
        let engine = engine.ok_or_else(|| CliError::simulation("no spin system configured"))?;
        make_lab(cfg, engine, exp_seed.unwrap_or_default())
    };
    match &e.kind {
        ExperimentKind::Spectroscopy(p) => spectroscopy(&mut lab()?, p, &mut sink),
        ExperimentKind::Trace {
            sweep,
            duration,
            tracking,
            tracker,
        } => {
            let mut l = lab()?;
            let tp = TraceParams {
                sweep: *sweep,
                duration: *duration,
            };
            let tr = trace_experiment(&mut l, &tp, *tracking, tracker)?;
            let a_positive = cfg.spin.as_ref().is_none_or(|s| s.nuclei.first().is_none_or(|n| n.a >= 0.0));
            trace_outputs(&tr, a_positive, &mut sink)
        }
        ExperimentKind::Readout {
            n_ro,
            repetitions,
            params,
            randomize,
        } => readout(cfg, &mut lab()?, n_ro, *repetitions, params, *randomize, &mut sink),
        ExperimentKind::Eldor(p) => {
            let s = eldor_scan(&mut lab()?, p)?;
            sink.csv(
                "eldor.csv",
                &["detuning_hz", "p_down"],
                s.detuning_hz.iter().zip(&s.p_down).map(|(d, p)| vec![num(*d), num(*p)]),
            )?;
            if let Some((k, p)) = s.p_down.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) {
                sink.put("dip_detuning", s.detuning_hz[k], None, "Hz");
                sink.put("dip_p_down", *p, None, "probability");
            }
            Ok(())
        }
        ExperimentKind::Dnp {
            params,
            n_prep,
            repetitions,
            readout,
        } => {
            let c = dnp_experiment(&mut lab()?, params, n_prep, *repetitions, readout)?;
            sink.csv(
                "dnp.csv",
                &["n_prep", "p_target", "sigma"],
                (0..c.n_prep.len()).map(|k| vec![c.n_prep[k].to_string(), num(c.p_target[k]), num(c.sigma[k])]),
            )?;
            for k in 0..c.n_prep.len() {
                sink.put(format!("p_target_n{}", c.n_prep[k]), c.p_target[k], Some(c.sigma[k]), "probability");
            }
            Ok(())
        }
        ExperimentKind::Coherence(p) => {
            let c = coherence_scan(&mut lab()?, p)?;
            let inv = |k: usize| c.excited_inverted.get(k).map_or_else(String::new, |v| num(*v));
            sink.csv(
                "coherence.csv",
                &["delay_s", "excited", "excited_inverted", "contrast", "counts_per_shot"],
                (0..c.delay.len())
                    .map(|k| vec![num(c.delay[k]), num(c.excited[k]), inv(k), num(c.contrast[k]), num(c.counts[k])]),
            )?;
            match c.kind {
                CoherenceKind::Rabi | CoherenceKind::Ramsey => match fit_damped_cosine(&c.delay, &c.contrast) {
                    Ok(f) => {
                        let what = if c.kind == CoherenceKind::Rabi { "rabi_frequency" } else { "fringe_frequency" };
                        sink.put(what, f.frequency, Some(f.sigma_frequency), "Hz");
                        sink.put("decay_time", f.tau, Some(f.sigma_tau), "s");
                    }
                    Err(err) => sink.notes.push(format!("damped-cosine fit failed: {err}")),
                },
                CoherenceKind::Echo => match fit_exponential(&c.delay, &c.contrast) {
                    Ok(f) => sink.put("t2", f.tau, Some(f.sigma_tau), "s"),
                    Err(err) => sink.notes.push(format!("exponential fit failed: {err}")),
                },
            }
            Ok(())
        }
        ExperimentKind::Tracking {
            duration,
            settle,
            tracker,
        } => {
            let r = tracking_run(&mut lab()?, tracker, *duration)?;
            sink.csv(
                "tracking.csv",
                &["time_s", "correction_hz", "residual_hz", "sensor_counts"],
                (0..r.time.len())
                    .map(|k| vec![num(r.time[k]), num(r.correction_hz[k]), num(r.residual_hz[k]), num(r.sensor[k])]),
            )?;
            if let Some(rms) = r.rms_residual_after(*settle) {
                sink.put("rms_residual", rms, None, "Hz");
            }
            if let Some(c) = r.correction_hz.last() {
                sink.put("final_correction", *c, None, "Hz");
            }
            Ok(())
        }
        ExperimentKind::Lattice {
            structure,
            beta,
            theta,
            nominal,
            measured,
            tolerance,
        } => lattice(structure, *beta, *theta, *nominal, measured, *tolerance, &mut sink),
    }
    .map_err(with_context)?;

    Ok(ExperimentEntry {
        index,
        name: e.name.clone(),
        kind: e.kind.label().into(),
        seed: exp_seed.filter(|_| e.kind.needs_system()),
        directory: sink.rel,
        files: sink.files,
        summary: sink.summary,
        notes: sink.notes,
    })
}

fn spectroscopy(lab: &mut Lab, p: &spinfluor_core::sequencer::SweepParams, sink: &mut Sink) -> Result<(), CliError> {
    let s = spectroscopy_sweep(lab, p)?;
    sink.csv(
        "spectrum.csv",
        &["detuning_hz", "counts_per_shot"],
        s.detuning_hz.iter().zip(&s.counts).map(|(d, c)| vec![num(*d), num(*c)]),
    )?;
    sink.put("excitations", s.excitations as f64, None, "count");
    match fit_lorentzian(&s.detuning_hz, &s.counts) {
        Ok(f) => {
            sink.put("center", f.center, Some(f.sigma_center()), "Hz");
            sink.put("fwhm", f.fwhm, Some(f.covariance[1][1].sqrt()), "Hz");
        }
        Err(err) => sink.notes.push(format!("Lorentzian fit failed: {err}")),
    }
    Ok(())
}

fn eta_quantity(sink: &mut Sink, name: &str, est: EtaEstimate) {
    match est {
        EtaEstimate::Estimate { eta, sigma, .. } => sink.put(name, eta, Some(sigma), "per excitation"),
        EtaEstimate::UpperBound { bound, .. } => sink.put(format!("{name}_upper_bound"), bound, None, "per excitation"),
        EtaEstimate::Undefined => {}
    }
}

fn trace_outputs(tr: &spinfluor_core::sequencer::Trace, a_positive: bool, sink: &mut Sink) -> Result<(), CliError> {
    let cl = classify_trace(&tr.centers_hz, &ClassifyOptions::default());
    let state = |k: usize| cl.as_ref().map_or_else(|_| String::new(), |c| c.states[k].to_string());
    sink.csv(
        "trace.csv",
        &["spectrum", "start_s", "end_s", "center_hz", "correction_hz", "excitations", "state"],
        tr.spectra.iter().enumerate().map(|(k, s)| {
            vec![
                k.to_string(),
                num(s.start),
                num(s.end),
                num(tr.centers_hz[k]),
                num(tr.corrections_hz[k]),
                s.excitations.to_string(),
                state(k),
            ]
        }),
    )?;
    sink.csv(
        "spectra.csv",
        &["spectrum", "detuning_hz", "counts_per_shot"],
        tr.spectra.iter().enumerate().flat_map(|(k, s)| {
            s.detuning_hz.iter().zip(&s.counts).map(move |(d, c)| vec![k.to_string(), num(*d), num(*c)])
        }),
    )?;
    sink.put("spectra", tr.spectra.len() as f64, None, "count");
    sink.put("simulated_state_changes", tr.true_jumps() as f64, None, "count");
    let cl = match cl {
        Ok(c) => c,
        Err(err) => {
            sink.notes.push(format!("classification failed: {err}"));
            return sink.jsonl::<serde_json::Value>("jumps.jsonl", []);
        }
    };
    #[derive(Serialize)]
    struct JumpLine {
        spectrum: usize,
        time_s: f64,
        from: usize,
        to: usize,
        delta_hz: f64,
    }
    sink.jsonl(
        "jumps.jsonl",
        cl.jumps.iter().map(|j| JumpLine {
            spectrum: j.index,
            time_s: tr.spectra[j.index].start,
            from: j.from,
            to: j.to,
            delta_hz: j.delta,
        }),
    )?;
    sink.put("states", cl.n_states() as f64, None, "count");
    sink.put("jumps", cl.jumps.len() as f64, None, "count");
    for (k, (f, m)) in cl.dwell_fraction.iter().zip(&cl.state_means).enumerate() {
        sink.put(format!("dwell_fraction_state{k}"), *f, None, "fraction");
        sink.put(format!("center_state{k}"), *m, None, "Hz");
    }
    if let Some((a, sd, n)) = cl.adjacent_jump_size() {
        sink.put("a_jump", a, Some(sd / (n as f64).sqrt()), "Hz");
    }
    match cl.n_states() {
        2 => match estimate_eta_resolved(&cl, &tr.excitations(), a_positive) {
            Ok(e) => {
                eta_quantity(sink, "eta_d", e.eta_d);
                eta_quantity(sink, "eta_z", e.eta_z);
            }
            Err(err) => sink.notes.push(format!("η estimate failed: {err}")),
        },
        4 => {
            if let Some((a1, a2)) = cl.two_nucleus_couplings() {
                sink.put("a1", a1, None, "Hz");
                sink.put("a2", a2, None, "Hz");
            }
        }
        _ => {}
    }
    Ok(())
}

#[derive(Serialize)]
struct ReadoutLine {
    n_ro: usize,
    repetition: usize,
    c_down: u64,
    c_up: u64,
    delta_c: i64,
    called: NuclearState,
    before: NuclearState,
    after: NuclearState,
    excitations: u64,
}

/// Per-round separation of the mean counts after pulses on the occupied
/// and the empty allowed line. A window of length t_D catches the decay
/// fraction f = 1 − e^{−Γt_D}; the electron left excited at the end of one
/// window is transferred back by the next π pulse on the same line.
pub fn effective_epsilon(epsilon: f64, gamma: f64, t_d: f64, blanking: f64) -> f64 {
    let f = 1.0 - (-gamma * t_d).exp();
    let counted = (-gamma * blanking.min(t_d)).exp() - (-gamma * t_d).exp();
    let q = (1.0 - f).powi(2);
    let x = q / (1.0 + q);
    epsilon * (1.0 - x) * f * counted
}

fn readout(
    cfg: &RunConfig,
    lab: &mut Lab,
    n_ro: &[usize],
    repetitions: usize,
    params: &ReadoutParams,
    randomize: bool,
    sink: &mut Sink,
) -> Result<(), CliError> {
    if repetitions < 1 {
        return Err(CliError::schema("repetitions", "must be at least 1".into()));
    }
    let mut lines = Vec::new();
    let mut hist = Vec::new();
    let mut fid = Vec::new();
    let (mut xs, mut ps, mut ws) = (Vec::new(), Vec::new(), Vec::new());
    for &n in n_ro {
        let p = ReadoutParams { n_ro: n, ..*params };
        let mut dc = Vec::with_capacity(repetitions);
        let mut hits = 0usize;
        for rep in 0..repetitions {
            if randomize {
                lab.randomize_nuclear();
            }
            let r = single_shot_readout(lab, &p)?;
            let d = r.c_down as i64 - r.c_up as i64;
            hits += (r.called == r.before) as usize;
            dc.push(d);
            lines.push(ReadoutLine {
                n_ro: n,
                repetition: rep,
                c_down: r.c_down,
                c_up: r.c_up,
                delta_c: d,
                called: r.called,
                before: r.before,
                after: r.after,
                excitations: r.excitations,
            });
        }
        let mut counts = std::collections::BTreeMap::new();
        for &d in &dc {
            *counts.entry(d).or_insert(0usize) += 1;
        }
        hist.extend(counts.into_iter().map(|(d, k)| vec![n.to_string(), d.to_string(), k.to_string()]));
        let success = hits as f64 / repetitions as f64;
        let sigma = (success * (1.0 - success) / repetitions as f64).sqrt();
        let x: Vec<f64> = dc.iter().map(|&d| d as f64).collect();
        let th = readout_threshold(&x).ok();
        fid.push(vec![
            n.to_string(),
            repetitions.to_string(),
            num(success),
            num(sigma),
            th.map_or_else(String::new, |t| num(t.threshold)),
            th.map_or_else(String::new, |t| num(t.fidelity)),
        ]);
        if Some(&n) == n_ro.iter().max() {
            sink.put("success_at_max_n_ro", success, Some(sigma), "probability");
            if let Some(t) = th {
                sink.put("threshold_at_max_n_ro", t.threshold, None, "counts");
                sink.put("fidelity_at_max_n_ro", t.fidelity, None, "probability");
            }
        }
        xs.push(n as f64);
        ps.push(success);
        ws.push(repetitions as f64);
    }
    sink.jsonl("readout.jsonl", lines)?;
    sink.csv("histogram.csv", &["n_ro", "delta_c_counts", "occurrences"], hist)?;
    sink.csv(
        "fidelity.csv",
        &["n_ro", "readouts", "success", "success_sigma", "threshold_counts", "threshold_fidelity"],
        fid,
    )?;

    if xs.len() < 3 {
        sink.notes.push("readout-curve fit needs at least three N_RO values".into());
        return Ok(());
    }
    let sys = lab.engine().system();
    let gamma = sys.transition(sys.allowed(NuclearConfig::ALL_UP)).rate;
    let det = lab.detector();
    let eps = effective_epsilon(det.epsilon, gamma, params.t_d, cfg.dynamics.blanking);
    sink.put("effective_epsilon", eps, None, "counts per round");
    match fit_readout_curve_weighted(&xs, &ps, &ws, eps, det.gamma_dc, params.t_d) {
        Ok(f) => {
            sink.put("p0", f.model.p0, Some(f.sigma_p0), "probability");
            sink.put("eta", f.model.eta, Some(f.sigma_eta), "per readout round");
            // The call follows the majority state over the readout, which to
            // first order in ηN is the state at N/2.
            for (suffix, k) in [("", 1.0), ("_midpoint", 2.0)] {
                let eta = k * f.model.eta;
                if suffix == "_midpoint" {
                    sink.put("eta_midpoint", eta, Some(k * f.sigma_eta), "per readout round");
                }
                if eta > 0.0 {
                    let b = to_hz(b_from_eta(eta, sys.params.omega_i, sys.cavity.kappa));
                    sink.put(format!("b_abs{suffix}"), b, Some(0.5 * b * f.sigma_eta / f.model.eta), "Hz");
                }
            }
        }
        Err(err) => sink.notes.push(format!("readout-curve fit failed: {err}")),
    }
    Ok(())
}

pub fn load_structure(s: &Structure) -> Result<CrystalModel, CliError> {
    match s {
        Structure::Builtin => Ok(CrystalModel::cawo4()),
        Structure::File(p) => CrystalModel::from_file(p).map_err(|e| CliError::io(format!("{}: {e}", p.display()))),
    }
}

pub fn sweep_rows(t: &spinfluor_core::lattice::SweepTable) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (k, th) in t.theta_deg.iter().enumerate() {
        for s in &t.sites {
            rows.push(vec![deg(*th), s.site.to_string(), s.label.clone(), num(s.a[k]), num(s.b[k])]);
        }
    }
    rows
}

pub const SWEEP_HEADER: [&str; 5] = ["theta_deg", "site", "label", "a_hz", "b_hz"];

fn lattice(
    structure: &Structure,
    beta: f64,
    theta: config::ThetaRange,
    nominal: Option<(f64, f64)>,
    measured: &[(String, spinfluor_core::lattice::MeasuredCoupling)],
    tolerance: f64,
    sink: &mut Sink,
) -> Result<(), CliError> {
    let model = load_structure(structure)?;
    sink.notes.push(format!("structure {}", structure.describe()));
    let mut t = angle_sweep(&model, beta, (theta.lo, theta.hi), theta.n)?;
    if let Some((lo, hi)) = nominal {
        t = t.with_nominal(lo, hi);
    }
    sink.csv("lattice.csv", &SWEEP_HEADER, sweep_rows(&t))?;

    let mut labels: Vec<&str> = t.sites.iter().map(|s| s.label.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    for l in labels {
        let (lo, hi) = t.nominal;
        let idx: Vec<usize> = (0..t.theta_deg.len()).filter(|&k| t.theta_deg[k] >= lo && t.theta_deg[k] <= hi).collect();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for s in t.sites.iter().filter(|s| s.label == l) {
            a.extend(idx.iter().map(|&k| s.a[k].abs()));
            b.extend(idx.iter().map(|&k| s.b[k]));
        }
        let range = |v: &[f64]| v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(p, q), &x| (p.min(x), q.max(x)));
        let ((a0, a1), (b0, b1)) = (range(&a), range(&b));
        sink.put(format!("type_{l}_a_abs_min"), a0, None, "Hz");
        sink.put(format!("type_{l}_a_abs_max"), a1, None, "Hz");
        sink.put(format!("type_{l}_b_min"), b0, None, "Hz");
        sink.put(format!("type_{l}_b_max"), b1, None, "Hz");
    }

    if measured.is_empty() {
        return Ok(());
    }
    let mut rows = Vec::new();
    for (name, m) in measured {
        let c = assign_site(m, &t, tolerance);
        match c.first() {
            Some(best) => sink.notes.push(format!(
                "{name}: best match site {} (type {}) at θ = {:.2}°, distance {:.2}{}",
                best.site,
                best.label,
                best.theta_deg,
                best.distance,
                if best.out_of_range { ", outside the nominal θ interval" } else { "" }
            )),
            None => sink.notes.push(format!("{name}: no site within tolerance {tolerance}")),
        }
        for (rank, k) in c.iter().enumerate() {
            rows.push(vec![
                name.clone(),
                rank.to_string(),
                k.site.to_string(),
                k.label.clone(),
                deg(k.theta_deg),
                num(k.a),
                num(k.b),
                num(k.distance),
                k.out_of_range.to_string(),
            ]);
        }
    }
    sink.csv(
        "assignment.csv",
        &["measured", "rank", "site", "label", "theta_deg", "a_hz", "b_hz", "distance", "out_of_range"],
        rows,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_reference() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn effective_epsilon_limits() {
        // Long window, no blanking: every decay is counted, nothing carries over.
        assert!((effective_epsilon(0.18, 1e4, 1.0, 0.0) - 0.18).abs() < 1e-12);
        assert_eq!(effective_epsilon(0.18, 793.0, 2.6e-3, 2.6e-3), 0.0);
        let e = effective_epsilon(0.18, 1.0 / 1.26e-3, 2.6e-3, 0.0);
        assert!((e / 0.18 - 0.75).abs() < 0.02, "{e}");
    }
}
