//! Electron–nuclear spin Hamiltonian in the secular approximation,
//!
//! ```text
//! H/ħ = ω_S S_z + Σ_k [ ω_I I_z,k + A_k S_z I_z,k + B_k S_z I_x,k ]
//! ```
//!
//! with its exact eigenstructure, the closed-form single-nucleus expressions
//! (nuclear splittings, forbidden-line offsets, AC-Zeeman shifted lines,
//! forbidden Rabi frequencies) and the cavity-filtered radiative rates.
//!
//! Nuclear basis convention: ⇑ is m_I = +½ and ⇓ is m_I = −½. With ω_I < 0
//! the level order in the high-field limit is |↓⇑⟩ < |↓⇓⟩ < |↑⇑⟩ < |↑⇓⟩.
//! The zero-quantum line is |↓⇑⟩ ↔ |↑⇓⟩ near ω_S − ω_I and the
//! double-quantum line is |↓⇓⟩ ↔ |↑⇑⟩ near ω_S + ω_I.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Hyperfine couplings of one nucleus (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nucleus {
    pub a: f64,
    pub b: f64,
}

impl Nucleus {
    pub fn new(a: f64, b: f64) -> Self {
        Self { a, b }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinParams {
    /// Electron Zeeman frequency (rad/s).
    pub omega_s: f64,
    /// Signed nuclear Larmor frequency, ω_I = −γ_n B_0 (rad/s).
    pub omega_i: f64,
    pub nuclei: Vec<Nucleus>,
}

impl SpinParams {
    pub fn new(omega_s: f64, omega_i: f64, nuclei: Vec<Nucleus>) -> Result<Self> {
        let p = Self {
            omega_s,
            omega_i,
            nuclei,
        };
        p.validate()?;
        Ok(p)
    }

    /// One nucleus with couplings `a`, `b`.
    pub fn single(omega_s: f64, omega_i: f64, a: f64, b: f64) -> Self {
        Self {
            omega_s,
            omega_i,
            nuclei: vec![Nucleus { a, b }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.omega_s.is_finite()
            && self.omega_i.is_finite()
            && self.nuclei.iter().all(|n| n.a.is_finite() && n.b.is_finite());
        if !finite {
            return Err(Error::InvalidParameter(
                "spin frequencies must be finite".into(),
            ));
        }
        if self.nuclei.len() > 10 {
            return Err(Error::InvalidParameter(format!(
                "{} nuclei requested; at most 10 are supported",
                self.nuclei.len()
            )));
        }
        Ok(())
    }

    /// `|ω_I| > 5·max(|A|, |B|)` over all nuclei.
    pub fn is_high_field(&self) -> bool {
        self.nuclei
            .iter()
            .all(|n| self.omega_i.abs() > 5.0 * n.a.abs().max(n.b.abs()))
    }

    pub fn coupling(&self, nucleus: usize) -> Coupling {
        let n = self.nuclei[nucleus];
        Coupling {
            omega_i: self.omega_i,
            a: n.a,
            b: n.b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavityParams {
    /// Resonator frequency (rad/s).
    pub omega_0: f64,
    /// Full linewidth (rad/s).
    pub kappa: f64,
    /// Spin–resonator coupling (rad/s).
    pub g0: f64,
}

impl CavityParams {
    pub fn new(omega_0: f64, kappa: f64, g0: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "cavity linewidth must be positive, got {kappa}"
            )));
        }
        if !(g0 >= 0.0 && g0.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "coupling g0 must be non-negative, got {g0}"
            )));
        }
        Ok(Self { omega_0, kappa, g0 })
    }

    /// Radiative rate of a fully allowed spin on resonance, 4g₀²/κ.
    pub fn purcell_max(&self) -> f64 {
        4.0 * self.g0 * self.g0 / self.kappa
    }

    /// Power transmission of the resonator at `detuning`, 1/(1+4Δ²/κ²).
    pub fn filter_power(&self, detuning: f64) -> f64 {
        let x = 2.0 * detuning / self.kappa;
        1.0 / (1.0 + x * x)
    }

    /// Field amplitude transmission, the square root of [`Self::filter_power`].
    pub fn filter_amplitude(&self, detuning: f64) -> f64 {
        self.filter_power(detuning).sqrt()
    }
}

/// Purcell-enhanced radiative rate of a spin detuned by `detuning` from the
/// resonator: Γ(Δ) = (4g₀²/κ) / (1 + 4Δ²/κ²).
pub fn purcell_rate(c: &CavityParams, detuning: f64) -> f64 {
    c.purcell_max() * c.filter_power(detuning)
}

/// Single-nucleus closed forms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coupling {
    pub omega_i: f64,
    pub a: f64,
    pub b: f64,
}

impl Coupling {
    fn check_poles(&self) -> Result<()> {
        let scale = self.a.abs() + 2.0 * self.omega_i.abs();
        let tiny = 1e-12 * scale;
        if (self.a + 2.0 * self.omega_i).abs() <= tiny || (self.a - 2.0 * self.omega_i).abs() <= tiny
        {
            return Err(Error::HyperfinePole {
                a: self.a,
                omega_i: self.omega_i,
            });
        }
        Ok(())
    }

    /// Nuclear quantization angles in the electron ↑ and ↓ manifolds,
    /// tan ξ₊ = −B/(A+2ω_I), tan ξ₋ = −B/(A−2ω_I).
    pub fn mixing_angles(&self) -> Result<(f64, f64)> {
        self.check_poles()?;
        let xi_p = (-self.b / (self.a + 2.0 * self.omega_i)).atan();
        let xi_m = (-self.b / (self.a - 2.0 * self.omega_i)).atan();
        Ok((xi_p, xi_m))
    }

    /// Signed nuclear splittings (ω⁺_I, ω⁻_I) in the electron ↑ and ↓ manifolds.
    pub fn nuclear_splittings(&self) -> Result<(f64, f64)> {
        let (xi_p, xi_m) = self.mixing_angles()?;
        let wp = (self.omega_i + 0.5 * self.a) * xi_p.cos() - 0.5 * self.b * xi_p.sin();
        let wm = (self.omega_i - 0.5 * self.a) * xi_m.cos() + 0.5 * self.b * xi_m.sin();
        Ok((wp, wm))
    }

    /// Undriven offsets of the (double-, zero-) quantum lines from ω_S.
    pub fn forbidden_frequencies(&self) -> Result<(f64, f64)> {
        let (wp, wm) = self.nuclear_splittings()?;
        let half = 0.5 * (wp + wm);
        Ok((half, -half))
    }

    /// Offsets of the (⇑, ⇓) allowed lines from ω_S.
    pub fn allowed_offsets(&self) -> Result<(f64, f64)> {
        let (wp, wm) = self.nuclear_splittings()?;
        let half = 0.5 * (wp - wm);
        Ok((half, -half))
    }

    /// |⟨f|S_x|i⟩| for (allowed, forbidden) transitions.
    pub fn matrix_elements(&self) -> Result<(f64, f64)> {
        let (xi_p, xi_m) = self.mixing_angles()?;
        let half = 0.5 * (xi_p - xi_m);
        Ok((0.5 * half.cos().abs(), 0.5 * half.sin().abs()))
    }

    /// High-field approximation of the forbidden matrix element, |B/(4ω_I)|.
    pub fn forbidden_matrix_element_approx(&self) -> f64 {
        (self.b / (4.0 * self.omega_i)).abs()
    }

    /// Forbidden-line offsets (δ_d(Ω), δ_z(Ω)) from ω_S under a drive whose
    /// allowed-transition Rabi frequency at the drive frequency is `omega`.
    pub fn ac_zeeman_frequencies(&self, omega: f64) -> Result<(f64, f64)> {
        if !(omega >= 0.0 && omega.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "drive amplitude must be non-negative, got {omega}"
            )));
        }
        let mut d = ForbiddenLineShift::new(*self, ForbiddenKind::DoubleQuantum)?;
        let mut z = ForbiddenLineShift::new(*self, ForbiddenKind::ZeroQuantum)?;
        Ok((d.solve(omega)?, z.solve(omega)?))
    }

    /// Difference of the nuclear splittings, Δω_I = ω⁺_I − ω⁻_I.
    fn splitting_difference(&self) -> Result<f64> {
        let (wp, wm) = self.nuclear_splittings()?;
        Ok(wp - wm)
    }
}

/// Residual of the self-consistent AC-Zeeman equation,
/// `δ − δ⁽⁰⁾ + (Ω²/2)·[1/(2δ − Δω_I) + 1/(2δ + Δω_I)]`.
pub fn ac_zeeman_residual(delta: f64, delta0: f64, dw: f64, omega: f64) -> f64 {
    delta - delta0 + 0.5 * omega * omega * (1.0 / (2.0 * delta - dw) + 1.0 / (2.0 * delta + dw))
}

fn ac_zeeman_derivative(delta: f64, dw: f64, omega: f64) -> f64 {
    let p = 2.0 * delta - dw;
    let m = 2.0 * delta + dw;
    1.0 - omega * omega * (1.0 / (p * p) + 1.0 / (m * m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ForbiddenKind {
    ZeroQuantum,
    DoubleQuantum,
}

/// Continuation solver for a driven forbidden line. Keeps the last solution
/// so that a slowly varying drive envelope can be followed cheaply along the
/// physical branch.
#[derive(Debug, Clone)]
pub struct ForbiddenLineShift {
    delta0: f64,
    dw: f64,
    last_omega: f64,
    last_delta: f64,
}

const NEWTON_MAX_ITER: usize = 100;
const NEWTON_RTOL: f64 = 1e-10;

impl ForbiddenLineShift {
    pub fn new(coupling: Coupling, kind: ForbiddenKind) -> Result<Self> {
        let (d0, z0) = coupling.forbidden_frequencies()?;
        let delta0 = match kind {
            ForbiddenKind::DoubleQuantum => d0,
            ForbiddenKind::ZeroQuantum => z0,
        };
        Ok(Self {
            delta0,
            dw: coupling.splitting_difference()?,
            last_omega: 0.0,
            last_delta: delta0,
        })
    }

    pub fn undriven(&self) -> f64 {
        self.delta0
    }

    fn newton(&self, start: f64, omega: f64) -> Option<f64> {
        let mut x = start;
        for _ in 0..NEWTON_MAX_ITER {
            let f = ac_zeeman_residual(x, self.delta0, self.dw, omega);
            let df = ac_zeeman_derivative(x, self.dw, omega);
            if df == 0.0 || !df.is_finite() {
                return None;
            }
            let step = f / df;
            x -= step;
            if !x.is_finite() {
                return None;
            }
            if step.abs() <= NEWTON_RTOL * x.abs().max(self.delta0.abs()) {
                return Some(x);
            }
        }
        None
    }

    /// Offset of the driven line from ω_S at drive amplitude `omega`.
    ///
    /// Steps in Ω² from the last solved amplitude so the root stays on the
    /// branch connected to δ⁽⁰⁾.
    pub fn solve(&mut self, omega: f64) -> Result<f64> {
        if omega == 0.0 {
            self.last_omega = 0.0;
            self.last_delta = self.delta0;
            return Ok(self.delta0);
        }
        if omega == self.last_omega {
            return Ok(self.last_delta);
        }
        if let Some(x) = self.newton(self.last_delta, omega) {
            if (x - self.last_delta).abs() < 0.5 * self.delta0.abs() {
                self.last_omega = omega;
                self.last_delta = x;
                return Ok(x);
            }
        }
        // Homotopy from zero drive.
        let mut steps = 16usize;
        while steps <= 4096 {
            let mut x = self.delta0;
            let mut ok = true;
            for s in 1..=steps {
                let o = omega * ((s as f64) / steps as f64).sqrt();
                match self.newton(x, o) {
                    Some(r) => x = r,
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                self.last_omega = omega;
                self.last_delta = x;
                return Ok(x);
            }
            steps *= 4;
        }
        Err(Error::NoConvergence {
            what: "AC-Zeeman line solve",
            iterations: NEWTON_MAX_ITER,
        })
    }

    /// Shift of the driven line from its undriven position.
    pub fn shift(&mut self, omega: f64) -> Result<f64> {
        Ok(self.solve(omega)? - self.delta0)
    }
}

impl Coupling {
    /// Forbidden-transition Rabi frequency for a drive whose allowed-transition
    /// Rabi frequency on resonance with the cavity is `omega`, applied at
    /// detuning `delta` from the cavity:
    /// `(Ω/2)·[B/(2ω_I−A) + B/(2ω_I+A)] / √(1+4δ²/κ²)`.
    pub fn forbidden_rabi(&self, omega: f64, cavity: &CavityParams, delta: f64) -> Result<f64> {
        self.check_poles()?;
        let (a, b, wi) = (self.a, self.b, self.omega_i);
        let bare = 0.5 * omega * (b / (2.0 * wi - a) + b / (2.0 * wi + a));
        Ok(bare.abs() * cavity.filter_amplitude(delta))
    }
}

fn first_coupling(p: &SpinParams) -> Result<Coupling> {
    if p.nuclei.is_empty() {
        return Err(Error::InvalidParameter("system has no coupled nucleus".into()));
    }
    Ok(p.coupling(0))
}

/// Undriven (double-, zero-) quantum offsets from ω_S for the first nucleus.
pub fn forbidden_frequencies(p: &SpinParams) -> Result<(f64, f64)> {
    first_coupling(p)?.forbidden_frequencies()
}

/// Driven (double-, zero-) quantum offsets from ω_S for the first nucleus.
pub fn ac_zeeman_frequencies(p: &SpinParams, omega: f64) -> Result<(f64, f64)> {
    first_coupling(p)?.ac_zeeman_frequencies(omega)
}

/// Forbidden Rabi frequency of the first nucleus, see [`Coupling::forbidden_rabi`].
pub fn forbidden_rabi(omega: f64, p: &SpinParams, c: &CavityParams, delta: f64) -> Result<f64> {
    first_coupling(p)?.forbidden_rabi(omega, c, delta)
}

/// Cross-relaxation rates and probabilities for one nucleus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossRelaxation {
    /// Radiative rate on the allowed line that competes with each channel
    /// (1/s): the ⇑ line for the double-quantum channel, ⇓ for zero-quantum.
    pub gamma_r_d: f64,
    pub gamma_r_z: f64,
    pub gamma_x_d: f64,
    pub gamma_x_z: f64,
    pub eta_d: f64,
    pub eta_z: f64,
}

/// Closed-form high-field cross-relaxation,
/// `Γx^{d,z} = Γ_R·B²/(4ω_I²) / (1 + 4[ω_I ± (ω_S−ω_0)]²/κ²)`, for the first
/// nucleus of `sys`. Γ_R is the resonant Purcell rate 4g₀²/κ.
pub fn cross_relaxation(sys: &SpinSystem, c: &CavityParams) -> CrossRelaxation {
    let p = &sys.params;
    let n = p.nuclei.first().copied().unwrap_or(Nucleus { a: 0.0, b: 0.0 });
    let gamma_r = c.purcell_max();
    let spin_detuning = p.omega_s - c.omega_0;
    let mixing = if p.omega_i == 0.0 {
        0.0
    } else {
        n.b * n.b / (4.0 * p.omega_i * p.omega_i)
    };
    let gamma_x_d = gamma_r * mixing * c.filter_power(p.omega_i + spin_detuning);
    let gamma_x_z = gamma_r * mixing * c.filter_power(p.omega_i - spin_detuning);
    let gamma_r_spin = purcell_rate(c, spin_detuning);
    let eta = |gx: f64| {
        if gx == 0.0 {
            0.0
        } else {
            gx / (gamma_r_spin + gx)
        }
    };
    CrossRelaxation {
        gamma_r_d: gamma_r_spin,
        gamma_r_z: gamma_r_spin,
        gamma_x_d,
        gamma_x_z,
        eta_d: eta(gamma_x_d),
        eta_z: eta(gamma_x_z),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NuclearState {
    Up,
    Down,
}

impl NuclearState {
    pub fn flipped(self) -> Self {
        match self {
            NuclearState::Up => NuclearState::Down,
            NuclearState::Down => NuclearState::Up,
        }
    }
}

/// Nuclear configuration as a bit set; bit k set means nucleus k is ⇓.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NuclearConfig(pub u32);

impl NuclearConfig {
    pub const ALL_UP: NuclearConfig = NuclearConfig(0);

    pub fn uniform(n: usize, state: NuclearState) -> Self {
        match state {
            NuclearState::Up => NuclearConfig(0),
            NuclearState::Down => NuclearConfig((1u32 << n) - 1),
        }
    }

    pub fn state(self, k: usize) -> NuclearState {
        if self.0 >> k & 1 == 1 {
            NuclearState::Down
        } else {
            NuclearState::Up
        }
    }

    pub fn with(self, k: usize, s: NuclearState) -> Self {
        match s {
            NuclearState::Up => NuclearConfig(self.0 & !(1 << k)),
            NuclearState::Down => NuclearConfig(self.0 | (1 << k)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransitionKind {
    /// Electron flip, nuclear configuration preserved.
    Allowed,
    ZeroQuantum(usize),
    DoubleQuantum(usize),
    /// Electron flip with two or more nuclear flips.
    MultiFlip,
}

impl TransitionKind {
    pub fn flipped_nucleus(self) -> Option<usize> {
        match self {
            TransitionKind::ZeroQuantum(k) | TransitionKind::DoubleQuantum(k) => Some(k),
            _ => None,
        }
    }

    pub fn forbidden_kind(self) -> Option<ForbiddenKind> {
        match self {
            TransitionKind::ZeroQuantum(_) => Some(ForbiddenKind::ZeroQuantum),
            TransitionKind::DoubleQuantum(_) => Some(ForbiddenKind::DoubleQuantum),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Level {
    pub electron_up: bool,
    pub nuclear: NuclearConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Electron-↓ level index.
    pub lower: usize,
    /// Electron-↑ level index.
    pub upper: usize,
    pub kind: TransitionKind,
    /// rad/s
    pub frequency: f64,
    /// |⟨lower|S_x|upper⟩|
    pub matrix_element: f64,
    /// Radiative decay rate upper → lower (1/s).
    pub rate: f64,
}

/// Exactly diagonalized electron–nuclear system with labeled levels.
///
/// Level `i` is the eigenstate with largest overlap on product basis state
/// `i`, where `i = e·2ⁿ + c` with `e = 1` for electron ↑ and `c` the
/// [`NuclearConfig`] bits.
#[derive(Debug, Clone)]
pub struct SpinSystem {
    pub params: SpinParams,
    pub cavity: CavityParams,
    hamiltonian: DMatrix<f64>,
    energies: Vec<f64>,
    eigenvectors: DMatrix<f64>,
    levels: Vec<Level>,
    transitions: Vec<Transition>,
    /// Transition indices keyed by upper level.
    decay: Vec<Vec<usize>>,
    /// Transition indices touching each level.
    touching: Vec<Vec<usize>>,
}

pub fn hamiltonian(p: &SpinParams) -> DMatrix<f64> {
    let n = p.nuclei.len();
    let dim = 2usize << n;
    let mut h = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        let ms = if i >> n & 1 == 1 { 0.5 } else { -0.5 };
        let mut diag = ms * p.omega_s;
        for (k, nuc) in p.nuclei.iter().enumerate() {
            let mi = if i >> k & 1 == 1 { -0.5 } else { 0.5 };
            diag += mi * p.omega_i + nuc.a * ms * mi;
            let j = i ^ (1 << k);
            h[(i, j)] += nuc.b * ms * 0.5;
        }
        h[(i, i)] = diag;
    }
    h
}

/// Diagonalize the full Hamiltonian and label levels and transitions.
pub fn build_system(p: &SpinParams, c: &CavityParams) -> Result<SpinSystem> {
    p.validate()?;
    let n = p.nuclei.len();
    let dim = 2usize << n;
    let h = hamiltonian(p);
    let eig = SymmetricEigen::new(h.clone());

    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    for w in order.windows(2) {
        if (eig.eigenvalues[w[1]] - eig.eigenvalues[w[0]]).abs() <= 1e-9 * scale {
            return Err(Error::DegenerateLevels(w[0], w[1]));
        }
    }

    // Maximum-overlap labeling; must be a bijection.
    let mut owner: Vec<Option<usize>> = vec![None; dim];
    for col in 0..dim {
        let v = eig.eigenvectors.column(col);
        let label = v.iamax();
        if let Some(other) = owner[label] {
            return Err(Error::DegenerateLevels(other, col));
        }
        owner[label] = Some(col);
    }
    let mut energies = vec![0.0; dim];
    let mut vecs = DMatrix::zeros(dim, dim);
    for (label, col) in owner.iter().enumerate() {
        let col = col.expect("bijective labeling");
        energies[label] = eig.eigenvalues[col];
        let v = eig.eigenvectors.column(col);
        let sign = if v[label] < 0.0 { -1.0 } else { 1.0 };
        vecs.set_column(label, &(v * sign));
    }

    let half = 1usize << n;
    let levels: Vec<Level> = (0..dim)
        .map(|i| Level {
            electron_up: i >= half,
            nuclear: NuclearConfig((i & (half - 1)) as u32),
        })
        .collect();

    let mut transitions = Vec::with_capacity(half * half);
    for lower in 0..half {
        for upper in half..dim {
            let mut overlap = 0.0;
            for c_ in 0..half {
                overlap += vecs[(c_, lower)] * vecs[(half + c_, upper)];
            }
            let m = 0.5 * overlap.abs();
            let lc = levels[lower].nuclear.0;
            let uc = levels[upper].nuclear.0;
            let diff = lc ^ uc;
            let kind = if diff == 0 {
                TransitionKind::Allowed
            } else if diff.count_ones() == 1 {
                let k = diff.trailing_zeros() as usize;
                if lc >> k & 1 == 0 {
                    TransitionKind::ZeroQuantum(k)
                } else {
                    TransitionKind::DoubleQuantum(k)
                }
            } else {
                TransitionKind::MultiFlip
            };
            let frequency = energies[upper] - energies[lower];
            let rate = c.purcell_max() * 4.0 * m * m * c.filter_power(frequency - c.omega_0);
            transitions.push(Transition {
                lower,
                upper,
                kind,
                frequency,
                matrix_element: m,
                rate,
            });
        }
    }

    let mut decay = vec![Vec::new(); dim];
    let mut touching = vec![Vec::new(); dim];
    for (t, tr) in transitions.iter().enumerate() {
        decay[tr.upper].push(t);
        touching[tr.upper].push(t);
        touching[tr.lower].push(t);
    }

    Ok(SpinSystem {
        params: p.clone(),
        cavity: *c,
        hamiltonian: h,
        energies,
        eigenvectors: vecs,
        levels,
        transitions,
        decay,
        touching,
    })
}

impl SpinSystem {
    pub fn n_nuclei(&self) -> usize {
        self.params.nuclei.len()
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn transition(&self, index: usize) -> &Transition {
        &self.transitions[index]
    }

    pub fn level_index(&self, electron_up: bool, nuclear: NuclearConfig) -> usize {
        let half = 1usize << self.n_nuclei();
        (if electron_up { half } else { 0 }) + nuclear.0 as usize
    }

    /// Index of the transition between two levels (any order).
    pub fn transition_between(&self, a: usize, b: usize) -> Option<usize> {
        let half = 1usize << self.n_nuclei();
        let (lower, upper) = if a < half { (a, b) } else { (b, a) };
        if lower >= half || upper < half {
            return None;
        }
        Some(lower * half + (upper - half))
    }

    /// Transitions whose upper level is `level` (empty for electron-↓ levels).
    pub fn decay_channels(&self, level: usize) -> &[usize] {
        &self.decay[level]
    }

    pub fn touching(&self, level: usize) -> &[usize] {
        &self.touching[level]
    }

    /// Total radiative decay rate out of `level`.
    pub fn total_decay_rate(&self, level: usize) -> f64 {
        self.decay[level]
            .iter()
            .map(|&t| self.transitions[t].rate)
            .sum()
    }

    /// The allowed transition for nuclear configuration `c`.
    pub fn allowed(&self, c: NuclearConfig) -> usize {
        let lower = self.level_index(false, c);
        let upper = self.level_index(true, c);
        self.transition_between(lower, upper).expect("valid levels")
    }

    /// Zero-quantum line flipping nucleus `k` (⇑ → ⇓) with the other nuclei
    /// in `spectators`.
    pub fn zero_quantum(&self, k: usize, spectators: NuclearConfig) -> usize {
        let lower = self.level_index(false, spectators.with(k, NuclearState::Up));
        let upper = self.level_index(true, spectators.with(k, NuclearState::Down));
        self.transition_between(lower, upper).expect("valid levels")
    }

    /// Double-quantum line flipping nucleus `k` (⇓ → ⇑).
    pub fn double_quantum(&self, k: usize, spectators: NuclearConfig) -> usize {
        let lower = self.level_index(false, spectators.with(k, NuclearState::Down));
        let upper = self.level_index(true, spectators.with(k, NuclearState::Up));
        self.transition_between(lower, upper).expect("valid levels")
    }

    /// Lower- and higher-frequency allowed lines of a single-nucleus system.
    pub fn allowed_low_high(&self) -> (usize, usize) {
        let up = self.allowed(NuclearConfig::ALL_UP);
        let down = self.allowed(NuclearConfig(1));
        if self.transitions[up].frequency <= self.transitions[down].frequency {
            (up, down)
        } else {
            (down, up)
        }
    }

    /// Max-norm of `V·diag(E)·Vᵀ − H` relative to the max-norm of `H`.
    pub fn reconstruction_error(&self) -> f64 {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(self.energies.clone()));
        let r = &self.eigenvectors * d * self.eigenvectors.transpose() - &self.hamiltonian;
        r.amax() / self.hamiltonian.amax()
    }

    /// Exact cross-relaxation rates for nucleus `k` with every other nucleus ⇑.
    pub fn cross_relaxation_exact(&self, k: usize) -> CrossRelaxation {
        let spect = NuclearConfig::ALL_UP;
        let up = spect.with(k, NuclearState::Up);
        let down = spect.with(k, NuclearState::Down);
        let gamma_r_d = self.transitions[self.allowed(up)].rate;
        let gamma_r_z = self.transitions[self.allowed(down)].rate;
        let gamma_x_d = self.transitions[self.double_quantum(k, spect)].rate;
        let gamma_x_z = self.transitions[self.zero_quantum(k, spect)].rate;
        let eta = |gr: f64, gx: f64| if gx == 0.0 { 0.0 } else { gx / (gr + gx) };
        CrossRelaxation {
            gamma_r_d,
            gamma_r_z,
            gamma_x_d,
            gamma_x_z,
            eta_d: eta(gamma_r_d, gamma_x_d),
            eta_z: eta(gamma_r_z, gamma_x_z),
        }
    }
}
