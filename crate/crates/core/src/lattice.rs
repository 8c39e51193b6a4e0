//! Point-dipole hyperfine couplings between an anisotropic electron spin and
//! the nuclear spins of a host crystal, and assignment of measured couplings
//! to lattice sites.
//!
//! All quantities in this module are cyclic (Hz, Hz/T) because they are
//! compared directly against tabulated values.
//!
//! # Structure files
//!
//! Whitespace-separated keyword lines; `#` starts a comment.
//!
//! ```text
//! a <x> <y> <z>            lattice vector a (Å)
//! b <x> <y> <z>
//! c <x> <y> <z>
//! defect <fa> <fb> <fc>    electron position, fractional
//! gamma_e <ga> <gb> <gc>   electron gyromagnetic tensor, diagonal in crystal axes (Hz/T)
//! gamma_n <g>              nuclear gyromagnetic ratio (Hz/T)
//! site <label> <fa> <fb> <fc>
//! ```
//!
//! Crystal axes are the normalized lattice vectors a, b, c. The field
//! direction for angles (θ, β) is `(cos β sin θ, sin β, cos β cos θ)`:
//! β tilts out of the (a, c) plane first, θ then tilts toward +a.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const MU0_OVER_4PI: f64 = 1e-7;
const PLANCK: f64 = 6.626_070_15e-34;
const MIN_DISTANCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub label: String,
    pub frac: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrystalModel {
    /// Rows are the lattice vectors a, b, c (Å).
    pub lattice: Matrix3<f64>,
    pub defect: [f64; 3],
    pub sites: Vec<Site>,
    /// Electron gyromagnetic tensor in the Cartesian frame (Hz/T).
    pub gamma_e: Matrix3<f64>,
    /// Nuclear gyromagnetic ratio (Hz/T).
    pub gamma_n: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldOrientation {
    pub theta_deg: f64,
    pub beta_deg: f64,
    /// Field magnitude (T). Secular couplings do not depend on it.
    pub b0: f64,
}

impl FieldOrientation {
    pub fn new(theta_deg: f64, beta_deg: f64) -> Self {
        Self {
            theta_deg,
            beta_deg,
            b0: 0.0,
        }
    }

    pub fn direction(&self) -> Vector3<f64> {
        let (t, b) = (self.theta_deg.to_radians(), self.beta_deg.to_radians());
        Vector3::new(b.cos() * t.sin(), b.sin(), b.cos() * t.cos())
    }

    pub fn in_small_angle_regime(&self) -> bool {
        self.theta_deg.abs() < 5.0 && self.beta_deg.abs() < 5.0
    }
}

impl CrystalModel {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The scheelite model shipped with the crate.
    pub fn cawo4() -> Self {
        Self::parse(include_str!("../data/cawo4.struct")).expect("shipped structure parses")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rows: [Option<Vector3<f64>>; 3] = [None; 3];
        let mut defect = None;
        let mut gamma_e = None;
        let mut gamma_n = None;
        let mut sites = Vec::new();

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut words = content.split_whitespace();
            let key = words.next().unwrap_or_default();
            let rest: Vec<&str> = words.collect();
            let err = |message: String| Error::Structure { line, message };
            let nums = |from: usize, n: usize| -> Result<Vec<f64>> {
                if rest.len() != from + n {
                    return Err(err(format!(
                        "`{key}` expects {} values, found {}",
                        from + n,
                        rest.len()
                    )));
                }
                rest[from..]
                    .iter()
                    .map(|w| {
                        w.parse::<f64>()
                            .ok()
                            .filter(|x| x.is_finite())
                            .ok_or_else(|| err(format!("`{w}` is not a finite number")))
                    })
                    .collect()
            };
            match key {
                "a" | "b" | "c" => {
                    let v = nums(0, 3)?;
                    let idx = (key.as_bytes()[0] - b'a') as usize;
                    rows[idx] = Some(Vector3::new(v[0], v[1], v[2]));
                }
                "defect" => {
                    let v = nums(0, 3)?;
                    defect = Some([v[0], v[1], v[2]]);
                }
                "gamma_e" => {
                    let v = nums(0, 3)?;
                    gamma_e = Some(Vector3::new(v[0], v[1], v[2]));
                }
                "gamma_n" => gamma_n = Some(nums(0, 1)?[0]),
                "site" => {
                    let label = rest
                        .first()
                        .ok_or_else(|| err("`site` needs a label".into()))?
                        .to_string();
                    let v = nums(1, 3)?;
                    sites.push(Site {
                        label,
                        frac: [v[0], v[1], v[2]],
                    });
                }
                other => return Err(err(format!("unknown keyword `{other}`"))),
            }
        }

        let end = text.lines().count();
        let missing = |what: &str| Error::Structure {
            line: end,
            message: format!("missing `{what}`"),
        };
        let lattice = Matrix3::from_rows(&[
            rows[0].ok_or_else(|| missing("a"))?.transpose(),
            rows[1].ok_or_else(|| missing("b"))?.transpose(),
            rows[2].ok_or_else(|| missing("c"))?.transpose(),
        ]);
        let ge = gamma_e.ok_or_else(|| missing("gamma_e"))?;
        let model = Self::new(
            lattice,
            defect.ok_or_else(|| missing("defect"))?,
            sites,
            ge,
            gamma_n.ok_or_else(|| missing("gamma_n"))?,
        )
        .map_err(|e| Error::Structure {
            line: end,
            message: e.to_string(),
        })?;
        Ok(model)
    }

    /// `gamma_e_crystal` is the tensor diagonal along the normalized lattice
    /// vectors.
    pub fn new(
        lattice: Matrix3<f64>,
        defect: [f64; 3],
        sites: Vec<Site>,
        gamma_e_crystal: Vector3<f64>,
        gamma_n: f64,
    ) -> Result<Self> {
        let det = lattice.determinant();
        let scale = lattice.row(0).norm() * lattice.row(1).norm() * lattice.row(2).norm();
        if !(det.abs() > 1e-9 * scale) {
            return Err(Error::InvalidParameter(
                "lattice vectors are linearly dependent".into(),
            ));
        }
        if sites.is_empty() {
            return Err(Error::InvalidParameter("structure has no nuclear sites".into()));
        }
        let mut axes = Matrix3::zeros();
        for k in 0..3 {
            axes.set_column(k, &lattice.row(k).transpose().normalize());
        }
        let gamma_e = axes * Matrix3::from_diagonal(&gamma_e_crystal) * axes.transpose();
        Ok(Self {
            lattice,
            defect,
            sites,
            gamma_e,
            gamma_n,
        })
    }

    /// Cartesian vector from the defect to `site` (Å).
    pub fn site_vector(&self, site: usize) -> Vector3<f64> {
        let s = &self.sites[site];
        let d = Vector3::new(
            s.frac[0] - self.defect[0],
            s.frac[1] - self.defect[1],
            s.frac[2] - self.defect[2],
        );
        self.lattice.transpose() * d
    }

    /// Same model with every Cartesian quantity rotated by `r`.
    pub fn rotated(&self, r: &Matrix3<f64>) -> Self {
        Self {
            lattice: self.lattice * r.transpose(),
            defect: self.defect,
            sites: self.sites.clone(),
            gamma_e: r * self.gamma_e * r.transpose(),
            gamma_n: self.gamma_n,
        }
    }
}

/// Secular couplings (A, B) in Hz for a nucleus at `site_vector` (Å) and a
/// field along the unit vector `n`.
pub fn dipolar_coupling_along(
    site_vector: &Vector3<f64>,
    model: &CrystalModel,
    n: &Vector3<f64>,
) -> Result<(f64, f64)> {
    let r = site_vector.norm();
    if !(r > MIN_DISTANCE) {
        return Err(Error::SiteTooClose(r));
    }
    let gn = model.gamma_e * n;
    // Electron quantization axis follows the effective field γ·B0.
    let h = gn.normalize();
    let m_e = model.gamma_e * h;
    let rhat = site_vector / r;
    let r_m = r * 1e-10;
    let k = MU0_OVER_4PI * PLANCK * model.gamma_n / (r_m * r_m * r_m);
    let v = (m_e - 3.0 * m_e.dot(&rhat) * rhat) * k;
    let a = v.dot(n);
    let b = (v - a * n).norm();
    Ok((a, b))
}

/// Secular couplings (A, B) in Hz for a nucleus at `site_vector` (Å).
pub fn dipolar_coupling(
    site_vector: &Vector3<f64>,
    model: &CrystalModel,
    field: &FieldOrientation,
) -> Result<(f64, f64)> {
    dipolar_coupling_along(site_vector, model, &field.direction())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteCurve {
    pub site: usize,
    pub label: String,
    /// Hz
    pub a: Vec<f64>,
    /// Hz
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub beta_deg: f64,
    pub theta_deg: Vec<f64>,
    /// Angles inside this interval count as in range for site assignment.
    pub nominal: (f64, f64),
    pub sites: Vec<SiteCurve>,
}

impl SweepTable {
    pub fn with_nominal(mut self, lo: f64, hi: f64) -> Self {
        self.nominal = (lo.min(hi), lo.max(hi));
        self
    }
}

/// Couplings of every site over `n_points` equally spaced θ in
/// `theta_range` (degrees). A single point evaluates at the range start.
pub fn angle_sweep(
    model: &CrystalModel,
    beta_deg: f64,
    theta_range: (f64, f64),
    n_points: usize,
) -> Result<SweepTable> {
    if n_points == 0 {
        return Err(Error::InvalidParameter("sweep needs at least one point".into()));
    }
    let (lo, hi) = theta_range;
    let thetas: Vec<f64> = if n_points == 1 {
        vec![lo]
    } else {
        (0..n_points)
            .map(|i| lo + (hi - lo) * i as f64 / (n_points - 1) as f64)
            .collect()
    };
    let sites = (0..model.sites.len())
        .into_par_iter()
        .map(|s| {
            let r = model.site_vector(s);
            let mut a = Vec::with_capacity(thetas.len());
            let mut b = Vec::with_capacity(thetas.len());
            for &t in &thetas {
                let (ai, bi) = dipolar_coupling(&r, model, &FieldOrientation::new(t, beta_deg))?;
                a.push(ai);
                b.push(bi);
            }
            Ok(SiteCurve {
                site: s,
                label: model.sites[s].label.clone(),
                a,
                b,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        beta_deg,
        theta_deg: thetas,
        nominal: (lo.min(hi), lo.max(hi)),
        sites,
    })
}

/// Measured couplings with one-sigma uncertainties (Hz). A is compared by
/// magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasuredCoupling {
    pub a: f64,
    pub sigma_a: f64,
    pub b: f64,
    pub sigma_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub site: usize,
    pub label: String,
    pub theta_deg: f64,
    /// Hz
    pub a: f64,
    /// Hz
    pub b: f64,
    pub distance: f64,
    /// Best match lies outside the sweep's nominal θ interval.
    pub out_of_range: bool,
}

/// Relative model error added in quadrature to the measurement σ; the
/// point-dipole values neglect contact terms and lattice relaxation.
pub const DEFAULT_MODEL_REL: f64 = 0.15;

pub fn assign_site(measured: &MeasuredCoupling, sweep: &SweepTable, tol: f64) -> Vec<Candidate> {
    assign_site_with(measured, sweep, tol, DEFAULT_MODEL_REL)
}

/// Best θ per site by normalized distance in (|A|, B); sites beyond `tol`
/// are dropped. In-range matches rank ahead of out-of-range ones.
pub fn assign_site_with(
    measured: &MeasuredCoupling,
    sweep: &SweepTable,
    tol: f64,
    model_rel: f64,
) -> Vec<Candidate> {
    let (lo, hi) = sweep.nominal;
    let in_range = |t: f64| t >= lo - 1e-12 && t <= hi + 1e-12;
    let dist = |a: f64, b: f64| {
        let sa = (measured.sigma_a.powi(2) + (model_rel * a.abs()).powi(2)).sqrt();
        let sb = (measured.sigma_b.powi(2) + (model_rel * b).powi(2)).sqrt();
        let da = (a.abs() - measured.a.abs()) / sa.max(f64::MIN_POSITIVE);
        let db = (b - measured.b) / sb.max(f64::MIN_POSITIVE);
        if da == 0.0 && db == 0.0 {
            0.0
        } else {
            (da * da + db * db).sqrt()
        }
    };

    let mut out: Vec<Candidate> = Vec::new();
    for curve in &sweep.sites {
        // Prefer the best in-range point; fall back to the best overall.
        let mut best_in: Option<(usize, f64)> = None;
        let mut best_all: Option<(usize, f64)> = None;
        for (i, &t) in sweep.theta_deg.iter().enumerate() {
            let d = dist(curve.a[i], curve.b[i]);
            if best_all.is_none_or(|(_, bd)| d < bd) {
                best_all = Some((i, d));
            }
            if in_range(t) && best_in.is_none_or(|(_, bd)| d < bd) {
                best_in = Some((i, d));
            }
        }
        let pick = match best_in {
            Some((i, d)) if d <= tol => Some((i, d, false)),
            _ => best_all
                .filter(|&(_, d)| d <= tol)
                .map(|(i, d)| (i, d, !in_range(sweep.theta_deg[i]))),
        };
        if let Some((i, d, oor)) = pick {
            out.push(Candidate {
                site: curve.site,
                label: curve.label.clone(),
                theta_deg: sweep.theta_deg[i],
                a: curve.a[i],
                b: curve.b[i],
                distance: d,
                out_of_range: oor,
            });
        }
    }
    out.sort_by(|x, y| {
        x.out_of_range
            .cmp(&y.out_of_range)
            .then(x.distance.total_cmp(&y.distance))
            .then(x.site.cmp(&y.site))
    });
    out
}
