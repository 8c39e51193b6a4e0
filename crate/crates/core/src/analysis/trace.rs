//! Classification of quantum-jump traces and cross-relaxation estimates.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifyOptions {
    /// A gap in the sorted centres is a boundary when its local spread
    /// exceeds `k` times the median local spread.
    pub k: f64,
    /// Number of sorted neighbours over which the local spread is taken.
    pub window: usize,
    /// Clusters smaller than this fraction of the spectra are absorbed.
    pub min_fraction: f64,
    /// Adjacent clusters whose medians are closer than this many noise σ
    /// are merged; σ is the pooled within-cluster MAD scaled to a Gaussian.
    pub min_separation: f64,
    /// Required number of states; fewer clusters is `Unresolved`.
    pub n_states: Option<usize>,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        Self {
            k: 5.0,
            window: 6,
            min_fraction: 0.03,
            min_separation: 4.0,
            n_states: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    /// Index of the first spectrum in the new state.
    pub index: usize,
    pub from: usize,
    pub to: usize,
    /// Centre difference across the jump (Hz).
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceClassification {
    /// Hz
    pub centers: Vec<f64>,
    /// Strictly increasing (Hz); state `s` lies between thresholds s−1 and s.
    pub thresholds: Vec<f64>,
    /// State of each spectrum, 0 = lowest frequency.
    pub states: Vec<usize>,
    /// δ̃(t) − δ̃(t−Δt), one shorter than `centers`.
    pub deltas: Vec<f64>,
    pub jumps: Vec<Jump>,
    /// Mean centre of each state (Hz).
    pub state_means: Vec<f64>,
    pub dwell_fraction: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpSize {
    pub from: usize,
    pub to: usize,
    /// Gaussian maximum-likelihood mean of Δδ̃ over these jumps (Hz).
    pub mean: f64,
    /// Hz
    pub std: f64,
    pub count: usize,
}

impl TraceClassification {
    pub fn n_states(&self) -> usize {
        self.state_means.len()
    }

    /// Jump statistics grouped by (from, to).
    pub fn jump_sizes(&self) -> Vec<JumpSize> {
        let n = self.n_states();
        let mut out = Vec::new();
        for from in 0..n {
            for to in 0..n {
                let d: Vec<f64> = self
                    .jumps
                    .iter()
                    .filter(|j| j.from == from && j.to == to)
                    .map(|j| j.delta)
                    .collect();
                if d.is_empty() {
                    continue;
                }
                let mean = d.iter().sum::<f64>() / d.len() as f64;
                let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
                out.push(JumpSize {
                    from,
                    to,
                    mean,
                    std: var.sqrt(),
                    count: d.len(),
                });
            }
        }
        out
    }

    /// |Δδ̃| averaged over all jumps between adjacent states (Hz).
    pub fn adjacent_jump_size(&self) -> Option<(f64, f64, usize)> {
        let d: Vec<f64> = self
            .jumps
            .iter()
            .filter(|j| j.from.abs_diff(j.to) == 1)
            .map(|j| j.delta.abs())
            .collect();
        if d.is_empty() {
            return None;
        }
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
        Some((mean, (var / d.len() as f64).sqrt(), d.len()))
    }

    /// For four states from two nuclei: (A₁, A₂) from the state means,
    /// with A₁ the larger splitting.
    pub fn two_nucleus_couplings(&self) -> Option<(f64, f64)> {
        if self.n_states() != 4 {
            return None;
        }
        let m = &self.state_means;
        let a1 = 0.5 * ((m[2] + m[3]) - (m[0] + m[1]));
        let a2 = 0.5 * ((m[1] - m[0]) + (m[3] - m[2]));
        Some((a1.max(a2), a1.min(a2)))
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Assign each spectrum to a cluster of resonance centres.
pub fn classify_trace(centers: &[f64], opts: &ClassifyOptions) -> Result<TraceClassification> {
    let n = centers.len();
    if n < 20 {
        return Err(Error::InvalidParameter(format!("{n} spectra; at least 20 are needed")));
    }
    if centers.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidParameter("non-finite resonance centre".into()));
    }
    let mut sorted = centers.to_vec();
    sorted.sort_by(f64::total_cmp);
    let gaps: Vec<f64> = sorted.windows(2).map(|w| w[1] - w[0]).collect();

    // Local spread across gap i, over `window` neighbours centred on it.
    let h = opts.window.max(2) / 2;
    let spread: Vec<f64> = (0..gaps.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(h);
            let hi = (i + h).min(n - 1);
            sorted[hi] - sorted[lo]
        })
        .collect();
    let med = median(&mut spread.clone());

    // Runs of flagged gaps; boundary at the widest single gap of each run.
    let mut cuts: Vec<usize> = Vec::new();
    if med > 0.0 {
        let mut i = 0;
        while i < gaps.len() {
            if spread[i] > opts.k * med {
                let start = i;
                while i < gaps.len() && spread[i] > opts.k * med {
                    i += 1;
                }
                let best = (start..i).max_by(|&a, &b| gaps[a].total_cmp(&gaps[b])).expect("non-empty run");
                cuts.push(best);
            } else {
                i += 1;
            }
        }
    } else if gaps.iter().any(|&g| g > 0.0) {
        // Degenerate median: any nonzero gap separates exact repeats.
        cuts = (0..gaps.len()).filter(|&i| gaps[i] > 0.0).collect();
    }

    // Absorb small clusters by dropping their narrower boundary.
    let min_size = ((opts.min_fraction * n as f64).ceil() as usize).max(2);
    loop {
        let mut bounds = vec![0usize];
        bounds.extend(cuts.iter().map(|&c| c + 1));
        bounds.push(n);
        let small = (0..bounds.len() - 1)
            .filter(|&k| bounds[k + 1] - bounds[k] < min_size)
            .min_by_key(|&k| bounds[k + 1] - bounds[k]);
        let Some(k) = small else { break };
        if cuts.is_empty() {
            break;
        }
        // cluster k is bounded by cuts[k-1] (left) and cuts[k] (right)
        let drop = if k == 0 {
            0
        } else if k == cuts.len() {
            k - 1
        } else if gaps[cuts[k - 1]] <= gaps[cuts[k]] {
            k - 1
        } else {
            k
        };
        cuts.remove(drop);
    }

    // Pooled within-cluster MAD; depends only on the multiset of centres.
    let sigma = {
        let mut bounds = vec![0usize];
        bounds.extend(cuts.iter().map(|&c| c + 1));
        bounds.push(n);
        let mut dev: Vec<f64> = bounds
            .windows(2)
            .flat_map(|b| {
                let m = median(&mut sorted[b[0]..b[1]].to_vec());
                sorted[b[0]..b[1]].iter().map(move |x| (x - m).abs())
            })
            .collect();
        median(&mut dev) / 0.674_489_75
    };
    if sigma > 0.0 && opts.min_separation > 0.0 {
        loop {
            let mut bounds = vec![0usize];
            bounds.extend(cuts.iter().map(|&c| c + 1));
            bounds.push(n);
            let medians: Vec<f64> = bounds.windows(2).map(|b| median(&mut sorted[b[0]..b[1]].to_vec())).collect();
            let closest = (0..cuts.len()).min_by(|&a, &b| {
                (medians[a + 1] - medians[a]).total_cmp(&(medians[b + 1] - medians[b]))
            });
            match closest {
                Some(k) if medians[k + 1] - medians[k] < opts.min_separation * sigma => {
                    cuts.remove(k);
                }
                _ => break,
            }
        }
    }

    if let Some(want) = opts.n_states {
        let found = cuts.len() + 1;
        if found < want {
            return Err(Error::Unresolved { found, requested: want });
        }
        while cuts.len() + 1 > want {
            let k = (0..cuts.len())
                .min_by(|&a, &b| gaps[cuts[a]].total_cmp(&gaps[cuts[b]]))
                .expect("non-empty");
            cuts.remove(k);
        }
    }

    let thresholds: Vec<f64> = cuts.iter().map(|&c| 0.5 * (sorted[c] + sorted[c + 1])).collect();
    let states: Vec<usize> = centers
        .iter()
        .map(|&c| thresholds.iter().filter(|&&t| c > t).count())
        .collect();
    let n_states = thresholds.len() + 1;
    let mut sums = vec![0.0; n_states];
    let mut counts = vec![0usize; n_states];
    for (&c, &s) in centers.iter().zip(&states) {
        sums[s] += c;
        counts[s] += 1;
    }
    let deltas: Vec<f64> = centers.windows(2).map(|w| w[1] - w[0]).collect();
    let state_means = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let dwell_fraction = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let jumps = (1..n)
        .filter(|&i| states[i] != states[i - 1])
        .map(|i| Jump {
            index: i,
            from: states[i - 1],
            to: states[i],
            delta: deltas[i - 1],
        })
        .collect();

    Ok(TraceClassification {
        centers: centers.to_vec(),
        thresholds,
        states,
        deltas,
        jumps,
        state_means,
        dwell_fraction,
    })
}

/// One-direction cross-relaxation estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EtaEstimate {
    /// Wald estimate with 1σ half-width.
    Estimate { eta: f64, sigma: f64, jumps: usize, excitations: f64 },
    /// No jumps: one-sided 1σ (68.27 %) upper bound.
    UpperBound { bound: f64, excitations: f64 },
    /// No excitations were spent in the source state.
    Undefined,
}

impl EtaEstimate {
    pub fn value(&self) -> Option<f64> {
        match *self {
            EtaEstimate::Estimate { eta, .. } => Some(eta),
            _ => None,
        }
    }
}

/// Wald estimate of a per-excitation flip probability.
pub fn wald(jumps: usize, excitations: f64) -> EtaEstimate {
    if !(excitations > 0.0) {
        return EtaEstimate::Undefined;
    }
    if jumps == 0 {
        // (1 − η)^N = 1 − 0.6827
        let bound = -(1.0 - statrs::function::erf::erf(std::f64::consts::FRAC_1_SQRT_2)).ln() / excitations;
        return EtaEstimate::UpperBound { bound, excitations };
    }
    let p = jumps as f64 / excitations;
    EtaEstimate::Estimate {
        eta: p,
        sigma: (p * (1.0 - p) / excitations).sqrt(),
        jumps,
        excitations,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaPair {
    /// ⇑ → ⇓ flips per excitation while in ⇑.
    pub eta_d: EtaEstimate,
    /// ⇓ → ⇑ flips per excitation while in ⇓.
    pub eta_z: EtaEstimate,
}

/// Cross-relaxation probabilities of a two-state trace.
///
/// `excitations[i]` is the number of electron excitations spent during
/// spectrum i. The lower-frequency state is ⇓ when `a_positive`.
pub fn estimate_eta(c: &TraceClassification, excitations: &[f64], a_positive: bool) -> Result<EtaPair> {
    if c.n_states() != 2 {
        return Err(Error::InvalidParameter(format!(
            "cross-relaxation needs two states, trace has {}",
            c.n_states()
        )));
    }
    if excitations.len() != c.states.len() {
        return Err(Error::InvalidParameter("one excitation count per spectrum is needed".into()));
    }
    let down = if a_positive { 0 } else { 1 };
    let up = 1 - down;
    let mut n_exc = [0.0; 2];
    let mut n_jump = [0usize; 2];
    for i in 0..c.states.len() - 1 {
        let s = c.states[i];
        n_exc[s] += excitations[i];
        if c.states[i + 1] != s {
            n_jump[s] += 1;
        }
    }
    Ok(EtaPair {
        eta_d: wald(n_jump[up], n_exc[up]),
        eta_z: wald(n_jump[down], n_exc[down]),
    })
}

/// Cross-relaxation probabilities corrected for flips that undo each other
/// within one spectrum.
///
/// Consecutive spectra are treated as steps of a two-state Markov chain,
/// each spending the mean number of excitations per spectrum N̄, so that
/// P(change | s) = η_s/(η_d + η_z)·(1 − e^{−(η_d+η_z)N̄}). The uncertainty
/// propagates the binomial errors of the two observed change fractions.
pub fn estimate_eta_resolved(c: &TraceClassification, excitations: &[f64], a_positive: bool) -> Result<EtaPair> {
    let raw = estimate_eta(c, excitations, a_positive)?;
    let down = if a_positive { 0 } else { 1 };
    let up = 1 - down;
    let steps = c.states.len() - 1;
    let mut n_from = [0usize; 2];
    let mut n_jump = [0usize; 2];
    let mut n_exc = [0.0; 2];
    for i in 0..steps {
        let s = c.states[i];
        n_from[s] += 1;
        n_exc[s] += excitations[i];
        if c.states[i + 1] != s {
            n_jump[s] += 1;
        }
    }
    let n_bar = (n_exc[0] + n_exc[1]) / steps as f64;
    if n_jump[0] == 0 || n_jump[1] == 0 || !(n_bar > 0.0) {
        return Ok(raw);
    }
    let p = [n_jump[0] as f64 / n_from[0] as f64, n_jump[1] as f64 / n_from[1] as f64];
    let q = p[0] + p[1];
    if q >= 1.0 {
        return Err(Error::InvalidParameter(
            "state changes too frequent for the spectrum rate; jumps are unresolved".into(),
        ));
    }
    let l = -(1.0 - q).ln();
    let var = [p[0] * (1.0 - p[0]) / n_from[0] as f64, p[1] * (1.0 - p[1]) / n_from[1] as f64];
    let est = |s: usize| {
        let o = 1 - s;
        let eta = p[s] * l / (q * n_bar);
        let d_own = (l / q + p[s] / (q * (1.0 - q)) - p[s] * l / (q * q)) / n_bar;
        let d_other = (p[s] / (q * (1.0 - q)) - p[s] * l / (q * q)) / n_bar;
        EtaEstimate::Estimate {
            eta,
            sigma: (d_own * d_own * var[s] + d_other * d_other * var[o]).sqrt(),
            jumps: n_jump[s],
            excitations: n_exc[s],
        }
    };
    Ok(EtaPair {
        eta_d: est(up),
        eta_z: est(down),
    })
}
