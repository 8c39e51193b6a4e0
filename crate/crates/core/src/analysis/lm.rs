//! Levenberg–Marquardt with Marquardt's diagonal scaling.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// A least-squares problem `min ½‖r(p)‖²`.
pub trait Problem {
    fn n_params(&self) -> usize;
    fn n_residuals(&self) -> usize;
    fn residuals(&self, p: &DVector<f64>) -> DVector<f64>;

    /// Row i is ∂r_i/∂p. Defaults to central differences.
    fn jacobian(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.n_residuals(), self.n_params());
        for k in 0..self.n_params() {
            let h = 1e-6 * p[k].abs().max(1e-6);
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi[k] += h;
            lo[k] -= h;
            let d = (self.residuals(&hi) - self.residuals(&lo)) / (2.0 * h);
            j.set_column(k, &d);
        }
        j
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Options {
    pub max_iter: usize,
    /// Relative cost reduction below which the fit has converged.
    pub ftol: f64,
    /// Relative step size below which the fit has converged.
    pub xtol: f64,
    /// Scaled gradient below which the fit has converged.
    pub gtol: f64,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            max_iter: 500,
            ftol: 1e-15,
            xtol: 1e-13,
            gtol: 1e-13,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub params: DVector<f64>,
    /// ½‖r‖² at the solution.
    pub cost: f64,
    /// s²·(JᵀJ)⁻¹ with s² = ‖r‖²/(m − n); zero-residual fits get s² = 0.
    pub covariance: DMatrix<f64>,
    pub iterations: usize,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    /// ‖Jᵀr‖∞ at the solution.
    pub gradient_norm: f64,
    pub jacobian: DMatrix<f64>,
}

impl Report {
    pub fn sigma(&self, k: usize) -> f64 {
        self.covariance[(k, k)].max(0.0).sqrt()
    }
}

fn cost_of(r: &DVector<f64>) -> f64 {
    0.5 * r.norm_squared()
}

/// Minimize `problem` from `p0`. Fails if the residuals are not finite at
/// the start or the iteration budget runs out.
pub fn minimize<P: Problem + ?Sized>(problem: &P, p0: DVector<f64>, opts: &Options) -> Result<Report> {
    let n = problem.n_params();
    let m = problem.n_residuals();
    if p0.len() != n {
        return Err(Error::Fit(format!("expected {n} start values, got {}", p0.len())));
    }
    if m < n {
        return Err(Error::Fit(format!("{m} residuals cannot determine {n} parameters")));
    }
    let mut p = p0;
    let mut r = problem.residuals(&p);
    let mut cost = cost_of(&r);
    if !cost.is_finite() {
        return Err(Error::Fit("residuals are not finite at the start point".into()));
    }
    let mut j = problem.jacobian(&p);
    let mut history = vec![cost];
    let mut lambda = 1e-3;
    let mut diag: DVector<f64> = DVector::from_element(n, 0.0);
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..opts.max_iter {
        iterations = it + 1;
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        for k in 0..n {
            diag[k] = diag[k].max(jtj[(k, k)]).max(1e-300);
        }
        let gscale = (j.norm() * r.norm()).max(f64::MIN_POSITIVE);
        if g.amax() <= opts.gtol * gscale || cost == 0.0 {
            converged = true;
            break;
        }

        let mut accepted = false;
        for _ in 0..60 {
            let mut a = jtj.clone();
            for k in 0..n {
                a[(k, k)] += lambda * diag[k];
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let trial = &p + &step;
            let r_new = problem.residuals(&trial);
            let c_new = cost_of(&r_new);
            if c_new.is_finite() && c_new < cost {
                let rel = (cost - c_new) / cost;
                let small_step = step.norm() <= opts.xtol * (p.norm() + opts.xtol);
                p = trial;
                r = r_new;
                cost = c_new;
                history.push(cost);
                j = problem.jacobian(&p);
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel <= opts.ftol || small_step {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
            if step.norm() <= opts.xtol * (p.norm() + opts.xtol) {
                // Step vanished without improvement: at the floor of precision.
                converged = true;
                break;
            }
        }
        if converged {
            break;
        }
        if !accepted {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            what: "Levenberg-Marquardt",
            iterations,
        });
    }

    let jtj = j.transpose() * &j;
    let dof = (m - n) as f64;
    let s2 = if dof > 0.0 { 2.0 * cost / dof } else { 0.0 };
    let inv = jtj
        .clone()
        .pseudo_inverse(1e-14 * jtj.amax().max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Fit(e.to_string()))?;
    let gradient_norm = (j.transpose() * &r).amax();
    Ok(Report {
        params: p,
        cost,
        covariance: inv * s2,
        iterations,
        cost_history: history,
        gradient_norm,
        jacobian: j,
    })
}
