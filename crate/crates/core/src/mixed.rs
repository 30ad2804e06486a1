//! Random-intercept linear mixed model fitted by profiled REML (or ML).
//!
//! For a fixed variance ratio `λ = σ_g² / σ_e²` the marginal covariance is
//! block diagonal with blocks `σ_e² (I + λ J)`, whose inverse is
//! `I - c J` with `c = λ / (1 + λ n_g)`. Fixed effects then follow from one
//! small generalized least squares solve, `σ_e²` is profiled out in closed
//! form, and only `log λ` is searched numerically.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::metrics::{EffectEstimate, MethodId};
use crate::propensity::CovSet;
use crate::regress::spd_inverse;
use crate::trialdata::{SubjectRecord, TrialDataset};

const LOG_LAMBDA_MIN: f64 = -12.0;
const LOG_LAMBDA_MAX: f64 = 12.0;
const SCAN_POINTS: usize = 49;
const GOLDEN_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Criterion {
    #[default]
    Reml,
    Ml,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmmFit {
    /// Treatment coefficient.
    pub theta: f64,
    pub se_theta: f64,
    /// All fixed effects: intercept, treatment, covariates.
    pub beta: Vec<f64>,
    pub sigma_e2: f64,
    pub sigma_g2: f64,
    /// Log-likelihood (REML or ML) without additive constants.
    pub loglik: f64,
    pub lambda: f64,
    pub converged: bool,
}

/// Per-group sufficient statistics.
struct Group {
    n: f64,
    /// Column sums of the design rows.
    s: DVector<f64>,
    /// Sum of outcomes.
    sy: f64,
}

struct Problem {
    n: usize,
    p: usize,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    groups: Vec<Group>,
    labels: Vec<String>,
    criterion: Criterion,
}

struct Evaluation {
    deviance: f64,
    /// Derivative of the deviance with respect to `λ`.
    slope: f64,
    beta: DVector<f64>,
    sigma2: f64,
    h: DMatrix<f64>,
}

impl Problem {
    fn evaluate(&self, lambda: f64) -> Result<Evaluation> {
        let mut h = self.xtx.clone();
        let mut b = self.xty.clone();
        let mut ln_det_v = 0.0;
        for g in &self.groups {
            let c = lambda / (1.0 + lambda * g.n);
            h -= &g.s * g.s.transpose() * c;
            b -= &g.s * (c * g.sy);
            ln_det_v += (lambda * g.n).ln_1p();
        }
        let chol = Cholesky::new(h.clone()).ok_or_else(|| Error::SingularDesign {
            column: "fixed-effects design".to_string(),
        })?;
        let beta = chol.solve(&b);
        let mut q = self.yty - 2.0 * beta.dot(&self.xty) + (&self.xtx * &beta).dot(&beta);
        for g in &self.groups {
            let c = lambda / (1.0 + lambda * g.n);
            let rsum = g.sy - g.s.dot(&beta);
            q -= c * rsum * rsum;
        }
        let q = q.max(0.0);
        let (n, p) = (self.n as f64, self.p as f64);
        let ln_det_h: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let mut quad = 0.0;
        let mut tr_v = 0.0;
        let mut tr_h = 0.0;
        for g in &self.groups {
            let d = 1.0 / (1.0 + lambda * g.n);
            let rsum = (g.sy - g.s.dot(&beta)) * d;
            quad += rsum * rsum;
            tr_v += g.n * d;
            if self.criterion == Criterion::Reml {
                tr_h += chol.solve(&g.s).dot(&g.s) * d * d;
            }
        }
        let (sigma2, deviance, slope) = match self.criterion {
            Criterion::Reml => {
                let s2 = q / (n - p);
                (s2, (n - p) * s2.ln() + ln_det_v + ln_det_h, tr_v - tr_h - quad / s2)
            }
            Criterion::Ml => {
                let s2 = q / n;
                (s2, n * s2.ln() + ln_det_v, tr_v - quad / s2)
            }
        };
        Ok(Evaluation { deviance, slope, beta, sigma2, h })
    }

    fn deviance_at_log(&self, log_lambda: f64) -> f64 {
        self.evaluate(log_lambda.exp()).map_or(f64::INFINITY, |e| e.deviance)
    }

    fn slope_at_log(&self, log_lambda: f64) -> f64 {
        self.evaluate(log_lambda.exp()).map_or(f64::NAN, |e| e.slope)
    }
}

/// Fits `y = b0 + θ z + X β + γ_g + e` with a random intercept per group.
/// `covariates` are extra fixed-effect columns.
pub fn fit_lmm(
    y: &[f64],
    z: &[f64],
    covariates: &[(String, Vec<f64>)],
    groups: &[usize],
    criterion: Criterion,
) -> Result<LmmFit> {
    let n = y.len();
    if z.len() != n || groups.len() != n || covariates.iter().any(|(_, c)| c.len() != n) {
        return invalid("outcome, treatment, covariate and group lengths differ");
    }
    if y.iter().chain(z).any(|v| !v.is_finite()) {
        return invalid("mixed model inputs must be finite");
    }
    let p = 2 + covariates.len();
    if n <= p {
        return invalid(format!("{n} observations for {p} fixed effects"));
    }
    let y_center = y.iter().sum::<f64>() / n as f64;
    let y: Vec<f64> = y.iter().map(|v| v - y_center).collect();
    let row = |i: usize| -> DVector<f64> {
        let mut r = DVector::zeros(p);
        r[0] = 1.0;
        r[1] = z[i];
        for (j, (_, c)) in covariates.iter().enumerate() {
            r[2 + j] = c[i];
        }
        r
    };
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    let mut yty = 0.0;
    let mut by_group: BTreeMap<usize, Group> = BTreeMap::new();
    for i in 0..n {
        let x = row(i);
        xtx += &x * x.transpose();
        xty += &x * y[i];
        yty += y[i] * y[i];
        let g = by_group.entry(groups[i]).or_insert_with(|| Group { n: 0.0, s: DVector::zeros(p), sy: 0.0 });
        g.n += 1.0;
        g.s += &x;
        g.sy += y[i];
    }
    if by_group.len() < 2 {
        return invalid(format!("mixed model needs at least 2 groups, got {}", by_group.len()));
    }
    let labels: Vec<String> = ["(Intercept)".to_string(), "z".to_string()]
        .into_iter()
        .chain(covariates.iter().map(|(l, _)| l.clone()))
        .collect();
    // Rank check with a named column.
    spd_inverse(&xtx, &labels)?;

    let problem = Problem {
        n,
        p,
        xtx,
        xty,
        yty,
        groups: by_group.into_values().collect(),
        labels,
        criterion,
    };
    let (lambda, converged) = optimize_lambda(&problem)?;
    let eval = problem.evaluate(lambda)?;
    let cov = spd_inverse(&eval.h, &problem.labels)? * eval.sigma2;
    let se_theta = cov[(1, 1)].sqrt();
    Ok(LmmFit {
        theta: eval.beta[1],
        se_theta,
        beta: eval.beta.iter().enumerate().map(|(j, b)| if j == 0 { b + y_center } else { *b }).collect(),
        sigma_e2: eval.sigma2,
        sigma_g2: lambda * eval.sigma2,
        loglik: -0.5 * eval.deviance,
        lambda,
        converged,
    })
}

/// Coarse scan of `log λ`, golden-section refinement around the best scan
/// point, then comparison with the `λ = 0` boundary.
fn optimize_lambda(problem: &Problem) -> Result<(f64, bool)> {
    let step = (LOG_LAMBDA_MAX - LOG_LAMBDA_MIN) / (SCAN_POINTS - 1) as f64;
    let scan: Vec<(f64, f64)> = (0..SCAN_POINTS)
        .map(|i| {
            let l = LOG_LAMBDA_MIN + step * i as f64;
            (l, problem.deviance_at_log(l))
        })
        .collect();
    let (best_i, _) = scan
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .expect("scan is non-empty");
    if !scan[best_i].1.is_finite() {
        return Err(Error::Convergence("REML criterion is not finite on the search range".to_string()));
    }
    let mut a = scan[best_i.saturating_sub(1)].0;
    let mut b = scan[(best_i + 1).min(SCAN_POINTS - 1)].0;
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let (mut f1, mut f2) = (problem.deviance_at_log(x1), problem.deviance_at_log(x2));
    let mut iterations = 0;
    while b - a > GOLDEN_TOL && iterations < 200 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = problem.deviance_at_log(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = problem.deviance_at_log(x2);
        }
        iterations += 1;
    }
    let converged = b - a <= GOLDEN_TOL;
    let mut log_best = polish(problem, a - step, b + step).unwrap_or(0.5 * (a + b));
    let mut f_best = problem.deviance_at_log(log_best);
    if scan[best_i].1 < f_best {
        log_best = scan[best_i].0;
        f_best = scan[best_i].1;
    }
    let f_zero = problem.evaluate(0.0)?.deviance;
    if f_zero <= f_best {
        return Ok((0.0, converged));
    }
    Ok((log_best.exp(), converged))
}

/// Bisection on the sign of the deviance slope inside `[lo, hi]`, resolving
/// the stationary point well below the golden-section tolerance.
fn polish(problem: &Problem, lo: f64, hi: f64) -> Option<f64> {
    let (mut lo, mut hi) = (lo.max(LOG_LAMBDA_MIN), hi.min(LOG_LAMBDA_MAX));
    let (s_lo, s_hi) = (problem.slope_at_log(lo), problem.slope_at_log(hi));
    if !(s_lo < 0.0 && s_hi > 0.0) {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let s = problem.slope_at_log(mid);
        if s.is_nan() {
            return None;
        }
        if s < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Mixed-model effect over the reduced concurrent trial and all historical
/// controls, with one random intercept per trial. `covset = None` fits the
/// model without covariates.
pub fn estimate_mm(
    dataset: &TrialDataset,
    covset: Option<CovSet>,
    criterion: Criterion,
    alpha: f64,
) -> Result<EffectEstimate> {
    let rows: Vec<&SubjectRecord> = dataset
        .reduced_concurrent
        .iter()
        .chain(dataset.historical_subjects())
        .collect();
    let y: Vec<f64> = rows.iter().map(|s| s.y).collect();
    let z: Vec<f64> = rows.iter().map(|s| if s.treated { 1.0 } else { 0.0 }).collect();
    let groups: Vec<usize> = rows.iter().map(|s| s.trial).collect();
    let covariates: Vec<(String, Vec<f64>)> = covset
        .map(|cs| {
            cs.columns()
                .iter()
                .map(|&c| (format!("x{}", c + 1), rows.iter().map(|s| s.x[c]).collect()))
                .collect()
        })
        .unwrap_or_default();
    let fit = fit_lmm(&y, &z, &covariates, &groups, criterion)?;
    let method = if covset.is_some() { MethodId::Mm } else { MethodId::MmNc };
    let mut est = EffectEstimate::wald(method, fit.theta, fit.se_theta, alpha)?.with_covset(covset);
    if !fit.converged {
        est.flag("variance ratio search did not converge");
    }
    if fit.lambda == 0.0 {
        est.flag("random-intercept variance at boundary 0");
    }
    Ok(est)
}
