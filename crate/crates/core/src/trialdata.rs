//! Simulated subjects, trial membership, outcomes and replicate datasets.
//!
//! A replicate draws `n_total` virtual subjects with six independent standard
//! normal covariates, assigns each to the concurrent trial or to one of `k`
//! historical trials through a (multinomial) logistic membership model,
//! randomizes the concurrent subjects 1:1 and generates outcomes from a linear
//! model. The reduced concurrent trial keeps every treated subject and a
//! uniformly random half of the concurrent controls.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dist::{expit, mean, sample_sd};
use crate::error::{invalid, Result};

pub const N_COVARIATES: usize = 6;

pub type Covariates = [f64; N_COVARIATES];

/// Trial label of the concurrent trial. Historical trials are `1..=k`.
pub const CONCURRENT: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: usize,
    pub x: Covariates,
    pub treated: bool,
    pub trial: usize,
    pub y: f64,
}

impl SubjectRecord {
    pub fn is_concurrent(&self) -> bool {
        self.trial == CONCURRENT
    }
}

/// Trial-membership model.
#[derive(Debug, Clone, PartialEq)]
pub enum Assignment {
    /// Binary logit: `logit P(concurrent) = beta0 + beta . x`.
    Single { beta0: f64, beta: Covariates },
    /// Multinomial logit with the concurrent trial as reference category;
    /// row `j` holds the linear predictor of historical trial `j + 1`.
    Multi { beta0: Vec<f64>, beta: Vec<Covariates> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenCoefficients {
    pub alpha0: f64,
    pub alpha: Covariates,
    pub theta_treat: f64,
    pub assignment: Assignment,
    /// Residual standard deviation.
    pub sigma_e: f64,
}

pub const PRESET_NAMES: [&str; 4] = [
    "single-moderate",
    "single-severe",
    "multi-moderate",
    "multi-severe",
];

impl GenCoefficients {
    /// Coefficient presets for the four simulation settings. `theta_treat`
    /// holds the alternative-hypothesis effect; null runs override it with 0.
    pub fn preset(name: &str) -> Option<Self> {
        let c = |alpha0: f64, alpha: f64, theta: f64, assignment| GenCoefficients {
            alpha0,
            alpha: [alpha; N_COVARIATES],
            theta_treat: theta,
            assignment,
            sigma_e: 1.0,
        };
        let multi = |b0: [f64; 3], b: [f64; 3]| Assignment::Multi {
            beta0: b0.to_vec(),
            beta: b.iter().map(|&v| [v; N_COVARIATES]).collect(),
        };
        Some(match name {
            "single-moderate" => c(
                1.0,
                0.2,
                0.35,
                Assignment::Single {
                    beta0: -0.78,
                    beta: [0.3; N_COVARIATES],
                },
            ),
            "single-severe" => c(
                1.0,
                0.5,
                0.5,
                Assignment::Single {
                    beta0: -0.9,
                    beta: [0.5; N_COVARIATES],
                },
            ),
            "multi-moderate" => c(1.2, 0.5, 0.5, multi([0.8, -1.0, -0.7], [0.1, 0.0, -0.1])),
            "multi-severe" => c(1.0, 0.5, 0.5, multi([-1.0, -0.1, 0.2], [0.1, 0.4, -0.2])),
            _ => return None,
        })
    }

    /// Nominal total sample size used with each preset family.
    pub fn default_n_total(&self) -> usize {
        if self.k_historical() == 1 {
            1200
        } else {
            1600
        }
    }

    pub fn k_historical(&self) -> usize {
        match &self.assignment {
            Assignment::Single { .. } => 1,
            Assignment::Multi { beta0, .. } => beta0.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.alpha) || !self.alpha0.is_finite() || !self.theta_treat.is_finite() {
            return invalid("outcome coefficients must be finite");
        }
        if !(self.sigma_e >= 0.0 && self.sigma_e.is_finite()) {
            return invalid("sigma_e must be a finite non-negative number");
        }
        match &self.assignment {
            Assignment::Single { beta0, beta } => {
                if !beta0.is_finite() || !finite(beta) {
                    return invalid("membership coefficients must be finite");
                }
            }
            Assignment::Multi { beta0, beta } => {
                if beta0.len() != beta.len() {
                    return invalid(format!(
                        "multinomial membership has {} intercepts but {} slope rows",
                        beta0.len(),
                        beta.len()
                    ));
                }
                if beta0.len() != 3 {
                    return invalid(format!(
                        "unsupported number of historical trials: {} (expected 1 or 3)",
                        beta0.len()
                    ));
                }
                if !finite(beta0) || !beta.iter().all(|r| finite(r)) {
                    return invalid("membership coefficients must be finite");
                }
            }
        }
        Ok(())
    }
}

/// One simulated replicate: the full 1:1 concurrent trial, its 2:1 reduced
/// version and the historical control pools.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    pub full_concurrent: Vec<SubjectRecord>,
    pub reduced_concurrent: Vec<SubjectRecord>,
    pub historical: Vec<Vec<SubjectRecord>>,
}

impl TrialDataset {
    /// Builds a dataset from already-collected subjects (for example a user
    /// supplied CSV). The concurrent trial is used as is for both the full and
    /// the reduced variants; historical subjects must be controls.
    pub fn from_subjects(subjects: Vec<SubjectRecord>) -> Result<Self> {
        let k = subjects.iter().map(|s| s.trial).max().unwrap_or(0);
        let mut historical = vec![Vec::new(); k];
        let mut concurrent = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for s in subjects {
            if !seen.insert(s.id) {
                return invalid(format!("subject id {} appears more than once", s.id));
            }
            if !s.y.is_finite() || s.x.iter().any(|v| !v.is_finite()) {
                return invalid(format!("subject {} has a non-finite value", s.id));
            }
            if s.trial == CONCURRENT {
                concurrent.push(s);
            } else {
                if s.treated {
                    return invalid(format!(
                        "historical subject {} is marked as treated",
                        s.id
                    ));
                }
                historical[s.trial - 1].push(s);
            }
        }
        if historical.iter().any(|h| h.is_empty()) {
            return invalid("historical trial labels must be contiguous 1..=k");
        }
        Ok(TrialDataset {
            full_concurrent: concurrent.clone(),
            reduced_concurrent: concurrent,
            historical,
        })
    }

    pub fn k_historical(&self) -> usize {
        self.historical.len()
    }

    pub fn historical_subjects(&self) -> impl Iterator<Item = &SubjectRecord> {
        self.historical.iter().flatten()
    }
}

pub fn gen_covariates<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<Covariates>> {
    if n == 0 {
        return invalid("at least one subject is required");
    }
    Ok((0..n)
        .map(|_| std::array::from_fn(|_| rng.sample(StandardNormal)))
        .collect())
}

fn linear(b0: f64, b: &Covariates, x: &Covariates) -> f64 {
    b0 + b.iter().zip(x).map(|(b, x)| b * x).sum::<f64>()
}

/// Probability of concurrent membership under the binary logit model.
pub fn concurrent_probability_single(x: &Covariates, beta0: f64, beta: &Covariates) -> f64 {
    expit(linear(beta0, beta, x))
}

/// Trial-membership label per row under the binary logit model: 0 for the
/// concurrent trial, 1 for the historical trial.
pub fn assign_trials_single<R: Rng + ?Sized>(
    x: &[Covariates],
    beta0: f64,
    beta: &Covariates,
    rng: &mut R,
) -> Vec<usize> {
    x.iter()
        .map(|row| {
            let p = concurrent_probability_single(row, beta0, beta);
            if rng.random::<f64>() < p {
                CONCURRENT
            } else {
                1
            }
        })
        .collect()
}

/// Category probabilities `[p_concurrent, p_1, .., p_k]` for one subject.
pub fn membership_probabilities_multi(
    x: &Covariates,
    beta0: &[f64],
    beta: &[Covariates],
) -> Vec<f64> {
    let mut eta: Vec<f64> = std::iter::once(0.0)
        .chain(beta0.iter().zip(beta).map(|(&b0, b)| linear(b0, b, x)))
        .collect();
    let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for e in eta.iter_mut() {
        *e = (*e - max).exp();
        total += *e;
    }
    for e in eta.iter_mut() {
        *e /= total;
    }
    eta
}

pub fn assign_trials_multi<R: Rng + ?Sized>(
    x: &[Covariates],
    beta0: &[f64],
    beta: &[Covariates],
    rng: &mut R,
) -> Vec<usize> {
    x.iter()
        .map(|row| {
            let probs = membership_probabilities_multi(row, beta0, beta);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (j, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return j;
                }
            }
            probs.len() - 1
        })
        .collect()
}

pub fn gen_outcomes<R: Rng + ?Sized>(
    x: &[Covariates],
    treated: &[bool],
    coeffs: &GenCoefficients,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if x.len() != treated.len() {
        return invalid(format!(
            "{} covariate rows but {} treatment flags",
            x.len(),
            treated.len()
        ));
    }
    Ok(x.iter()
        .zip(treated)
        .map(|(row, &z)| {
            let e: f64 = rng.sample(StandardNormal);
            let effect = if z { coeffs.theta_treat } else { 0.0 };
            linear(coeffs.alpha0, &coeffs.alpha, row) + effect + coeffs.sigma_e * e
        })
        .collect())
}

/// Simulates one replicate dataset.
///
/// Concurrent subjects are randomized by exact permutation (an odd count gets
/// one extra treated subject); historical subjects are controls.
pub fn build_replicate<R: Rng + ?Sized>(
    coeffs: &GenCoefficients,
    n_total: usize,
    rng: &mut R,
) -> Result<TrialDataset> {
    coeffs.validate()?;
    let x = gen_covariates(n_total, rng)?;
    let labels = match &coeffs.assignment {
        Assignment::Single { beta0, beta } => assign_trials_single(&x, *beta0, beta, rng),
        Assignment::Multi { beta0, beta } => assign_trials_multi(&x, beta0, beta, rng),
    };

    let mut concurrent: Vec<usize> = (0..n_total).filter(|&i| labels[i] == CONCURRENT).collect();
    concurrent.shuffle(rng);
    let n_treated = concurrent.len().div_ceil(2);
    let mut treated = vec![false; n_total];
    for &i in &concurrent[..n_treated] {
        treated[i] = true;
    }

    let y = gen_outcomes(&x, &treated, coeffs, rng)?;
    let subjects: Vec<SubjectRecord> = (0..n_total)
        .map(|i| SubjectRecord {
            id: i,
            x: x[i],
            treated: treated[i],
            trial: labels[i],
            y: y[i],
        })
        .collect();

    let k = coeffs.k_historical();
    let mut full_concurrent = Vec::new();
    let mut historical = vec![Vec::new(); k];
    for s in subjects {
        if s.trial == CONCURRENT {
            full_concurrent.push(s);
        } else {
            historical[s.trial - 1].push(s);
        }
    }

    let controls: Vec<usize> = (0..full_concurrent.len())
        .filter(|&i| !full_concurrent[i].treated)
        .collect();
    let mut keep = vec![false; full_concurrent.len()];
    for i in index::sample(rng, controls.len(), controls.len() / 2) {
        keep[controls[i]] = true;
    }
    let reduced_concurrent = full_concurrent
        .iter()
        .enumerate()
        .filter(|(i, s)| s.treated || keep[*i])
        .map(|(_, s)| s.clone())
        .collect();

    Ok(TrialDataset {
        full_concurrent,
        reduced_concurrent,
        historical,
    })
}

/// Draws a covariate whose population correlation with `y` is `rho`:
/// `rho * standardize(y) + sqrt(1 - rho^2) * w` with `w` standard normal.
pub fn make_correlated_covariate<R: Rng + ?Sized>(
    y: &[f64],
    rho: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if y.len() < 3 {
        return invalid("need at least three outcomes");
    }
    if !(rho > -1.0 && rho < 1.0) {
        return invalid(format!("rho must lie in (-1, 1), got {rho}"));
    }
    let m = mean(y);
    let sd = sample_sd(y);
    if !(sd > 0.0) || !sd.is_finite() {
        return invalid("outcome has zero variance");
    }
    let noise = (1.0 - rho * rho).sqrt();
    Ok(y
        .iter()
        .map(|v| {
            let w: f64 = rng.sample(StandardNormal);
            rho * (v - m) / sd + noise * w
        })
        .collect())
}

/// Selects exactly `n_target` subjects with a propensity-biased Bernoulli
/// sweep: subjects are visited in shuffled order and accepted with
/// probability `p_hi` when their score exceeds the mean score, `p_lo`
/// otherwise. Sweeps repeat over the not-yet-selected subjects until the
/// target is reached.
pub fn ps_biased_split<R: Rng + ?Sized>(
    ps: &[f64],
    n_target: usize,
    p_hi: f64,
    p_lo: f64,
    rng: &mut R,
) -> Result<Vec<bool>> {
    if n_target == 0 || n_target >= ps.len() {
        return invalid(format!(
            "target {n_target} must satisfy 0 < target < {}",
            ps.len()
        ));
    }
    let in_unit = |p: f64| (0.0..=1.0).contains(&p);
    if !in_unit(p_hi) || !in_unit(p_lo) || (p_hi == 0.0 && p_lo == 0.0) {
        return invalid("selection probabilities must lie in [0, 1] and not both be zero");
    }
    let avg = mean(ps);
    let mut order: Vec<usize> = (0..ps.len()).collect();
    order.shuffle(rng);
    let mut selected = vec![false; ps.len()];
    let mut count = 0;
    while count < n_target {
        for &i in &order {
            if selected[i] {
                continue;
            }
            let p = if ps[i] > avg { p_hi } else { p_lo };
            if rng.random::<f64>() < p {
                selected[i] = true;
                count += 1;
                if count == n_target {
                    break;
                }
            }
        }
    }
    Ok(selected)
}
