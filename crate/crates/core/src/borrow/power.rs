//! Propensity-score-stratified borrowing: the normal power prior (PSS+PP)
//! and the composite-likelihood analogue (PSS+CL).
//!
//! Both split the pool into strata of the concurrent score distribution,
//! allocate a total number of borrowed subjects across strata in proportion
//! to their historical counts, and combine stratum effects with weights equal
//! to each stratum's share of the concurrent trial.

use crate::dist::{mean, sample_sd};
use crate::error::{invalid, Result};
use crate::metrics::{EffectEstimate, MethodId};
use crate::propensity::{stratify, PsFit};
use crate::trialdata::{SubjectRecord, TrialDataset, CONCURRENT};

/// Prior distribution entering [`power_prior_update`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormalPrior {
    Flat,
    Normal { mean: f64, se: f64 },
}

/// Conjugate normal power-prior update: the external likelihood raised to
/// `alpha_discount` adds precision `alpha_discount / ext_se^2`.
pub fn power_prior_update(prior: NormalPrior, ext_mean: f64, ext_se: f64, alpha_discount: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&alpha_discount) {
        return invalid(format!("discount must lie in [0, 1], got {alpha_discount}"));
    }
    if !(ext_se > 0.0) {
        return invalid(format!("external SE must be positive, got {ext_se}"));
    }
    let (p0, m0) = match prior {
        NormalPrior::Flat => (0.0, 0.0),
        NormalPrior::Normal { mean, se } => {
            if !(se > 0.0) {
                return invalid(format!("prior SE must be positive, got {se}"));
            }
            (1.0 / (se * se), mean)
        }
    };
    let pe = alpha_discount / (ext_se * ext_se);
    let prec = p0 + pe;
    if !(prec > 0.0) {
        return invalid("flat prior with zero discount gives an improper posterior");
    }
    Ok(((p0 * m0 + pe * ext_mean) / prec, prec.recip().sqrt()))
}

/// Number of historical subjects to borrow in total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TotalBorrow {
    /// Concurrent treated minus concurrent controls, restoring a 1:1 design.
    ArmGap,
    /// Size of the reduced concurrent trial.
    ConcurrentSize,
    Fixed(f64),
}

impl TotalBorrow {
    pub fn resolve(self, n_treated: usize, n_control: usize) -> f64 {
        match self {
            TotalBorrow::ArmGap => n_treated.saturating_sub(n_control) as f64,
            TotalBorrow::ConcurrentSize => (n_treated + n_control) as f64,
            TotalBorrow::Fixed(n) => n.max(0.0),
        }
    }

    pub fn label(self) -> String {
        match self {
            TotalBorrow::ArmGap => "arm-gap".to_string(),
            TotalBorrow::ConcurrentSize => "concurrent".to_string(),
            TotalBorrow::Fixed(n) => format!("{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StratifiedConfig {
    pub n_strata: usize,
    pub total_borrow: TotalBorrow,
    pub alpha: f64,
}

impl Default for StratifiedConfig {
    fn default() -> Self {
        StratifiedConfig { n_strata: 5, total_borrow: TotalBorrow::ArmGap, alpha: 0.05 }
    }
}

impl StratifiedConfig {
    pub fn label(&self) -> String {
        format!("strata={};borrow={}", self.n_strata, self.total_borrow.label())
    }
}

/// Outcomes of one stratum, by source.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StratumData {
    pub treated: Vec<f64>,
    pub control: Vec<f64>,
    pub historical: Vec<f64>,
}

impl StratumData {
    fn absorb(&mut self, other: StratumData) {
        self.treated.extend(other.treated);
        self.control.extend(other.control);
        self.historical.extend(other.historical);
    }

    fn concurrent(&self) -> usize {
        self.treated.len() + self.control.len()
    }

    fn usable(&self) -> bool {
        self.treated.len() >= 2 && self.control.len() >= 2
    }
}

/// Splits the reduced concurrent trial and the historical controls into
/// propensity strata. Strata with fewer than two treated or two control
/// subjects are merged into a neighbour; the number of merges is returned.
pub fn build_strata(dataset: &TrialDataset, psfit: &PsFit, n_strata: usize) -> Result<(Vec<StratumData>, usize)> {
    let concurrent: Vec<usize> = dataset.reduced_concurrent.iter().map(|s| s.id).collect();
    let strata = stratify(psfit, &concurrent, n_strata)?;
    let mut out = vec![StratumData::default(); n_strata];
    let subjects = dataset.reduced_concurrent.iter().chain(dataset.historical_subjects());
    for s in subjects {
        let Some(k) = strata.labels[psfit.position(s.id)?] else { continue };
        place(&mut out[k], s);
    }
    let mut merges = 0;
    while out.len() > 1 {
        let Some(i) = out.iter().position(|s| !s.usable()) else { break };
        let small = out.remove(i);
        let j = if i == 0 { 0 } else { i - 1 };
        out[j].absorb(small);
        merges += 1;
    }
    if !out[0].usable() {
        return invalid("too few concurrent subjects to form any usable stratum");
    }
    Ok((out, merges))
}

fn place(stratum: &mut StratumData, s: &SubjectRecord) {
    if s.trial != CONCURRENT {
        stratum.historical.push(s.y);
    } else if s.treated {
        stratum.treated.push(s.y);
    } else {
        stratum.control.push(s.y);
    }
}

fn sum_sq(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum()
}

/// Discount per stratum: `min(1, A_s / n_hs)` with
/// `A_s = total * n_hs / sum(n_h)`.
pub fn stratum_discounts(strata: &[StratumData], total: f64) -> Vec<f64> {
    let n_hist: usize = strata.iter().map(|s| s.historical.len()).sum();
    strata
        .iter()
        .map(|s| {
            let nh = s.historical.len();
            if nh == 0 || n_hist == 0 {
                0.0
            } else {
                let a = total * nh as f64 / n_hist as f64;
                (a / nh as f64).min(1.0)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Combiner {
    PowerPrior,
    #[cfg_attr(not(feature = "composite-likelihood"), allow(dead_code))]
    Composite,
}

fn stratified(method: MethodId, combiner: Combiner, dataset: &TrialDataset, psfit: &PsFit, cfg: &StratifiedConfig) -> Result<EffectEstimate> {
    let (strata, merges) = build_strata(dataset, psfit, cfg.n_strata)?;
    let n_t = dataset.reduced_concurrent.iter().filter(|s| s.treated).count();
    let n_c = dataset.reduced_concurrent.len() - n_t;
    let total = cfg.total_borrow.resolve(n_t, n_c);
    let discounts = stratum_discounts(&strata, total);
    let n_conc: usize = strata.iter().map(StratumData::concurrent).sum();

    let (mut effect, mut var) = (0.0, 0.0);
    for (s, &a) in strata.iter().zip(&discounts) {
        let (nc, nh) = (s.control.len() as f64, s.historical.len() as f64);
        let t_var = sample_sd(&s.treated).powi(2) / s.treated.len() as f64;
        let (c_mean, c_var) = match combiner {
            Combiner::PowerPrior => {
                // Common within-source SD for concurrent and historical controls.
                let df = nc + nh - if nh > 0.0 { 2.0 } else { 1.0 };
                let sigma = ((sum_sq(&s.control) + sum_sq(&s.historical)) / df).sqrt();
                let prior = NormalPrior::Normal { mean: mean(&s.control), se: sigma / nc.sqrt() };
                if nh > 0.0 && a > 0.0 {
                    let (m, se) = power_prior_update(prior, mean(&s.historical), sigma / nh.sqrt(), a)?;
                    (m, se * se)
                } else {
                    (mean(&s.control), sigma * sigma / nc)
                }
            }
            Combiner::Composite => {
                // SD of all control outcomes in the stratum taken together.
                let pooled: Vec<f64> = s.control.iter().chain(&s.historical).copied().collect();
                let sigma = sample_sd(&pooled);
                let m = if nh > 0.0 {
                    (nc * mean(&s.control) + a * nh * mean(&s.historical)) / (nc + a * nh)
                } else {
                    mean(&s.control)
                };
                (m, sigma * sigma / (nc + a * nh))
            }
        };
        let w = s.concurrent() as f64 / n_conc as f64;
        effect += w * (mean(&s.treated) - c_mean);
        var += w * w * (t_var + c_var);
    }
    let mut est = EffectEstimate::wald(method, effect, var.sqrt(), cfg.alpha)?
        .with_covset(psfit.covset)
        .with_hyperparam(cfg.label());
    if merges > 0 {
        est.flag(format!("{merges} strata merged"));
    }
    Ok(est)
}

/// Stratified power-prior estimate.
pub fn estimate_pss_pp(dataset: &TrialDataset, psfit: &PsFit, cfg: &StratifiedConfig) -> Result<EffectEstimate> {
    stratified(MethodId::PssPp, Combiner::PowerPrior, dataset, psfit, cfg)
}

/// Stratified composite-likelihood estimate.
#[cfg(feature = "composite-likelihood")]
pub fn estimate_pss_cl(dataset: &TrialDataset, psfit: &PsFit, cfg: &StratifiedConfig) -> Result<EffectEstimate> {
    stratified(MethodId::PssCl, Combiner::Composite, dataset, psfit, cfg)
}
