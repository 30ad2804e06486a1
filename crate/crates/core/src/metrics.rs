//! Operating characteristics across Monte Carlo replicates: bias, relative
//! bias, rejection rate, mean standard error and effective sample size rate.
//!
//! Replicate values are collected into a [`PartialSummary`], which workers
//! build independently and merge. Finalization folds every cell in replicate
//! order, so the result does not depend on how replicates were partitioned.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::dist::normal_quantile;
use crate::error::{invalid, Error, Result};
use crate::propensity::CovSet;
use crate::regress::wald_decision;

/// Estimators evaluated by the harness, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MethodId {
    UnadjRc,
    UnadjFc,
    Map,
    Mm,
    MmNc,
    Psm,
    Psw,
    PssPp,
    PssCl,
    PsmMap,
    PswMap,
}

impl MethodId {
    pub const ALL: [MethodId; 11] = [
        MethodId::UnadjRc,
        MethodId::UnadjFc,
        MethodId::Map,
        MethodId::Mm,
        MethodId::MmNc,
        MethodId::Psm,
        MethodId::Psw,
        MethodId::PssPp,
        MethodId::PssCl,
        MethodId::PsmMap,
        MethodId::PswMap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::UnadjRc => "unadj.rc",
            MethodId::UnadjFc => "unadj.fc",
            MethodId::Map => "MAP",
            MethodId::Mm => "MM",
            MethodId::MmNc => "MM.nc",
            MethodId::Psm => "PSM",
            MethodId::Psw => "PSW",
            MethodId::PssPp => "PSS+PP",
            MethodId::PssCl => "PSS+CL",
            MethodId::PsmMap => "PSM+MAP",
            MethodId::PswMap => "PSW+MAP",
        }
    }

    /// Methods that fit a propensity model and therefore take a covariate set.
    pub fn uses_covset(self) -> bool {
        matches!(
            self,
            MethodId::Mm
                | MethodId::Psm
                | MethodId::Psw
                | MethodId::PssPp
                | MethodId::PssCl
                | MethodId::PsmMap
                | MethodId::PswMap
        )
    }

    pub fn is_map_family(self) -> bool {
        matches!(self, MethodId::Map | MethodId::PsmMap | MethodId::PswMap)
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let known: Vec<&str> = MethodId::ALL.iter().map(|m| m.as_str()).collect();
                Error::InvalidInput(format!("unknown method `{s}` (known: {})", known.join(", ")))
            })
    }
}

/// One method's result on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectEstimate {
    pub method: MethodId,
    pub covset: Option<CovSet>,
    /// Hyperparameter label such as `omega=0.5` or `tau=M;omega=0.5`.
    pub hyperparam: String,
    pub estimate: f64,
    pub se: f64,
    pub reject: bool,
    pub interval: (f64, f64),
    pub var_for_essr: f64,
    pub flags: Vec<String>,
}

impl EffectEstimate {
    /// Estimate with a symmetric normal interval and the Wald decision.
    pub fn wald(method: MethodId, estimate: f64, se: f64, alpha: f64) -> Result<Self> {
        let test = wald_decision(estimate, se, alpha)?;
        let half = normal_quantile(1.0 - alpha / 2.0) * se;
        Ok(EffectEstimate {
            method,
            covset: None,
            hyperparam: String::new(),
            estimate,
            se,
            reject: test.reject,
            interval: (estimate - half, estimate + half),
            var_for_essr: se * se,
            flags: Vec::new(),
        })
    }

    pub fn with_covset(mut self, covset: Option<CovSet>) -> Self {
        self.covset = covset;
        self
    }

    pub fn with_hyperparam(mut self, label: impl Into<String>) -> Self {
        self.hyperparam = label.into();
        self
    }

    pub fn flag(&mut self, flag: impl Into<String>) {
        self.flags.push(flag.into());
    }
}

pub fn bias(estimates: &[f64], theta_true: f64) -> f64 {
    estimates.iter().map(|e| e - theta_true).sum::<f64>() / estimates.len() as f64
}

/// Relative bias in percent; undefined under the null.
pub fn rel_bias_pct(bias: f64, theta_true: f64) -> Option<f64> {
    (theta_true != 0.0).then(|| 100.0 * bias / theta_true)
}

pub fn reject_rate(rejects: &[bool]) -> f64 {
    rejects.iter().filter(|&&r| r).count() as f64 / rejects.len() as f64
}

/// Effective sample size rate in percent.
pub fn essr(var_no_borrow: f64, var_borrow: f64) -> Result<f64> {
    if !(var_no_borrow > 0.0) || !(var_borrow > 0.0) {
        return invalid(format!(
            "ESSR needs positive variances, got {var_no_borrow} and {var_borrow}"
        ));
    }
    Ok((var_no_borrow / var_borrow - 1.0) * 100.0)
}

/// Identifies a summary cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub method: MethodId,
    pub covset: Option<CovSet>,
    pub hyperparam: String,
}

impl CellKey {
    pub fn of(est: &EffectEstimate) -> Self {
        CellKey {
            method: est.method,
            covset: est.covset,
            hyperparam: est.hyperparam.clone(),
        }
    }

    pub fn covset_label(&self) -> String {
        self.covset.map_or_else(|| "none".to_string(), |c| c.id().to_string())
    }
}

/// One row of the raw replicate table. Failed cells carry NaN values.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRow {
    pub scenario_id: String,
    pub replicate: u64,
    pub key: CellKey,
    pub estimate: f64,
    pub se: f64,
    pub reject: bool,
    pub essr_pct: f64,
    pub failed: bool,
    pub flags: Vec<String>,
}

impl ReplicateRow {
    /// Row for a successful estimate; `rc_se` is the reduced-concurrent
    /// unadjusted SE on the same replicate.
    pub fn from_estimate(scenario_id: &str, replicate: u64, est: &EffectEstimate, rc_se: f64) -> Self {
        let essr_pct = essr(rc_se * rc_se, est.var_for_essr).unwrap_or(f64::NAN);
        ReplicateRow {
            scenario_id: scenario_id.to_string(),
            replicate,
            key: CellKey::of(est),
            estimate: est.estimate,
            se: est.se,
            reject: est.reject,
            essr_pct,
            failed: false,
            flags: est.flags.clone(),
        }
    }

    pub fn failure(scenario_id: &str, replicate: u64, key: CellKey, reason: String) -> Self {
        ReplicateRow {
            scenario_id: scenario_id.to_string(),
            replicate,
            key,
            estimate: f64::NAN,
            se: f64::NAN,
            reject: false,
            essr_pct: f64::NAN,
            failed: true,
            flags: vec![format!("failed: {reason}")],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scenario_id: String,
    pub method: MethodId,
    pub covset: Option<CovSet>,
    pub hyperparam: String,
    pub bias: f64,
    pub rel_bias_pct: Option<f64>,
    pub type1_or_power: f64,
    pub mean_se: f64,
    pub essr_pct: f64,
    pub essr_empirical_pct: f64,
    pub n_used: usize,
    pub n_failed: usize,
}

impl SummaryRow {
    pub fn key(&self) -> CellKey {
        CellKey {
            method: self.method,
            covset: self.covset,
            hyperparam: self.hyperparam.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct CellValue {
    estimate: f64,
    se: f64,
    reject: bool,
    essr_pct: f64,
    failed: bool,
}

/// Mergeable per-scenario accumulator of replicate rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PartialSummary {
    scenario_id: Option<String>,
    cells: BTreeMap<CellKey, BTreeMap<u64, CellValue>>,
    reference: BTreeMap<u64, f64>,
}

impl PartialSummary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, row: &ReplicateRow) -> Result<()> {
        match &self.scenario_id {
            None => self.scenario_id = Some(row.scenario_id.clone()),
            Some(id) if *id != row.scenario_id => {
                return invalid(format!(
                    "rows from scenarios `{id}` and `{}` cannot be summarized together",
                    row.scenario_id
                ))
            }
            Some(_) => {}
        }
        if row.key.method == MethodId::UnadjRc && !row.failed {
            self.reference.insert(row.replicate, row.estimate);
        }
        let previous = self.cells.entry(row.key.clone()).or_default().insert(
            row.replicate,
            CellValue {
                estimate: row.estimate,
                se: row.se,
                reject: row.reject,
                essr_pct: row.essr_pct,
                failed: row.failed,
            },
        );
        if previous.is_some() {
            return invalid(format!(
                "duplicate row for replicate {} of {} covset {} `{}`",
                row.replicate,
                row.key.method,
                row.key.covset_label(),
                row.key.hyperparam
            ));
        }
        Ok(())
    }

    pub fn merge(&mut self, other: PartialSummary) -> Result<()> {
        match (&self.scenario_id, &other.scenario_id) {
            (Some(a), Some(b)) if a != b => {
                return invalid(format!("cannot merge scenarios `{a}` and `{b}`"))
            }
            (None, Some(_)) => self.scenario_id = other.scenario_id.clone(),
            _ => {}
        }
        for (rep, v) in other.reference {
            self.reference.insert(rep, v);
        }
        for (key, values) in other.cells {
            let cell = self.cells.entry(key).or_default();
            for (rep, v) in values {
                if cell.insert(rep, v).is_some() {
                    return invalid(format!("replicate {rep} present in both partial summaries"));
                }
            }
        }
        Ok(())
    }

    pub fn finalize(&self, theta_true: f64) -> Result<Vec<SummaryRow>> {
        let scenario_id = self.scenario_id.clone().unwrap_or_default();
        let mut out = Vec::with_capacity(self.cells.len());
        for (key, values) in &self.cells {
            let used: Vec<(&u64, &CellValue)> = values.iter().filter(|(_, v)| !v.failed).collect();
            let n_failed = values.len() - used.len();
            if values.is_empty() {
                return invalid("empty summary cell");
            }
            let (bias_v, rate, mean_se, essr_mean, essr_emp) = if used.is_empty() {
                (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN)
            } else {
                let est: Vec<f64> = used.iter().map(|(_, v)| v.estimate).collect();
                let rej: Vec<bool> = used.iter().map(|(_, v)| v.reject).collect();
                let n = used.len() as f64;
                let mean_se = used.iter().map(|(_, v)| v.se).sum::<f64>() / n;
                let essr_mean = used.iter().map(|(_, v)| v.essr_pct).sum::<f64>() / n;
                let paired: Vec<(f64, f64)> = used
                    .iter()
                    .filter_map(|(rep, v)| self.reference.get(rep).map(|&r| (r, v.estimate)))
                    .collect();
                let essr_emp = if paired.len() >= 2 {
                    let rc: Vec<f64> = paired.iter().map(|p| p.0).collect();
                    let me: Vec<f64> = paired.iter().map(|p| p.1).collect();
                    essr(variance(&rc), variance(&me)).unwrap_or(f64::NAN)
                } else {
                    f64::NAN
                };
                (bias(&est, theta_true), reject_rate(&rej), mean_se, essr_mean, essr_emp)
            };
            out.push(SummaryRow {
                scenario_id: scenario_id.clone(),
                method: key.method,
                covset: key.covset,
                hyperparam: key.hyperparam.clone(),
                bias: bias_v,
                rel_bias_pct: rel_bias_pct(bias_v, theta_true),
                type1_or_power: rate,
                mean_se,
                essr_pct: essr_mean,
                essr_empirical_pct: essr_emp,
                n_used: used.len(),
                n_failed,
            });
        }
        Ok(out)
    }
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Summary rows for one scenario, one per (method, covset, hyperparam) cell.
pub fn summarize(rows: &[ReplicateRow], theta_true: f64) -> Result<Vec<SummaryRow>> {
    if rows.is_empty() {
        return invalid("no replicate rows to summarize");
    }
    let mut acc = PartialSummary::new();
    for row in rows {
        acc.add(row)?;
    }
    acc.finalize(theta_true)
}
