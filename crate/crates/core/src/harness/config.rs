//! Scenario configuration: TOML schema, preset expansion and validation.
//!
//! A configuration file holds optional top-level defaults and one or more
//! `[[scenario]]` tables:
//!
//! ```toml
//! master_seed = 2024
//! replicates = 2000
//!
//! [[scenario]]
//! scenario_id = "single-severe-null"
//! preset = "single-severe"
//! theta_treat = 0.0
//! covsets = [1, 2, 3]
//! methods = "paper"
//!
//! [[scenario]]
//! scenario_id = "custom"
//! k_historical = 1
//! heterogeneity = "moderate"
//! [[scenario.methods]]
//! method = "MAP"
//! omega = [0.2, 1.0]
//! ```

use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;

use crate::borrow::{TauLevel, TotalBorrow};
use crate::error::{Error, Result};
use crate::metrics::MethodId;
use crate::mixed::Criterion;
use crate::propensity::{Caliper, CovSet, TrimBounds};
use crate::trialdata::{Assignment, GenCoefficients, N_COVARIATES};

pub const DEFAULT_REPLICATES: u64 = 2000;
pub const DEFAULT_MASTER_SEED: u64 = 2024;
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heterogeneity {
    Moderate,
    Severe,
}

impl Heterogeneity {
    pub fn as_str(self) -> &'static str {
        match self {
            Heterogeneity::Moderate => "moderate",
            Heterogeneity::Severe => "severe",
        }
    }
}

impl FromStr for Heterogeneity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moderate" => Ok(Heterogeneity::Moderate),
            "severe" => Ok(Heterogeneity::Severe),
            other => Err(Error::Config(format!("heterogeneity must be `moderate` or `severe`, got `{other}`"))),
        }
    }
}

/// One method with its hyperparameter ladders. Fields that do not apply to
/// the method keep their defaults and are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub method: MethodId,
    pub omega: Vec<f64>,
    pub tau: Vec<TauLevel>,
    pub caliper: Caliper,
    pub trim: TrimBounds,
    pub strata: usize,
    pub borrow: TotalBorrow,
    pub criterion: Criterion,
}

impl MethodSpec {
    pub fn new(method: MethodId) -> Self {
        MethodSpec {
            method,
            omega: vec![0.5],
            tau: vec![TauLevel::M],
            caliper: Caliper::default(),
            trim: TrimBounds::default(),
            strata: 5,
            borrow: TotalBorrow::ArmGap,
            criterion: Criterion::Reml,
        }
    }

    fn with_omega(mut self, omega: &[f64]) -> Self {
        self.omega = omega.to_vec();
        self
    }

    fn with_tau(mut self, tau: &[TauLevel]) -> Self {
        self.tau = tau.to_vec();
        self
    }
}

/// Fully resolved description of one simulation cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scenario_id: String,
    pub k_historical: usize,
    pub heterogeneity: Heterogeneity,
    pub theta_treat: f64,
    pub n_total: usize,
    /// Generating coefficients; `theta_treat` here equals the field above.
    pub coefficients: GenCoefficients,
    pub methods: Vec<MethodSpec>,
    pub covsets: Vec<CovSet>,
    pub replicates: u64,
    pub master_seed: u64,
    pub alpha: f64,
}

impl ScenarioConfig {
    /// Scenario built from a named preset with the full method grid.
    pub fn from_preset(scenario_id: &str, preset: &str, theta_treat: f64) -> Result<Self> {
        let (k, het) = parse_preset_name(preset)?;
        let mut coefficients = preset_coefficients(preset)?;
        coefficients.theta_treat = theta_treat;
        Ok(ScenarioConfig {
            scenario_id: scenario_id.to_string(),
            k_historical: k,
            heterogeneity: het,
            theta_treat,
            n_total: coefficients.default_n_total(),
            coefficients,
            methods: paper_methods(k, het),
            covsets: vec![CovSet::One, CovSet::Two, CovSet::Three],
            replicates: DEFAULT_REPLICATES,
            master_seed: DEFAULT_MASTER_SEED,
            alpha: DEFAULT_ALPHA,
        })
    }

    /// Alternative-hypothesis effect of the scenario's preset family.
    pub fn preset_alternative(&self) -> f64 {
        preset_coefficients(&preset_name(self.k_historical, self.heterogeneity))
            .map(|c| c.theta_treat)
            .unwrap_or(f64::NAN)
    }
}

pub fn preset_name(k_historical: usize, heterogeneity: Heterogeneity) -> String {
    let family = if k_historical == 1 { "single" } else { "multi" };
    format!("{family}-{}", heterogeneity.as_str())
}

fn parse_preset_name(name: &str) -> Result<(usize, Heterogeneity)> {
    let (family, het) = name
        .split_once('-')
        .ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
    let k = match family {
        "single" => 1,
        "multi" => 3,
        _ => return Err(Error::Config(format!("unknown preset `{name}`"))),
    };
    Ok((k, het.parse()?))
}

fn preset_coefficients(name: &str) -> Result<GenCoefficients> {
    GenCoefficients::preset(name).ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))
}

/// Full method grid of the simulation study: robust weights
/// 0.2/0.5/0.8/1 for one historical trial; weight 0.5 with the τ ladder for
/// several (the XS level only under severe heterogeneity).
pub fn paper_methods(k_historical: usize, heterogeneity: Heterogeneity) -> Vec<MethodSpec> {
    let (omega, tau): (Vec<f64>, Vec<TauLevel>) = if k_historical == 1 {
        (vec![0.2, 0.5, 0.8, 1.0], vec![TauLevel::M])
    } else {
        let mut t = vec![TauLevel::L, TauLevel::M, TauLevel::S];
        if heterogeneity == Heterogeneity::Severe {
            t.push(TauLevel::XS);
        }
        (vec![0.5], t)
    };
    let mut out = vec![
        MethodSpec::new(MethodId::UnadjRc),
        MethodSpec::new(MethodId::UnadjFc),
        MethodSpec::new(MethodId::Map).with_omega(&omega).with_tau(&tau),
        MethodSpec::new(MethodId::MmNc),
        MethodSpec::new(MethodId::Psm),
        MethodSpec::new(MethodId::Psw),
        MethodSpec::new(MethodId::PsmMap).with_omega(&omega).with_tau(&tau),
        MethodSpec::new(MethodId::PswMap).with_omega(&omega).with_tau(&tau),
    ];
    if cfg!(feature = "composite-likelihood") {
        out.push(MethodSpec::new(MethodId::PssCl));
    }
    out.push(MethodSpec::new(MethodId::PssPp));
    out.push(MethodSpec::new(MethodId::Mm));
    out
}

// ---------------------------------------------------------------------------
// File schema

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileToml {
    master_seed: Option<u64>,
    replicates: Option<u64>,
    alpha: Option<f64>,
    #[serde(default)]
    scenario: Vec<ScenarioToml>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioToml {
    scenario_id: String,
    preset: Option<String>,
    k_historical: Option<usize>,
    heterogeneity: Option<String>,
    theta_treat: Option<f64>,
    n_total: Option<usize>,
    coefficients: Option<CoefficientsToml>,
    methods: Option<MethodsToml>,
    covsets: Option<Vec<u8>>,
    replicates: Option<u64>,
    master_seed: Option<u64>,
    alpha: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoefficientsToml {
    alpha0: Option<f64>,
    alpha: Option<Vec<f64>>,
    sigma_e: Option<f64>,
    beta0: Option<Vec<f64>>,
    beta: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum MethodsToml {
    Named(String),
    List(Vec<MethodToml>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MethodToml {
    method: String,
    omega: Option<Vec<f64>>,
    tau: Option<Vec<String>>,
    caliper: Option<f64>,
    trim: Option<[f64; 2]>,
    strata: Option<usize>,
    borrow: Option<toml::Value>,
    criterion: Option<String>,
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<Vec<ScenarioConfig>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses and validates configuration text.
pub fn parse_config(text: &str) -> Result<Vec<ScenarioConfig>> {
    let file: FileToml = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    if file.scenario.is_empty() {
        return Err(Error::Config("no [[scenario]] tables".to_string()));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(file.scenario.len());
    for s in file.scenario {
        if !seen.insert(s.scenario_id.clone()) {
            return Err(Error::Config(format!("duplicate scenario_id `{}`", s.scenario_id)));
        }
        let id = s.scenario_id.clone();
        let cfg = resolve_scenario(s, &file.master_seed, &file.replicates, &file.alpha)
            .map_err(|e| Error::Config(format!("scenario `{id}`: {}", message(e))))?;
        out.push(cfg);
    }
    Ok(out)
}

fn message(e: Error) -> String {
    match e {
        Error::Config(m) | Error::InvalidInput(m) => m,
        other => other.to_string(),
    }
}

fn cfg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

fn resolve_scenario(
    s: ScenarioToml,
    master_seed: &Option<u64>,
    replicates: &Option<u64>,
    alpha: &Option<f64>,
) -> Result<ScenarioConfig> {
    if s.scenario_id.trim().is_empty() || s.scenario_id.contains(',') {
        return cfg_err("scenario_id must be non-empty and contain no commas");
    }
    let (k, het) = match (&s.preset, s.k_historical, &s.heterogeneity) {
        (Some(p), k, h) => {
            let (pk, ph) = parse_preset_name(p)?;
            if k.is_some_and(|k| k != pk) || h.as_deref().is_some_and(|h| h != ph.as_str()) {
                return cfg_err(format!("preset `{p}` contradicts k_historical/heterogeneity"));
            }
            (pk, ph)
        }
        (None, Some(k), Some(h)) => {
            if k != 1 && k != 3 {
                return cfg_err(format!("k_historical must be 1 or 3, got {k}"));
            }
            (k, h.parse()?)
        }
        _ => return cfg_err("give either `preset` or both `k_historical` and `heterogeneity`"),
    };
    let mut coefficients = preset_coefficients(&preset_name(k, het))?;
    if let Some(theta) = s.theta_treat {
        coefficients.theta_treat = theta;
    }
    if let Some(over) = s.coefficients {
        apply_overrides(&mut coefficients, over)?;
    }
    coefficients.validate()?;
    if coefficients.k_historical() != k {
        return cfg_err("coefficient override changes the number of historical trials");
    }
    let n_total = s.n_total.unwrap_or_else(|| coefficients.default_n_total());
    if n_total < 40 {
        return cfg_err(format!("n_total must be at least 40, got {n_total}"));
    }
    let methods = match s.methods {
        None => return cfg_err("missing `methods` (a list of method tables or \"paper\")"),
        Some(MethodsToml::Named(name)) if name == "paper" => paper_methods(k, het),
        Some(MethodsToml::Named(name)) => return cfg_err(format!("unknown method set `{name}` (only \"paper\")")),
        Some(MethodsToml::List(list)) => {
            if list.is_empty() {
                return cfg_err("`methods` is empty");
            }
            list.into_iter().map(resolve_method).collect::<Result<Vec<_>>>()?
        }
    };
    let covsets = match s.covsets {
        None => vec![CovSet::One, CovSet::Two, CovSet::Three],
        Some(ids) => {
            let mut v = ids.into_iter().map(CovSet::from_id).collect::<Result<Vec<_>>>()?;
            v.sort();
            v.dedup();
            v
        }
    };
    if covsets.is_empty() && methods.iter().any(|m| m.method.uses_covset() && m.method != MethodId::MmNc) {
        return cfg_err("covariate-adjusted methods requested with an empty `covsets`");
    }
    let replicates = s.replicates.or(*replicates).unwrap_or(DEFAULT_REPLICATES);
    if replicates == 0 {
        return cfg_err("replicates must be at least 1");
    }
    let alpha = s.alpha.or(*alpha).unwrap_or(DEFAULT_ALPHA);
    if !(alpha > 0.0 && alpha < 1.0) {
        return cfg_err(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    Ok(ScenarioConfig {
        scenario_id: s.scenario_id,
        k_historical: k,
        heterogeneity: het,
        theta_treat: coefficients.theta_treat,
        n_total,
        coefficients,
        methods,
        covsets,
        replicates,
        master_seed: s.master_seed.or(*master_seed).unwrap_or(DEFAULT_MASTER_SEED),
        alpha,
    })
}

fn six(v: &[f64], what: &str) -> Result<[f64; N_COVARIATES]> {
    v.try_into()
        .map_err(|_| Error::Config(format!("`{what}` needs {N_COVARIATES} values, got {}", v.len())))
}

fn apply_overrides(c: &mut GenCoefficients, o: CoefficientsToml) -> Result<()> {
    if let Some(a0) = o.alpha0 {
        c.alpha0 = a0;
    }
    if let Some(a) = o.alpha {
        c.alpha = six(&a, "alpha")?;
    }
    if let Some(s) = o.sigma_e {
        c.sigma_e = s;
    }
    match &mut c.assignment {
        Assignment::Single { beta0, beta } => {
            if let Some(b0) = o.beta0 {
                let [v] = b0[..] else {
                    return cfg_err("`beta0` needs one value for a single historical trial");
                };
                *beta0 = v;
            }
            if let Some(b) = o.beta {
                let [row] = &b[..] else {
                    return cfg_err("`beta` needs one row for a single historical trial");
                };
                *beta = six(row, "beta")?;
            }
        }
        Assignment::Multi { beta0, beta } => {
            if let Some(b0) = o.beta0 {
                *beta0 = b0;
            }
            if let Some(b) = o.beta {
                *beta = b.iter().map(|r| six(r, "beta")).collect::<Result<Vec<_>>>()?;
            }
        }
    }
    Ok(())
}

fn resolve_method(m: MethodToml) -> Result<MethodSpec> {
    let method: MethodId = m.method.parse().map_err(|_| {
        Error::Config(format!(
            "unknown method `{}` (expected one of {})",
            m.method,
            MethodId::ALL.iter().map(|x| x.as_str()).collect::<Vec<_>>().join(", ")
        ))
    })?;
    if method == MethodId::PssCl && !cfg!(feature = "composite-likelihood") {
        return cfg_err("PSS+CL requires the `composite-likelihood` feature");
    }
    let name = method.as_str();
    let mut spec = MethodSpec::new(method);
    let only = |given: bool, ok: bool, key: &str| -> Result<()> {
        if given && !ok {
            return cfg_err(format!("`{key}` is not a hyperparameter of {name}"));
        }
        Ok(())
    };
    let map_family = method.is_map_family();
    let matching = matches!(method, MethodId::Psm | MethodId::PsmMap);
    let weighting = matches!(method, MethodId::Psw | MethodId::PswMap);
    let stratified = matches!(method, MethodId::PssPp | MethodId::PssCl);
    let mixed = matches!(method, MethodId::Mm | MethodId::MmNc);
    only(m.omega.is_some(), map_family, "omega")?;
    only(m.tau.is_some(), map_family, "tau")?;
    only(m.caliper.is_some(), matching, "caliper")?;
    only(m.trim.is_some(), weighting, "trim")?;
    only(m.strata.is_some(), stratified, "strata")?;
    only(m.borrow.is_some(), stratified, "borrow")?;
    only(m.criterion.is_some(), mixed, "criterion")?;

    if let Some(omega) = m.omega {
        if omega.is_empty() || omega.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return cfg_err("`omega` must be a non-empty list of values in [0, 1]");
        }
        spec.omega = omega;
    }
    if let Some(tau) = m.tau {
        if tau.is_empty() {
            return cfg_err("`tau` must be non-empty");
        }
        spec.tau = tau.iter().map(|t| t.parse::<TauLevel>()).collect::<Result<Vec<_>>>()?;
    }
    if let Some(c) = m.caliper {
        if !(c >= 0.0 && c.is_finite()) {
            return cfg_err(format!("caliper must be a non-negative number, got {c}"));
        }
        spec.caliper = Caliper::PooledSd(c);
    }
    if let Some([lower, upper]) = m.trim {
        if !(lower > 0.0 && lower < upper) {
            return cfg_err(format!("trim bounds must satisfy 0 < lower < upper, got [{lower}, {upper}]"));
        }
        spec.trim = TrimBounds { lower, upper };
    }
    if let Some(k) = m.strata {
        if !(1..=50).contains(&k) {
            return cfg_err(format!("strata must lie in 1..=50, got {k}"));
        }
        spec.strata = k;
    }
    if let Some(b) = m.borrow {
        spec.borrow = match &b {
            toml::Value::String(s) if s == "arm-gap" => TotalBorrow::ArmGap,
            toml::Value::String(s) if s == "concurrent" => TotalBorrow::ConcurrentSize,
            toml::Value::Integer(n) if *n >= 0 => TotalBorrow::Fixed(*n as f64),
            toml::Value::Float(x) if *x >= 0.0 => TotalBorrow::Fixed(*x),
            other => return cfg_err(format!("borrow must be \"arm-gap\", \"concurrent\" or a non-negative number, got {other}")),
        };
    }
    if let Some(c) = m.criterion {
        spec.criterion = match c.as_str() {
            "reml" => Criterion::Reml,
            "ml" => Criterion::Ml,
            other => return cfg_err(format!("criterion must be \"reml\" or \"ml\", got `{other}`")),
        };
    }
    Ok(spec)
}
