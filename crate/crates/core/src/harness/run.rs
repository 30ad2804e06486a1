//! Replicate evaluation and parallel scenario execution.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};

use rayon::prelude::*;

use super::config::{MethodSpec, ScenarioConfig};
use super::seeds::{replicate_seed, substream};
use crate::borrow::map::{finish, map_inputs, psm_map_inputs, psw_map_inputs};
use crate::borrow::{estimate_pss_pp, MapAnalysis, MapConfig, MapInputs, StratifiedConfig, TauLevel};
use crate::error::{Error, Result};
use crate::metrics::{CellKey, EffectEstimate, MethodId, PartialSummary, ReplicateRow, SummaryRow};
use crate::mixed::{estimate_mm, Criterion};
use crate::propensity::{estimate_ps, estimate_psm, estimate_psw, Caliper, CovSet, PsFit, TrimBounds};
use crate::regress::estimate_unadjusted;
use crate::trialdata::{build_replicate, TrialDataset};

/// One (method, covariate set, hyperparameter) cell evaluated per replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub key: CellKey,
    kind: CellKind,
}

#[derive(Debug, Clone, PartialEq)]
enum CellKind {
    UnadjRc,
    UnadjFc,
    Map { tau: TauLevel, omega: f64 },
    Mixed { covset: Option<CovSet>, criterion: Criterion },
    Psm { covset: CovSet, caliper: Caliper },
    Psw { covset: CovSet, trim: TrimBounds },
    Stratified { method: MethodId, covset: CovSet, cfg: StratifiedConfig },
    PsmMap { covset: CovSet, caliper: Caliper, tau: TauLevel, omega: f64 },
    PswMap { covset: CovSet, trim: TrimBounds, tau: TauLevel, omega: f64 },
}

fn caliper_label(c: Caliper) -> String {
    match c {
        Caliper::PooledSd(k) => format!("caliper={k}sd"),
        Caliper::Raw(w) => format!("caliper={w}"),
    }
}

fn trim_label(t: TrimBounds) -> String {
    format!("trim={}:{}", t.lower, t.upper)
}

fn map_label(prefix: Option<String>, tau: TauLevel, omega: f64) -> String {
    let base = MapConfig { omega, tau, alpha: 0.0 }.label();
    match prefix {
        Some(p) => format!("{p};{base}"),
        None => base,
    }
}

/// Expands the configured methods into cells. The unadjusted benchmarks are
/// always present and come first.
pub fn plan_cells(config: &ScenarioConfig) -> Result<Vec<Cell>> {
    let mut cells = vec![
        Cell { key: key(MethodId::UnadjRc, None, String::new()), kind: CellKind::UnadjRc },
        Cell { key: key(MethodId::UnadjFc, None, String::new()), kind: CellKind::UnadjFc },
    ];
    for spec in &config.methods {
        expand(spec, config, &mut cells);
    }
    // Benchmarks listed explicitly are already present.
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(cells.len());
    for cell in cells {
        if seen.insert(cell.key.clone()) {
            out.push(cell);
        } else if !matches!(cell.kind, CellKind::UnadjRc | CellKind::UnadjFc) {
            return Err(Error::Config(format!(
                "scenario `{}`: cell {} / covset {} / `{}` is listed twice",
                config.scenario_id,
                cell.key.method,
                cell.key.covset_label(),
                cell.key.hyperparam
            )));
        }
    }
    Ok(out)
}

fn key(method: MethodId, covset: Option<CovSet>, hyperparam: String) -> CellKey {
    CellKey { method, covset, hyperparam }
}

fn expand(spec: &MethodSpec, config: &ScenarioConfig, cells: &mut Vec<Cell>) {
    let m = spec.method;
    let mixed_label = match spec.criterion {
        Criterion::Reml => String::new(),
        Criterion::Ml => "criterion=ml".to_string(),
    };
    match m {
        MethodId::UnadjRc => cells.push(Cell { key: key(m, None, String::new()), kind: CellKind::UnadjRc }),
        MethodId::UnadjFc => cells.push(Cell { key: key(m, None, String::new()), kind: CellKind::UnadjFc }),
        MethodId::Map => {
            for &tau in &spec.tau {
                for &omega in &spec.omega {
                    cells.push(Cell { key: key(m, None, map_label(None, tau, omega)), kind: CellKind::Map { tau, omega } });
                }
            }
        }
        MethodId::MmNc => cells.push(Cell {
            key: key(m, None, mixed_label),
            kind: CellKind::Mixed { covset: None, criterion: spec.criterion },
        }),
        _ => {
            for &cs in &config.covsets {
                push_covset_cells(spec, cs, &mixed_label, cells);
            }
        }
    }
}

fn push_covset_cells(spec: &MethodSpec, cs: CovSet, mixed_label: &str, cells: &mut Vec<Cell>) {
    let m = spec.method;
    let k = |h: String| key(m, Some(cs), h);
    match m {
        MethodId::Mm => cells.push(Cell {
            key: k(mixed_label.to_string()),
            kind: CellKind::Mixed { covset: Some(cs), criterion: spec.criterion },
        }),
        MethodId::Psm => cells.push(Cell {
            key: k(caliper_label(spec.caliper)),
            kind: CellKind::Psm { covset: cs, caliper: spec.caliper },
        }),
        MethodId::Psw => cells.push(Cell { key: k(trim_label(spec.trim)), kind: CellKind::Psw { covset: cs, trim: spec.trim } }),
        MethodId::PssPp | MethodId::PssCl => {
            let cfg = StratifiedConfig { n_strata: spec.strata, total_borrow: spec.borrow, alpha: 0.0 };
            cells.push(Cell { key: k(cfg.label()), kind: CellKind::Stratified { method: m, covset: cs, cfg } });
        }
        MethodId::PsmMap => {
            for &tau in &spec.tau {
                for &omega in &spec.omega {
                    cells.push(Cell {
                        key: k(map_label(Some(caliper_label(spec.caliper)), tau, omega)),
                        kind: CellKind::PsmMap { covset: cs, caliper: spec.caliper, tau, omega },
                    });
                }
            }
        }
        MethodId::PswMap => {
            for &tau in &spec.tau {
                for &omega in &spec.omega {
                    cells.push(Cell {
                        key: k(map_label(Some(trim_label(spec.trim)), tau, omega)),
                        kind: CellKind::PswMap { covset: cs, trim: spec.trim, tau, omega },
                    });
                }
            }
        }
        MethodId::UnadjRc | MethodId::UnadjFc | MethodId::Map | MethodId::MmNc => {
            unreachable!("handled without covariate sets")
        }
    }
}

/// Result of one cell on one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub key: CellKey,
    pub result: std::result::Result<EffectEstimate, String>,
}

/// Data source of a MAP-family analysis.
#[derive(Debug, Clone, Copy)]
enum MapSource {
    Raw,
    Matched(CovSet, Caliper),
    Weighted(CovSet, TrimBounds),
}

impl MapSource {
    fn cache_key(self) -> String {
        match self {
            MapSource::Raw => "raw".to_string(),
            MapSource::Matched(cs, c) => format!("{}/{}/{}", MethodId::PsmMap, cs, caliper_label(c)),
            MapSource::Weighted(cs, t) => format!("{}/{}/{}", MethodId::PswMap, cs, trim_label(t)),
        }
    }
}

type Cached<T> = std::result::Result<T, String>;

/// Shared per-dataset state: propensity fits and MAP analyses are computed
/// once and reused across cells.
struct Workspace<'a> {
    dataset: &'a TrialDataset,
    seed: u64,
    alpha: f64,
    ps: BTreeMap<CovSet, Cached<PsFit>>,
    inputs: HashMap<String, Cached<MapInputs>>,
    analyses: HashMap<(String, String), Cached<MapAnalysis>>,
}

impl<'a> Workspace<'a> {
    fn new(dataset: &'a TrialDataset, seed: u64, alpha: f64) -> Self {
        Workspace { dataset, seed, alpha, ps: BTreeMap::new(), inputs: HashMap::new(), analyses: HashMap::new() }
    }

    fn psfit(&mut self, cs: CovSet) -> Result<&PsFit> {
        let ds = self.dataset;
        self.ps
            .entry(cs)
            .or_insert_with(|| estimate_ps(ds, cs).map_err(|e| format!("propensity fit: {e}")))
            .as_ref()
            .map_err(|e| Error::InvalidInput(e.clone()))
    }

    fn map_inputs(&mut self, source: MapSource) -> Result<MapInputs> {
        let k = source.cache_key();
        if !self.inputs.contains_key(&k) {
            let built = self.build_inputs(source).map_err(|e| e.to_string());
            self.inputs.insert(k.clone(), built);
        }
        self.inputs[&k].clone().map_err(Error::InvalidInput)
    }

    fn build_inputs(&mut self, source: MapSource) -> Result<MapInputs> {
        let ds = self.dataset;
        match source {
            MapSource::Raw => map_inputs(ds),
            MapSource::Matched(cs, caliper) => {
                let mut rng = substream(self.seed, &source.cache_key());
                psm_map_inputs(ds, self.psfit(cs)?, caliper, &mut rng)
            }
            MapSource::Weighted(cs, trim) => psw_map_inputs(ds, self.psfit(cs)?, trim),
        }
    }

    fn map_estimate(&mut self, method: MethodId, source: MapSource, tau: TauLevel, omega: f64) -> Result<EffectEstimate> {
        let inputs = self.map_inputs(source)?;
        let k = (source.cache_key(), tau.to_string());
        if !self.analyses.contains_key(&k) {
            let built = inputs.analysis(tau).map_err(|e| e.to_string());
            self.analyses.insert(k.clone(), built);
        }
        let analysis = self.analyses[&k].as_ref().map_err(|e| Error::InvalidInput(e.clone()))?;
        finish(method, &inputs, analysis, &MapConfig { omega, tau, alpha: self.alpha })
    }

    fn evaluate(&mut self, kind: &CellKind) -> Result<EffectEstimate> {
        let ds = self.dataset;
        let alpha = self.alpha;
        match *kind {
            CellKind::UnadjRc => estimate_unadjusted(ds, false, alpha),
            CellKind::UnadjFc => estimate_unadjusted(ds, true, alpha),
            CellKind::Map { tau, omega } => self.map_estimate(MethodId::Map, MapSource::Raw, tau, omega),
            CellKind::Mixed { covset, criterion } => estimate_mm(ds, covset, criterion, alpha),
            CellKind::Psm { covset, caliper } => {
                let label = format!("{}/{}/{}", MethodId::Psm, covset, caliper_label(caliper));
                let mut rng = substream(self.seed, &label);
                estimate_psm(ds, self.psfit(covset)?, caliper, alpha, &mut rng)
            }
            CellKind::Psw { covset, trim } => estimate_psw(ds, self.psfit(covset)?, trim, alpha),
            CellKind::Stratified { method, covset, cfg } => {
                let cfg = StratifiedConfig { alpha, ..cfg };
                let fit = self.psfit(covset)?;
                match method {
                    MethodId::PssPp => estimate_pss_pp(ds, fit, &cfg),
                    #[cfg(feature = "composite-likelihood")]
                    MethodId::PssCl => crate::borrow::estimate_pss_cl(ds, fit, &cfg),
                    other => Err(Error::InvalidInput(format!("{other} is not a stratified method"))),
                }
            }
            CellKind::PsmMap { covset, caliper, tau, omega } => {
                self.map_estimate(MethodId::PsmMap, MapSource::Matched(covset, caliper), tau, omega)
            }
            CellKind::PswMap { covset, trim, tau, omega } => {
                self.map_estimate(MethodId::PswMap, MapSource::Weighted(covset, trim), tau, omega)
            }
        }
    }
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".to_string())
}

/// Evaluates every cell on one dataset. Failures are captured per cell.
pub fn evaluate_cells(dataset: &TrialDataset, cells: &[Cell], seed: u64, alpha: f64) -> Vec<CellOutcome> {
    let mut ws = Workspace::new(dataset, seed, alpha);
    cells
        .iter()
        .map(|cell| {
            let result = match catch_unwind(AssertUnwindSafe(|| ws.evaluate(&cell.kind))) {
                Ok(Ok(mut est)) => {
                    est.covset = cell.key.covset;
                    est.hyperparam = cell.key.hyperparam.clone();
                    Ok(est)
                }
                Ok(Err(e)) => Err(e.to_string()),
                Err(payload) => Err(format!("panic: {}", panic_message(payload))),
            };
            CellOutcome { key: cell.key.clone(), result }
        })
        .collect()
}

/// Generates replicate `index` of a scenario and evaluates every cell on it.
pub fn run_replicate(config: &ScenarioConfig, cells: &[Cell], index: u64) -> Vec<CellOutcome> {
    let seed = replicate_seed(config.master_seed, &config.scenario_id, index);
    let mut rng = substream(seed, "data");
    match build_replicate(&config.coefficients, config.n_total, &mut rng) {
        Ok(ds) => evaluate_cells(&ds, cells, seed, config.alpha),
        Err(e) => cells
            .iter()
            .map(|c| CellOutcome { key: c.key.clone(), result: Err(format!("data generation: {e}")) })
            .collect(),
    }
}

/// Converts one replicate's outcomes to raw rows; ESSR is relative to the
/// reduced-concurrent unadjusted SE on the same replicate.
pub fn outcome_rows(scenario_id: &str, replicate: u64, outcomes: &[CellOutcome]) -> Vec<ReplicateRow> {
    let rc_se = outcomes
        .iter()
        .find(|o| o.key.method == MethodId::UnadjRc)
        .and_then(|o| o.result.as_ref().ok())
        .map_or(f64::NAN, |e| e.se);
    outcomes
        .iter()
        .map(|o| match &o.result {
            Ok(est) => ReplicateRow::from_estimate(scenario_id, replicate, est, rc_se),
            Err(reason) => ReplicateRow::failure(scenario_id, replicate, o.key.clone(), reason.clone()),
        })
        .collect()
}

/// Raw replicate rows and the summary table of one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutput {
    pub rows: Vec<ReplicateRow>,
    pub summary: Vec<SummaryRow>,
}

impl ScenarioOutput {
    /// Largest per-cell share of failed replicates.
    pub fn max_failure_rate(&self) -> f64 {
        self.summary
            .iter()
            .map(|r| r.n_failed as f64 / (r.n_used + r.n_failed).max(1) as f64)
            .fold(0.0, f64::max)
    }
}

/// Runs every replicate of a scenario on `workers` threads. Replicates are
/// split into contiguous blocks; each block yields raw rows and a partial
/// summary, merged in block order, so the output does not depend on the
/// number of workers.
pub fn run_scenario(config: &ScenarioConfig, workers: usize) -> Result<ScenarioOutput> {
    if workers == 0 {
        return Err(Error::InvalidInput("worker count must be at least 1".to_string()));
    }
    let cells = plan_cells(config)?;
    let n = config.replicates;
    let blocks = (workers as u64 * 4).min(n).max(1);
    let ranges: Vec<(u64, u64)> = (0..blocks).map(|b| (b * n / blocks, (b + 1) * n / blocks)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    let parts: Vec<Result<(Vec<ReplicateRow>, PartialSummary)>> = pool.install(|| {
        ranges
            .par_iter()
            .map(|&(lo, hi)| {
                let mut rows = Vec::new();
                let mut partial = PartialSummary::new();
                for i in lo..hi {
                    let block = outcome_rows(&config.scenario_id, i, &run_replicate(config, &cells, i));
                    for r in &block {
                        partial.add(r)?;
                    }
                    rows.extend(block);
                }
                Ok((rows, partial))
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut summary = PartialSummary::new();
    for part in parts {
        let (r, p) = part?;
        rows.extend(r);
        summary.merge(p)?;
    }
    let summary = summary.finalize(config.theta_treat)?;
    Ok(ScenarioOutput { rows, summary })
}
