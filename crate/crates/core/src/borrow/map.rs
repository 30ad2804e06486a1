//! Meta-analytic-predictive priors from historical study summaries, their
//! robust mixtures, and the MAP, PSM+MAP and PSW+MAP estimators.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::grid::{from_masses, likelihood_product, DifferencePosterior, GridDensity, UniformGrid};
use crate::dist::{mean, normal_cdf, sample_sd};
use crate::error::{invalid, Error, Result};
use crate::metrics::{EffectEstimate, MethodId};
use crate::propensity::{ipw_weights, match_nearest, Caliper, PsFit, TrimBounds};
use crate::trialdata::{SubjectRecord, TrialDataset};

pub const THETA_GRID_POINTS: usize = 4001;
pub const TAU_GRID_POINTS: usize = 201;

/// Mean and standard error of one historical control arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudySummary {
    pub mean: f64,
    pub se: f64,
    pub n_effective: f64,
}

impl StudySummary {
    pub fn new(mean: f64, se: f64, n_effective: f64) -> Result<Self> {
        if !mean.is_finite() || !(se > 0.0) || !se.is_finite() {
            return invalid(format!("study summary needs a finite mean and se > 0, got ({mean}, {se})"));
        }
        Ok(StudySummary { mean, se, n_effective })
    }

    /// Raw mean and `sd / sqrt(n)` of the outcomes.
    pub fn from_outcomes(y: &[f64]) -> Result<Self> {
        if y.len() < 2 {
            return invalid(format!("study summary needs at least 2 outcomes, got {}", y.len()));
        }
        Self::new(mean(y), sample_sd(y) / (y.len() as f64).sqrt(), y.len() as f64)
    }

    /// Weighted mean with the HC0 robust SE scaled by `n / (n - 1)`, which
    /// reduces to `sd / sqrt(n)` for unit weights.
    pub fn weighted(y: &[f64], w: &[f64]) -> Result<Self> {
        let pairs: Vec<(f64, f64)> = y.iter().zip(w).filter(|(_, &w)| w > 0.0).map(|(&y, &w)| (y, w)).collect();
        let n = pairs.len();
        if n < 2 {
            return invalid(format!("weighted summary needs at least 2 positive weights, got {n}"));
        }
        let sw: f64 = pairs.iter().map(|p| p.1).sum();
        let sw2: f64 = pairs.iter().map(|p| p.1 * p.1).sum();
        let m = pairs.iter().map(|p| p.0 * p.1).sum::<f64>() / sw;
        let ss: f64 = pairs.iter().map(|(y, w)| w * w * (y - m) * (y - m)).sum();
        let nf = n as f64;
        Self::new(m, (nf / (nf - 1.0) * ss).sqrt() / sw, sw * sw / sw2)
    }

    /// Mean of outcomes that may repeat, with an SE clustered on `cluster`
    /// and scaled by `G / (G - 1)`.
    pub fn clustered(y: &[f64], cluster: &[usize]) -> Result<Self> {
        let mut groups: BTreeMap<usize, f64> = BTreeMap::new();
        let m = mean(y);
        for (&yi, &g) in y.iter().zip(cluster) {
            *groups.entry(g).or_default() += yi - m;
        }
        let g = groups.len();
        if g < 2 {
            return invalid(format!("clustered summary needs at least 2 clusters, got {g}"));
        }
        let n = y.len() as f64;
        let gf = g as f64;
        let meat: f64 = groups.values().map(|s| s * s).sum();
        Self::new(m, (gf / (gf - 1.0) * meat).sqrt() / n, gf)
    }
}

/// Points of the τ grid: zero followed by a geometric sequence from
/// `1e-4 * tau_max` to `tau_max`.
pub fn tau_grid(tau_max: f64) -> Vec<f64> {
    let n = TAU_GRID_POINTS - 1;
    let lo = 1e-4 * tau_max;
    let ratio = (tau_max / lo).powf(1.0 / (n - 1) as f64);
    std::iter::once(0.0)
        .chain((0..n).map(|i| lo * ratio.powi(i as i32)))
        .collect()
}

/// One normal component of the predictive mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveComponent {
    pub weight: f64,
    pub mean: f64,
    pub sd: f64,
}

/// Posterior-predictive mixture for a new study mean under the normal
/// hierarchical model with a flat prior on μ and a half-normal prior on τ.
pub fn predictive_components(studies: &[StudySummary], tau_scale: f64) -> Result<Vec<PredictiveComponent>> {
    if studies.is_empty() {
        return invalid("MAP prior needs at least one study");
    }
    if !(tau_scale > 0.0) || !tau_scale.is_finite() {
        return invalid(format!("tau scale must be positive, got {tau_scale}"));
    }
    let taus = tau_grid(10.0 * tau_scale);
    let mut log_w = Vec::with_capacity(taus.len());
    let mut comps = Vec::with_capacity(taus.len());
    for (j, &tau) in taus.iter().enumerate() {
        let t2 = tau * tau;
        let (mut prec, mut wy, mut ln_det) = (0.0, 0.0, 0.0);
        for s in studies {
            let v = s.se * s.se + t2;
            prec += 1.0 / v;
            wy += s.mean / v;
            ln_det += v.ln();
        }
        let mu_hat = wy / prec;
        let v_mu = 1.0 / prec;
        let q: f64 = studies.iter().map(|s| (s.mean - mu_hat).powi(2) / (s.se * s.se + t2)).sum();
        let ln_lik = -0.5 * ln_det + 0.5 * v_mu.ln() - 0.5 * q;
        let ln_prior = -0.5 * t2 / (tau_scale * tau_scale);
        let width = match j {
            0 => 0.5 * (taus[1] - taus[0]),
            _ if j + 1 == taus.len() => 0.5 * (taus[j] - taus[j - 1]),
            _ => 0.5 * (taus[j + 1] - taus[j - 1]),
        };
        log_w.push(ln_lik + ln_prior + width.ln());
        comps.push(PredictiveComponent { weight: 0.0, mean: mu_hat, sd: (v_mu + t2).sqrt() });
    }
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (c, lw) in comps.iter_mut().zip(&log_w) {
        c.weight = (lw - max).exp();
        total += c.weight;
    }
    comps.retain(|c| c.weight > 1e-14 * total);
    let total: f64 = comps.iter().map(|c| c.weight).sum();
    comps.iter_mut().for_each(|c| c.weight /= total);
    Ok(comps)
}

/// Grid bounds covering the prior, the data likelihood and the vague
/// component.
fn theta_range(studies: &[StudySummary], tau_scale: f64, data: Option<(f64, f64)>, vague: (f64, f64)) -> (f64, f64) {
    let prec: f64 = studies.iter().map(|s| 1.0 / (s.se * s.se)).sum();
    let pooled = studies.iter().map(|s| s.mean / (s.se * s.se)).sum::<f64>() / prec;
    let (min_mean, max_mean) = studies
        .iter()
        .fold((pooled, pooled), |(lo, hi), s| (lo.min(s.mean), hi.max(s.mean)));
    let max_se = studies.iter().map(|s| s.se).fold(0.0, f64::max);
    let half = 10.0 * (max_se + tau_scale);
    let mut lo = min_mean.min(pooled) - half;
    let mut hi = max_mean.max(pooled) + half;
    if let Some((m, s)) = data {
        lo = lo.min(m - 10.0 * s);
        hi = hi.max(m + 10.0 * s);
    }
    lo = lo.min(vague.0 - 8.0 * vague.1);
    hi = hi.max(vague.0 + 8.0 * vague.1);
    (lo, hi)
}

/// MAP prior on a grid. `data` widens the grid to cover a control-arm
/// likelihood and `vague` to cover the robust component.
pub fn map_prior(
    studies: &[StudySummary],
    tau_scale: f64,
    data: Option<(f64, f64)>,
    vague: (f64, f64),
) -> Result<GridDensity> {
    let comps = predictive_components(studies, tau_scale)?;
    let (lo, hi) = theta_range(studies, tau_scale, data, vague);
    let grid = UniformGrid::new(lo, hi, THETA_GRID_POINTS)?;
    let mut density = vec![0.0; grid.len()];
    for c in &comps {
        grid.add_normal(c.mean, c.sd, c.weight, &mut density);
    }
    GridDensity::from_density(grid, density)
}

/// Multiplier applied to the empirical τ scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauLevel {
    L,
    M,
    S,
    XS,
    Factor(f64),
}

impl TauLevel {
    pub fn multiplier(self) -> f64 {
        match self {
            TauLevel::L => 10.0,
            TauLevel::M => 1.0,
            TauLevel::S => 0.1,
            TauLevel::XS => 0.01,
            TauLevel::Factor(f) => f,
        }
    }
}

impl fmt::Display for TauLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TauLevel::L => f.write_str("L"),
            TauLevel::M => f.write_str("M"),
            TauLevel::S => f.write_str("S"),
            TauLevel::XS => f.write_str("XS"),
            TauLevel::Factor(x) => write!(f, "x{x}"),
        }
    }
}

impl FromStr for TauLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "L" => Ok(TauLevel::L),
            "M" => Ok(TauLevel::M),
            "S" => Ok(TauLevel::S),
            "XS" => Ok(TauLevel::XS),
            other => other
                .strip_prefix('x')
                .and_then(|f| f.parse::<f64>().ok())
                .filter(|f| *f > 0.0)
                .map(TauLevel::Factor)
                .ok_or_else(|| Error::InvalidInput(format!("unknown tau level `{other}` (use L, M, S, XS or x<factor>)"))),
        }
    }
}

/// Empirical τ scale: SD of the study means for two or more studies, the
/// study SE for a single study, falling back to the mean SE when zero.
pub fn empirical_tau_scale(studies: &[StudySummary]) -> f64 {
    let base = if studies.len() >= 2 {
        sample_sd(&studies.iter().map(|s| s.mean).collect::<Vec<_>>())
    } else {
        studies[0].se
    };
    if base > 0.0 && base.is_finite() {
        base
    } else {
        studies.iter().map(|s| s.se).sum::<f64>() / studies.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapConfig {
    pub omega: f64,
    pub tau: TauLevel,
    pub alpha: f64,
}

impl MapConfig {
    pub fn label(&self) -> String {
        format!("tau={};omega={}", self.tau, self.omega)
    }
}

/// Normal summary of one concurrent arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmSummary {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl ArmSummary {
    pub fn from_subjects<'a>(subjects: impl Iterator<Item = &'a SubjectRecord>) -> Result<Self> {
        let y: Vec<f64> = subjects.map(|s| s.y).collect();
        if y.len() < 2 {
            return invalid(format!("arm summary needs at least 2 subjects, got {}", y.len()));
        }
        Ok(ArmSummary { mean: mean(&y), se: sample_sd(&y) / (y.len() as f64).sqrt(), n: y.len() })
    }
}

/// Robust-MAP analysis of one dataset with a fixed prior; evaluating several
/// robust weights reuses the prior-times-likelihood products.
#[derive(Debug, Clone)]
pub struct MapAnalysis {
    prior: Option<GridDensity>,
    vague: GridDensity,
    vague_mean: f64,
    vague_sd: f64,
    prior_lik: Vec<f64>,
    vague_lik: Vec<f64>,
    prior_z: f64,
    vague_z: f64,
    pub control: ArmSummary,
    pub treated: ArmSummary,
    pub tau_scale: f64,
    pub n_studies: usize,
}

impl MapAnalysis {
    /// `studies` may be empty, in which case only the vague component is
    /// available (equivalent to robust weight 1).
    pub fn new(
        studies: &[StudySummary],
        tau_scale: f64,
        control: ArmSummary,
        treated: ArmSummary,
        vague_mean: f64,
        vague_sd: f64,
    ) -> Result<Self> {
        if !(vague_sd > 0.0) || !vague_mean.is_finite() {
            return invalid(format!("vague component needs finite mean and sd > 0, got ({vague_mean}, {vague_sd})"));
        }
        let data = (control.mean, control.se);
        let prior = if studies.is_empty() {
            None
        } else {
            Some(map_prior(studies, tau_scale, Some(data), (vague_mean, vague_sd))?)
        };
        let grid = match &prior {
            Some(p) => p.grid().clone(),
            None => UniformGrid::new(
                (data.0 - 10.0 * data.1).min(vague_mean - 8.0 * vague_sd),
                (data.0 + 10.0 * data.1).max(vague_mean + 8.0 * vague_sd),
                THETA_GRID_POINTS,
            )?,
        };
        let vague = GridDensity::normal(grid, vague_mean, vague_sd)?;
        // Both products share the same shift because it only depends on the
        // grid and the data.
        let (vague_lik, _) = likelihood_product(&vague, data.0, data.1)?;
        let prior_lik = match &prior {
            Some(p) => likelihood_product(p, data.0, data.1)?.0,
            None => vec![0.0; vague_lik.len()],
        };
        let prior_z = prior_lik.iter().sum();
        let vague_z = vague_lik.iter().sum();
        Ok(MapAnalysis {
            prior,
            vague,
            vague_mean,
            vague_sd,
            prior_lik,
            vague_lik,
            prior_z,
            vague_z,
            control,
            treated,
            tau_scale,
            n_studies: studies.len(),
        })
    }

    pub fn prior(&self) -> Option<&GridDensity> {
        self.prior.as_ref()
    }

    pub fn vague(&self) -> (f64, f64) {
        (self.vague_mean, self.vague_sd)
    }

    /// Robust prior for weight `omega`.
    pub fn robust_prior(&self, omega: f64) -> Result<GridDensity> {
        match &self.prior {
            Some(p) => p.robustify(omega, self.vague_mean, self.vague_sd),
            None => Ok(self.vague.clone()),
        }
    }

    /// Control-arm posterior under the robust prior with weight `omega`.
    pub fn control_posterior(&self, omega: f64) -> Result<GridDensity> {
        if !(0.0..=1.0).contains(&omega) {
            return invalid(format!("omega must lie in [0, 1], got {omega}"));
        }
        let omega = if self.prior.is_none() { 1.0 } else { omega };
        let z = (1.0 - omega) * self.prior_z + omega * self.vague_z;
        if !(z > 0.0) {
            return Err(Error::GridUnderflow(format!(
                "no posterior mass for control mean {} (se {})",
                self.control.mean, self.control.se
            )));
        }
        let density: Vec<f64> = self
            .prior_lik
            .iter()
            .zip(&self.vague_lik)
            .map(|(p, v)| ((1.0 - omega) * p + omega * v) / z)
            .collect();
        Ok(from_masses(self.vague.grid().clone(), density))
    }

    /// Moment-based prior effective sample size in units of the vague SD.
    pub fn prior_ess(&self, omega: f64) -> Result<f64> {
        let v = self.robust_prior(omega)?.variance();
        Ok(self.vague_sd * self.vague_sd / v)
    }

    pub fn estimate(&self, method: MethodId, omega: f64, alpha: f64) -> Result<EffectEstimate> {
        let post = self.control_posterior(omega)?;
        effect_posterior(method, &post, self.treated.mean, self.treated.se, alpha)
    }
}

/// Effect `T - C` from a control posterior on the grid and a normal treated
/// arm; rejects when the central `1 - alpha` credible interval excludes zero.
pub fn effect_posterior(
    method: MethodId,
    control_post: &GridDensity,
    treated_mean: f64,
    treated_se: f64,
    alpha: f64,
) -> Result<EffectEstimate> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    let diff = DifferencePosterior::new(control_post, treated_mean, treated_se)?;
    let lo = diff.quantile(alpha / 2.0);
    let hi = diff.quantile(1.0 - alpha / 2.0);
    let p0 = diff.cdf(0.0);
    Ok(EffectEstimate {
        method,
        covset: None,
        hyperparam: String::new(),
        estimate: diff.mean,
        se: diff.sd,
        reject: p0 < alpha / 2.0 || p0 > 1.0 - alpha / 2.0,
        interval: (lo, hi),
        var_for_essr: diff.sd * diff.sd,
        flags: Vec::new(),
    })
}

/// Summaries shared by every MAP-family estimator on one dataset.
#[derive(Debug, Clone)]
pub struct MapInputs {
    pub studies: Vec<StudySummary>,
    pub control: ArmSummary,
    pub treated: ArmSummary,
    pub vague_mean: f64,
    pub vague_sd: f64,
    pub flags: Vec<String>,
}

impl MapInputs {
    fn new(dataset: &TrialDataset, studies: Vec<StudySummary>, mut flags: Vec<String>) -> Result<Self> {
        let control = ArmSummary::from_subjects(dataset.reduced_concurrent.iter().filter(|s| !s.treated))?;
        let treated = ArmSummary::from_subjects(dataset.reduced_concurrent.iter().filter(|s| s.treated))?;
        let hist_y: Vec<f64> = dataset.historical_subjects().map(|s| s.y).collect();
        if hist_y.len() < 2 {
            return invalid("MAP analysis needs at least 2 historical controls");
        }
        let vague_sd = sample_sd(&hist_y);
        let vague_mean = if studies.is_empty() {
            flags.push("no usable historical summaries; robust weight forced to 1".to_string());
            mean(&hist_y)
        } else {
            let prec: f64 = studies.iter().map(|s| 1.0 / (s.se * s.se)).sum();
            studies.iter().map(|s| s.mean / (s.se * s.se)).sum::<f64>() / prec
        };
        Ok(MapInputs { studies, control, treated, vague_mean, vague_sd, flags })
    }

    pub fn empirical_tau(&self) -> Option<f64> {
        (!self.studies.is_empty()).then(|| empirical_tau_scale(&self.studies))
    }

    pub fn analysis(&self, tau: TauLevel) -> Result<MapAnalysis> {
        let scale = self.empirical_tau().map_or(1.0, |t| t * tau.multiplier());
        MapAnalysis::new(&self.studies, scale, self.control, self.treated, self.vague_mean, self.vague_sd)
    }
}

/// Raw per-trial control means and SEs.
pub fn map_inputs(dataset: &TrialDataset) -> Result<MapInputs> {
    let studies = dataset
        .historical
        .iter()
        .map(|h| StudySummary::from_outcomes(&h.iter().map(|s| s.y).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    MapInputs::new(dataset, studies, Vec::new())
}

/// Per-trial summaries of historical controls matched to the reduced
/// concurrent trial; trials with fewer than two distinct matches are omitted.
pub fn psm_map_inputs<R: Rng + ?Sized>(
    dataset: &TrialDataset,
    psfit: &PsFit,
    caliper: Caliper,
    rng: &mut R,
) -> Result<MapInputs> {
    let concurrent: Vec<usize> = dataset.reduced_concurrent.iter().map(|s| s.id).collect();
    let mut studies = Vec::new();
    let mut flags = Vec::new();
    for (j, trial) in dataset.historical.iter().enumerate() {
        let ids: Vec<usize> = trial.iter().map(|s| s.id).collect();
        let ms = match_nearest(psfit, &concurrent, &ids, caliper, rng)?;
        let by_id: BTreeMap<usize, f64> = trial.iter().map(|s| (s.id, s.y)).collect();
        let y: Vec<f64> = ms.pairs.iter().map(|(_, h)| by_id[h]).collect();
        let cl: Vec<usize> = ms.pairs.iter().map(|(_, h)| *h).collect();
        match StudySummary::clustered(&y, &cl) {
            Ok(s) => studies.push(s),
            Err(_) => flags.push(format!("historical trial {} has too few matches; omitted", j + 1)),
        }
    }
    MapInputs::new(dataset, studies, flags)
}

/// Per-trial trimmed inverse-probability-weighted summaries.
pub fn psw_map_inputs(dataset: &TrialDataset, psfit: &PsFit, bounds: TrimBounds) -> Result<MapInputs> {
    let ws = ipw_weights(psfit, bounds);
    let mut studies = Vec::new();
    let mut flags = Vec::new();
    for (j, trial) in dataset.historical.iter().enumerate() {
        let mut y = Vec::with_capacity(trial.len());
        let mut w = Vec::with_capacity(trial.len());
        for s in trial {
            y.push(s.y);
            w.push(ws.weights[psfit.position(s.id)?]);
        }
        match StudySummary::weighted(&y, &w) {
            Ok(s) => studies.push(s),
            Err(_) => flags.push(format!("historical trial {} fully trimmed; omitted", j + 1)),
        }
    }
    MapInputs::new(dataset, studies, flags)
}

/// Runs one MAP-family cell: builds the analysis for `cfg.tau` and evaluates
/// robust weight `cfg.omega`.
pub fn estimate_from_inputs(method: MethodId, inputs: &MapInputs, cfg: &MapConfig) -> Result<EffectEstimate> {
    let analysis = inputs.analysis(cfg.tau)?;
    finish(method, inputs, &analysis, cfg)
}

pub(crate) fn finish(method: MethodId, inputs: &MapInputs, analysis: &MapAnalysis, cfg: &MapConfig) -> Result<EffectEstimate> {
    let mut est = analysis.estimate(method, cfg.omega, cfg.alpha)?.with_hyperparam(cfg.label());
    est.flags.extend(inputs.flags.iter().cloned());
    Ok(est)
}

pub fn estimate_map(dataset: &TrialDataset, cfg: &MapConfig) -> Result<EffectEstimate> {
    estimate_from_inputs(MethodId::Map, &map_inputs(dataset)?, cfg)
}

pub fn estimate_psm_map<R: Rng + ?Sized>(
    dataset: &TrialDataset,
    psfit: &PsFit,
    caliper: Caliper,
    cfg: &MapConfig,
    rng: &mut R,
) -> Result<EffectEstimate> {
    let inputs = psm_map_inputs(dataset, psfit, caliper, rng)?;
    Ok(estimate_from_inputs(MethodId::PsmMap, &inputs, cfg)?.with_covset(psfit.covset))
}

pub fn estimate_psw_map(
    dataset: &TrialDataset,
    psfit: &PsFit,
    bounds: TrimBounds,
    cfg: &MapConfig,
) -> Result<EffectEstimate> {
    let inputs = psw_map_inputs(dataset, psfit, bounds)?;
    Ok(estimate_from_inputs(MethodId::PswMap, &inputs, cfg)?.with_covset(psfit.covset))
}

/// Normal CDF of the predictive mixture, used by tests and diagnostics.
pub fn mixture_cdf(components: &[PredictiveComponent], x: f64) -> f64 {
    components.iter().map(|c| c.weight * normal_cdf((x - c.mean) / c.sd)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propensity::{estimate_ps, CovSet};
    use crate::regress::estimate_unadjusted;
    use crate::trialdata::{build_replicate, GenCoefficients};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn study(mean: f64, se: f64) -> StudySummary {
        StudySummary::new(mean, se, 1.0).unwrap()
    }

    #[test]
    fn tau_grid_shape() {
        let t = tau_grid(5.0);
        assert_eq!(t.len(), TAU_GRID_POINTS);
        assert_eq!(t[0], 0.0);
        assert!((t[1] - 5e-4).abs() < 1e-15);
        assert!((t[200] - 5.0).abs() < 1e-9);
        assert!(t.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn single_study_with_vanishing_tau_is_its_likelihood() {
        let p = map_prior(&[study(0.4, 0.1)], 1e-6, None, (0.4, 1.0)).unwrap();
        assert!((p.mean() - 0.4).abs() < 1e-4);
        assert!((p.sd() / 0.1 - 1.0).abs() < 0.01);
    }

    #[test]
    fn identical_studies_pool_precision() {
        let s = [study(0.0, 1.0), study(0.0, 1.0), study(0.0, 1.0)];
        let p = map_prior(&s, 1e-6, None, (0.0, 1.0)).unwrap();
        assert!(p.mean().abs() < 1e-6);
        assert!((p.sd() * 3f64.sqrt() - 1.0).abs() < 0.01);
    }

    #[test]
    fn prior_matches_two_dimensional_quadrature() {
        let s = [study(-0.5, 0.2), study(0.0, 0.2), study(0.5, 0.2)];
        let p = map_prior(&s, 0.5, None, (0.0, 1.0)).unwrap();

        // Brute-force posterior over (mu, tau) with a half-normal prior on
        // tau and a flat prior on mu; the predictive theta has mean E[mu]
        // and variance E[tau^2] + Var[mu].
        let (nm, nt) = (1500, 3000);
        let (mut z, mut m1, mut m2, mut t2) = (0.0, 0.0, 0.0, 0.0);
        for it in 0..nt {
            let tau = (it as f64 + 0.5) * 6.0 / nt as f64;
            let prior_t = (-0.5 * tau * tau / 0.25).exp();
            for im in 0..nm {
                let mu = -4.0 + (im as f64 + 0.5) * 8.0 / nm as f64;
                let mut ll = 0.0;
                for st in &s {
                    let v = st.se * st.se + tau * tau;
                    ll += -0.5 * (st.mean - mu).powi(2) / v - 0.5 * v.ln();
                }
                let w = prior_t * ll.exp();
                z += w;
                m1 += w * mu;
                m2 += w * mu * mu;
                t2 += w * tau * tau;
            }
        }
        let mean = m1 / z;
        let var = m2 / z - mean * mean + t2 / z;
        assert!(p.mean().abs() < 0.01 * var.sqrt());
        assert!((p.sd() / var.sqrt() - 1.0).abs() < 0.01, "{} vs {}", p.sd(), var.sqrt());
    }

    #[test]
    fn predictive_sd_grows_with_tau_scale() {
        let s = [study(-0.3, 0.1), study(0.2, 0.15), study(0.9, 0.1)];
        let mut last = 0.0;
        for scale in [0.001, 0.01, 0.1, 0.3, 1.0, 3.0, 10.0] {
            let sd = map_prior(&s, scale, None, (0.3, 1.0)).unwrap().sd();
            assert!(sd >= last - 1e-12, "scale {scale}: {sd} < {last}");
            last = sd;
        }
    }

    #[test]
    fn weighted_summary_with_unit_weights_is_raw_summary() {
        let y = [1.0, 2.5, 0.3, -0.7, 1.1];
        let a = StudySummary::from_outcomes(&y).unwrap();
        let b = StudySummary::weighted(&y, &[1.0; 5]).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-15);
        assert!((a.se - b.se).abs() < 1e-15);
        let w = [2.0, 1.0, 0.0, 0.5, 1.0];
        let c = StudySummary::weighted(&y, &w).unwrap();
        let hand = (2.0 * 1.0 + 2.5 + 0.5 * -0.7 + 1.1) / 4.5;
        assert!((c.mean - hand).abs() < 1e-15);
    }

    #[test]
    fn clustered_summary_of_distinct_rows_is_raw_summary() {
        let y = [1.0, 2.5, 0.3, -0.7, 1.1];
        let a = StudySummary::from_outcomes(&y).unwrap();
        let b = StudySummary::clustered(&y, &[0, 1, 2, 3, 4]).unwrap();
        assert!((a.se - b.se).abs() < 1e-14);
        assert!(StudySummary::clustered(&y, &[1; 5]).is_err());
    }

    fn replicate(preset: &str, seed: u64) -> TrialDataset {
        let c = GenCoefficients::preset(preset).unwrap();
        build_replicate(&c, c.default_n_total(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn full_robust_weight_tracks_concurrent_analysis() {
        let ds = replicate("single-moderate", 3);
        let cfg = MapConfig { omega: 1.0, tau: TauLevel::M, alpha: 0.05 };
        let est = estimate_map(&ds, &cfg).unwrap();
        let rc = estimate_unadjusted(&ds, false, 0.05).unwrap();
        assert!((est.estimate - rc.estimate).abs() < 0.01);
        assert!(est.interval.0 < est.estimate && est.estimate < est.interval.1);
        assert_eq!(est.hyperparam, "tau=M;omega=1");
    }

    #[test]
    fn analysis_matches_explicit_pipeline() {
        let ds = replicate("multi-moderate", 5);
        let inputs = map_inputs(&ds).unwrap();
        let an = inputs.analysis(TauLevel::S).unwrap();
        for omega in [0.0, 0.2, 0.5, 1.0] {
            let fast = an.control_posterior(omega).unwrap();
            let slow = an
                .robust_prior(omega)
                .unwrap()
                .posterior_update(inputs.control.mean, inputs.control.se)
                .unwrap();
            for (a, b) in fast.mass().iter().zip(slow.mass()) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn posterior_sd_grows_with_robust_weight_for_agreeing_data() {
        let control = ArmSummary { mean: 0.02, se: 0.1, n: 100 };
        let treated = ArmSummary { mean: 0.3, se: 0.07, n: 200 };
        let an = MapAnalysis::new(&[study(0.0, 0.05)], 0.05, control, treated, 0.0, 1.0).unwrap();
        let mut last = 0.0;
        for omega in [0.0, 0.2, 0.5, 0.8, 1.0] {
            let se = an.estimate(MethodId::Map, omega, 0.05).unwrap().se;
            assert!(se > last);
            last = se;
        }
        assert!(an.prior_ess(0.0).unwrap() > an.prior_ess(1.0).unwrap());
        assert!((an.prior_ess(1.0).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn unit_weight_psw_map_equals_map() {
        let ds = replicate("single-moderate", 21);
        let ids: Vec<(usize, usize, f64)> = ds
            .reduced_concurrent
            .iter()
            .chain(ds.historical_subjects())
            .map(|s| (s.id, s.trial, 0.5))
            .collect();
        let fit = PsFit::from_scores(&ids).unwrap();
        let cfg = MapConfig { omega: 0.5, tau: TauLevel::M, alpha: 0.05 };
        let a = estimate_psw_map(&ds, &fit, TrimBounds::default(), &cfg).unwrap();
        let b = estimate_map(&ds, &cfg).unwrap();
        assert!((a.estimate - b.estimate).abs() < 1e-12);
        assert!((a.se - b.se).abs() < 1e-12);
    }

    #[test]
    fn psm_map_runs_on_every_covset() {
        let ds = replicate("multi-severe", 2);
        for cs in CovSet::ALL {
            let fit = estimate_ps(&ds, cs).unwrap();
            let cfg = MapConfig { omega: 0.5, tau: TauLevel::XS, alpha: 0.05 };
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let est = estimate_psm_map(&ds, &fit, Caliper::default(), &cfg, &mut rng).unwrap();
            assert!(est.se > 0.0 && est.estimate.is_finite());
            assert_eq!(est.covset, Some(cs));
        }
    }

    #[test]
    fn no_studies_means_vague_only() {
        let control = ArmSummary { mean: 1.0, se: 0.1, n: 100 };
        let treated = ArmSummary { mean: 1.2, se: 0.08, n: 200 };
        let an = MapAnalysis::new(&[], 1.0, control, treated, 1.0, 1.0).unwrap();
        let a = an.estimate(MethodId::Map, 0.0, 0.05).unwrap();
        let b = an.estimate(MethodId::Map, 1.0, 0.05).unwrap();
        assert_eq!(a, b);
        let post_var: f64 = 1.0 / (1.0 / 0.01 + 1.0);
        assert!((a.se - (0.0064f64 + post_var).sqrt()).abs() < 1e-8);
    }

    #[test]
    fn mixture_cdf_is_a_distribution() {
        let c = predictive_components(&[study(0.0, 0.3), study(1.0, 0.3)], 0.5).unwrap();
        assert!((c.iter().map(|c| c.weight).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(mixture_cdf(&c, -50.0) < 1e-12);
        assert!((mixture_cdf(&c, 50.0) - 1.0).abs() < 1e-12);
    }
}
