//! Propensity scores for concurrent-trial membership, and the three ways they
//! are used: nearest-neighbour matching with replacement, inverse-probability
//! weighting with trimming, and quantile stratification.
//!
//! The propensity pool is the reduced concurrent trial (both arms) plus every
//! historical control. A subject's score is its estimated probability of
//! belonging to the concurrent trial.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dist::{expit, logit, sample_sd};
use crate::error::{invalid, Error, Result};
use crate::metrics::{EffectEstimate, MethodId};
use crate::regress::{estimate_unadjusted, fit_logistic, fit_ols, sandwich_se, Design};
use crate::trialdata::{SubjectRecord, TrialDataset, CONCURRENT};

/// Covariates entering the propensity (and mixed) models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CovSet {
    /// x1 to x6.
    One,
    /// x1 to x6 without x4.
    Two,
    /// x1, x2 and x3.
    Three,
}

impl CovSet {
    pub const ALL: [CovSet; 3] = [CovSet::One, CovSet::Two, CovSet::Three];

    pub fn id(self) -> u8 {
        match self {
            CovSet::One => 1,
            CovSet::Two => 2,
            CovSet::Three => 3,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(CovSet::One),
            2 => Ok(CovSet::Two),
            3 => Ok(CovSet::Three),
            _ => invalid(format!("covariate set must be 1, 2 or 3, got {id}")),
        }
    }

    /// Zero-based covariate indices.
    pub fn columns(self) -> &'static [usize] {
        match self {
            CovSet::One => &[0, 1, 2, 3, 4, 5],
            CovSet::Two => &[0, 1, 2, 4, 5],
            CovSet::Three => &[0, 1, 2],
        }
    }

    pub fn labels(self) -> Vec<String> {
        self.columns().iter().map(|c| format!("x{}", c + 1)).collect()
    }
}

impl fmt::Display for CovSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())
    }
}

impl FromStr for CovSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let id: u8 = s
            .trim()
            .parse()
            .map_err(|_| Error::InvalidInput(format!("covariate set must be 1, 2 or 3, got `{s}`")))?;
        CovSet::from_id(id)
    }
}

/// Design matrix with an intercept and the covariates of `covset`.
pub(crate) fn covariate_design(subjects: &[&SubjectRecord], covset: CovSet) -> Result<Design> {
    let labels = covset.labels();
    let cols: Vec<(&str, Vec<f64>)> = covset
        .columns()
        .iter()
        .zip(&labels)
        .map(|(&c, name)| (name.as_str(), subjects.iter().map(|s| s.x[c]).collect()))
        .collect();
    Design::with_intercept(subjects.len(), &cols)
}

/// Fitted propensity scores over the pooled sample.
#[derive(Debug, Clone)]
pub struct PsFit {
    pub covset: Option<CovSet>,
    pub ids: Vec<usize>,
    pub trial: Vec<usize>,
    pub ps: Vec<f64>,
    pub logit_ps: Vec<f64>,
    position: HashMap<usize, usize>,
}

impl PsFit {
    /// Builds a fit from known scores given as `(id, trial, ps)`.
    pub fn from_scores(entries: &[(usize, usize, f64)]) -> Result<Self> {
        if let Some(&(id, _, p)) = entries.iter().find(|e| !(e.2 > 0.0 && e.2 < 1.0)) {
            return invalid(format!("propensity score of subject {id} is {p}, outside (0, 1)"));
        }
        Self::assemble(
            None,
            entries.iter().map(|e| e.0).collect(),
            entries.iter().map(|e| e.1).collect(),
            entries.iter().map(|e| logit(e.2)).collect(),
        )
    }

    fn assemble(
        covset: Option<CovSet>,
        ids: Vec<usize>,
        trial: Vec<usize>,
        logit_ps: Vec<f64>,
    ) -> Result<Self> {
        let mut position = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if position.insert(id, i).is_some() {
                return invalid(format!("subject id {id} appears twice in the propensity pool"));
            }
        }
        let ps = logit_ps.iter().map(|&l| expit(l)).collect();
        Ok(PsFit { covset, ids, trial, ps, logit_ps, position })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: usize) -> Result<usize> {
        self.position
            .get(&id)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("subject {id} is not in the propensity pool")))
    }

    pub fn ps_of(&self, id: usize) -> Result<f64> {
        Ok(self.ps[self.position(id)?])
    }

    pub fn concurrent_ids(&self) -> Vec<usize> {
        self.ids_where(|t| t == CONCURRENT)
    }

    pub fn historical_ids(&self) -> Vec<usize> {
        self.ids_where(|t| t != CONCURRENT)
    }

    pub fn trial_ids(&self, trial: usize) -> Vec<usize> {
        self.ids_where(|t| t == trial)
    }

    fn ids_where(&self, pred: impl Fn(usize) -> bool) -> Vec<usize> {
        self.ids
            .iter()
            .zip(&self.trial)
            .filter(|(_, &t)| pred(t))
            .map(|(&id, _)| id)
            .collect()
    }

    /// Sample SD of the scores over the whole pool.
    pub fn pooled_sd(&self) -> f64 {
        if self.ps.len() < 2 {
            0.0
        } else {
            sample_sd(&self.ps)
        }
    }
}

/// Logistic regression of concurrent membership on the covariates of
/// `covset` over reduced concurrent subjects plus all historical controls.
pub fn estimate_ps(dataset: &TrialDataset, covset: CovSet) -> Result<PsFit> {
    let pool: Vec<&SubjectRecord> = dataset
        .reduced_concurrent
        .iter()
        .chain(dataset.historical_subjects())
        .collect();
    if dataset.historical_subjects().next().is_none() {
        return invalid("propensity model needs at least one historical subject");
    }
    if dataset.reduced_concurrent.is_empty() {
        return invalid("propensity model needs at least one concurrent subject");
    }
    let design = covariate_design(&pool, covset)?;
    let membership: Vec<bool> = pool.iter().map(|s| s.is_concurrent()).collect();
    let fit = fit_logistic(&design, &membership, None)?;
    let eta = design.matrix() * &fit.coef;
    PsFit::assemble(
        Some(covset),
        pool.iter().map(|s| s.id).collect(),
        pool.iter().map(|s| s.trial).collect(),
        eta.iter().copied().collect(),
    )
}

/// Maximum admissible score distance for a match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Caliper {
    /// Multiple of the pooled score SD.
    PooledSd(f64),
    /// Absolute width on the probability scale.
    Raw(f64),
}

impl Default for Caliper {
    fn default() -> Self {
        Caliper::PooledSd(0.2)
    }
}

impl Caliper {
    pub fn width(self, psfit: &PsFit) -> f64 {
        match self {
            Caliper::PooledSd(mult) => mult * psfit.pooled_sd(),
            Caliper::Raw(w) => w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    /// `(concurrent_id, historical_id)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub distances: Vec<f64>,
    pub unmatched_concurrent: Vec<usize>,
    pub caliper_width: f64,
}

/// Matches every concurrent subject to its nearest historical subject by
/// score, with replacement. Pairs farther apart than the caliper are
/// discarded. Equidistant candidates are resolved by their rank in a seeded
/// shuffle of `historical_ids`.
pub fn match_nearest<R: Rng + ?Sized>(
    psfit: &PsFit,
    concurrent_ids: &[usize],
    historical_ids: &[usize],
    caliper: Caliper,
    rng: &mut R,
) -> Result<MatchSet> {
    let width = caliper.width(psfit);
    if !(width >= 0.0) {
        return invalid(format!("caliper width must be non-negative, got {width}"));
    }
    let mut order = historical_ids.to_vec();
    order.shuffle(rng);
    let mut candidates = Vec::with_capacity(order.len());
    for (rank, &id) in order.iter().enumerate() {
        candidates.push((psfit.ps_of(id)?, rank, id));
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut out = MatchSet { caliper_width: width, ..MatchSet::default() };
    let mut seen = std::collections::HashSet::with_capacity(concurrent_ids.len());
    for &cid in concurrent_ids {
        if !seen.insert(cid) {
            return invalid(format!("concurrent subject {cid} listed twice for matching"));
        }
        let p = psfit.ps_of(cid)?;
        let i = candidates.partition_point(|c| c.0 < p);
        let right = candidates.get(i);
        let left = (i > 0).then(|| {
            let v = candidates[i - 1].0;
            &candidates[candidates.partition_point(|c| c.0 < v)]
        });
        let best = match (left, right) {
            (None, None) => None,
            (Some(l), None) => Some(l),
            (None, Some(r)) => Some(r),
            (Some(l), Some(r)) => {
                let (dl, dr) = (p - l.0, r.0 - p);
                if dl < dr || (dl == dr && l.1 < r.1) {
                    Some(l)
                } else {
                    Some(r)
                }
            }
        };
        match best {
            Some(&(hp, _, hid)) if (hp - p).abs() <= width => {
                out.pairs.push((cid, hid));
                out.distances.push((hp - p).abs());
            }
            _ => out.unmatched_concurrent.push(cid),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrimBounds {
    pub lower: f64,
    pub upper: f64,
}

impl Default for TrimBounds {
    fn default() -> Self {
        TrimBounds { lower: 0.05, upper: 20.0 }
    }
}

/// Per-subject weights aligned with the propensity pool.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub weights: Vec<f64>,
    pub trimmed_ids: Vec<usize>,
}

/// Concurrent subjects get weight 1; historical subjects get the odds
/// `e / (1 - e)` and are trimmed (weight 0) when it falls outside the bounds.
pub fn ipw_weights(psfit: &PsFit, bounds: TrimBounds) -> WeightSet {
    let mut weights = Vec::with_capacity(psfit.len());
    let mut trimmed_ids = Vec::new();
    for i in 0..psfit.len() {
        if psfit.trial[i] == CONCURRENT {
            weights.push(1.0);
            continue;
        }
        let w = psfit.logit_ps[i].exp();
        if w < bounds.lower || w > bounds.upper {
            trimmed_ids.push(psfit.ids[i]);
            weights.push(0.0);
        } else {
            weights.push(w);
        }
    }
    WeightSet { weights, trimmed_ids }
}

/// Stratum labels aligned with the propensity pool; `None` marks historical
/// subjects outside the concurrent score range.
#[derive(Debug, Clone, PartialEq)]
pub struct Strata {
    pub n_strata: usize,
    pub cuts: Vec<f64>,
    pub labels: Vec<Option<usize>>,
}

/// Type-7 sample quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Cuts at the `s / n_strata` quantiles of the concurrent scores; stratum `s`
/// holds scores in `(cut_{s-1}, cut_s]`, with the lowest stratum closed below.
pub fn stratify(psfit: &PsFit, concurrent_ids: &[usize], n_strata: usize) -> Result<Strata> {
    if n_strata < 2 {
        return invalid(format!("need at least 2 strata, got {n_strata}"));
    }
    let mut conc = Vec::with_capacity(concurrent_ids.len());
    for &id in concurrent_ids {
        conc.push(psfit.ps_of(id)?);
    }
    conc.sort_by(f64::total_cmp);
    let mut distinct = conc.clone();
    distinct.dedup();
    if distinct.len() < n_strata {
        return invalid(format!(
            "{} distinct concurrent scores cannot form {n_strata} strata",
            distinct.len()
        ));
    }
    let cuts: Vec<f64> = (1..n_strata)
        .map(|s| quantile_sorted(&conc, s as f64 / n_strata as f64))
        .collect();
    if cuts.windows(2).any(|w| w[0] >= w[1]) {
        return invalid("tied concurrent scores produce coincident stratum cuts");
    }
    let (lo, hi) = (conc[0], conc[conc.len() - 1]);
    let labels = psfit
        .ps
        .iter()
        .map(|&p| (lo..=hi).contains(&p).then(|| cuts.partition_point(|&c| c < p)))
        .collect();
    Ok(Strata { n_strata, cuts, labels })
}

/// Treatment effect from the reduced concurrent trial plus historical
/// controls matched to it. Re-used matches enter as duplicate rows and the
/// SE is clustered on subject id.
pub fn estimate_psm<R: Rng + ?Sized>(
    dataset: &TrialDataset,
    psfit: &PsFit,
    caliper: Caliper,
    alpha: f64,
    rng: &mut R,
) -> Result<EffectEstimate> {
    let concurrent: Vec<usize> = dataset.reduced_concurrent.iter().map(|s| s.id).collect();
    let matches = match_nearest(psfit, &concurrent, &psfit.historical_ids(), caliper, rng)?;
    if matches.pairs.is_empty() {
        let mut est = estimate_unadjusted(dataset, false, alpha)?;
        est.method = MethodId::Psm;
        est.covset = psfit.covset;
        est.flag("no historical matches; concurrent-only fallback");
        return Ok(est);
    }
    let historical: HashMap<usize, &SubjectRecord> =
        dataset.historical_subjects().map(|s| (s.id, s)).collect();
    let mut rows: Vec<&SubjectRecord> = dataset.reduced_concurrent.iter().collect();
    for &(_, hid) in &matches.pairs {
        rows.push(historical[&hid]);
    }
    let (est, se) = treatment_fit(&rows, None, true)?;
    let mut out = EffectEstimate::wald(MethodId::Psm, est, se, alpha)?.with_covset(psfit.covset);
    if !matches.unmatched_concurrent.is_empty() {
        out.flag(format!("{} concurrent unmatched", matches.unmatched_concurrent.len()));
    }
    Ok(out)
}

/// Weighted treatment effect with trimmed inverse-probability weights on the
/// historical controls and an HC0 robust SE.
pub fn estimate_psw(
    dataset: &TrialDataset,
    psfit: &PsFit,
    bounds: TrimBounds,
    alpha: f64,
) -> Result<EffectEstimate> {
    let ws = ipw_weights(psfit, bounds);
    let historical: HashMap<usize, &SubjectRecord> =
        dataset.historical_subjects().map(|s| (s.id, s)).collect();
    let mut rows: Vec<&SubjectRecord> = dataset.reduced_concurrent.iter().collect();
    let mut weights = vec![1.0; rows.len()];
    for (i, &id) in psfit.ids.iter().enumerate() {
        if psfit.trial[i] != CONCURRENT && ws.weights[i] > 0.0 {
            rows.push(historical[&id]);
            weights.push(ws.weights[i]);
        }
    }
    if rows.len() == dataset.reduced_concurrent.len() {
        let mut est = estimate_unadjusted(dataset, false, alpha)?;
        est.method = MethodId::Psw;
        est.covset = psfit.covset;
        est.flag("all historical subjects trimmed; concurrent-only fallback");
        return Ok(est);
    }
    let (est, se) = treatment_fit(&rows, Some(&weights), false)?;
    let mut out = EffectEstimate::wald(MethodId::Psw, est, se, alpha)?.with_covset(psfit.covset);
    if !ws.trimmed_ids.is_empty() {
        out.flag(format!("{} historical trimmed", ws.trimmed_ids.len()));
    }
    Ok(out)
}

/// (Weighted) OLS of outcome on treatment with a sandwich SE, clustered on
/// subject id when `cluster_on_id` is set.
fn treatment_fit(rows: &[&SubjectRecord], weights: Option<&[f64]>, cluster_on_id: bool) -> Result<(f64, f64)> {
    let z: Vec<f64> = rows.iter().map(|s| if s.treated { 1.0 } else { 0.0 }).collect();
    let y: Vec<f64> = rows.iter().map(|s| s.y).collect();
    let design = Design::with_intercept(rows.len(), &[("z", z)])?;
    let fit = fit_ols(&design, &y, weights)?;
    let ids: Vec<usize> = rows.iter().map(|s| s.id).collect();
    let se = sandwich_se(&fit, 1, cluster_on_id.then_some(ids.as_slice()))?;
    Ok((fit.coef[1], se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trialdata::{build_replicate, GenCoefficients};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn subject(id: usize, trial: usize, treated: bool, y: f64) -> SubjectRecord {
        SubjectRecord { id, x: [0.0; 6], treated, trial, y }
    }

    #[test]
    fn covset_columns() {
        assert_eq!(CovSet::One.columns().len(), 6);
        assert!(!CovSet::Two.columns().contains(&3));
        assert_eq!(CovSet::Three.labels(), vec!["x1", "x2", "x3"]);
        assert_eq!("2".parse::<CovSet>().unwrap(), CovSet::Two);
        assert!("4".parse::<CovSet>().is_err());
    }

    #[test]
    fn identical_populations_give_uninformative_scores() {
        // Same covariate law in both trials: the scores carry no information,
        // so the AUC stays near one half.
        let mut coeffs = GenCoefficients::preset("single-moderate").unwrap();
        if let crate::trialdata::Assignment::Single { beta, .. } = &mut coeffs.assignment {
            *beta = [0.0; 6];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = build_replicate(&coeffs, 20_000, &mut rng).unwrap();
        let fit = estimate_ps(&ds, CovSet::One).unwrap();
        let conc: Vec<f64> = fit.concurrent_ids().iter().map(|&i| fit.ps_of(i).unwrap()).collect();
        let hist: Vec<f64> = fit.historical_ids().iter().map(|&i| fit.ps_of(i).unwrap()).collect();
        let auc = auc(&conc, &hist);
        assert!((auc - 0.5).abs() < 0.02, "auc {auc}");
        let frac = conc.len() as f64 / fit.len() as f64;
        let mean_ps = fit.ps.iter().sum::<f64>() / fit.len() as f64;
        assert!((mean_ps - frac).abs() < 1e-6);
    }

    fn auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut all: Vec<(f64, bool)> = pos.iter().map(|&p| (p, true)).chain(neg.iter().map(|&n| (n, false))).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut rank_sum = 0.0;
        for (r, (_, is_pos)) in all.iter().enumerate() {
            if *is_pos {
                rank_sum += (r + 1) as f64;
            }
        }
        let np = pos.len() as f64;
        (rank_sum - np * (np + 1.0) / 2.0) / (np * neg.len() as f64)
    }

    #[test]
    fn covset_three_detects_membership_confounders() {
        let coeffs = GenCoefficients::preset("multi-severe").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ds = build_replicate(&coeffs, 64_000, &mut rng).unwrap();
        let pool: Vec<&SubjectRecord> =
            ds.reduced_concurrent.iter().chain(ds.historical_subjects()).collect();
        let design = covariate_design(&pool, CovSet::Three).unwrap();
        let t: Vec<bool> = pool.iter().map(|s| s.is_concurrent()).collect();
        let fit = fit_logistic(&design, &t, None).unwrap();
        for j in 1..4 {
            assert!((fit.coef[j] / fit.model_se(j)).abs() > 2.0, "x{j}");
        }
    }

    #[test]
    fn no_historical_subjects_is_an_error() {
        let ds = TrialDataset {
            full_concurrent: vec![subject(0, 0, true, 1.0), subject(1, 0, false, 0.0)],
            reduced_concurrent: vec![subject(0, 0, true, 1.0), subject(1, 0, false, 0.0)],
            historical: vec![],
        };
        assert!(estimate_ps(&ds, CovSet::One).is_err());
    }

    fn hand_laid(n_conc: usize, n_hist: usize, seed: u64) -> (PsFit, Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for i in 0..n_conc {
            entries.push((i, 0, rng.random_range(0.05..0.95)));
        }
        for i in 0..n_hist {
            // Coarse values so that exact ties occur.
            let p = (rng.random_range(1..40) as f64) / 41.0;
            entries.push((100 + i, 1, p));
        }
        let fit = PsFit::from_scores(&entries).unwrap();
        (fit, (0..n_conc).collect(), (100..100 + n_hist).collect())
    }

    #[test]
    fn matching_agrees_with_exhaustive_scan() {
        for seed in 0..20 {
            let (fit, conc, hist) = hand_laid(20, 40, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let mut oracle_rng = rng.clone();
            let ms = match_nearest(&fit, &conc, &hist, Caliper::Raw(1.0), &mut rng).unwrap();

            let mut order = hist.clone();
            order.shuffle(&mut oracle_rng);
            let rank: HashMap<usize, usize> = order.iter().enumerate().map(|(r, &id)| (id, r)).collect();
            let mut expected = Vec::new();
            for &c in &conc {
                let p = fit.ps_of(c).unwrap();
                let mut best: Option<(f64, usize, usize)> = None;
                for &h in &hist {
                    let d = (fit.ps_of(h).unwrap() - p).abs();
                    let cand = (d, rank[&h], h);
                    if best.is_none_or(|b| cand.0 < b.0 || (cand.0 == b.0 && cand.1 < b.1)) {
                        best = Some(cand);
                    }
                }
                expected.push((c, best.unwrap().2));
            }
            assert_eq!(ms.pairs, expected, "seed {seed}");
        }
    }

    #[test]
    fn self_matching_has_zero_distance() {
        let mut entries = Vec::new();
        for i in 0..30 {
            let p = 0.1 + 0.025 * i as f64;
            entries.push((i, 0, p));
            entries.push((1000 + i, 1, p));
        }
        let fit = PsFit::from_scores(&entries).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ms = match_nearest(&fit, &fit.concurrent_ids(), &fit.historical_ids(), Caliper::PooledSd(0.0), &mut rng)
            .unwrap();
        assert_eq!(ms.pairs.len(), 30);
        assert!(ms.distances.iter().all(|&d| d == 0.0));
        for (c, h) in ms.pairs {
            assert_eq!(h, c + 1000);
        }
    }

    #[test]
    fn zero_caliper_only_matches_exact_ties() {
        let fit = PsFit::from_scores(&[(0, 0, 0.3), (1, 0, 0.5), (2, 1, 0.3), (3, 1, 0.51)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ms = match_nearest(&fit, &[0, 1], &[2, 3], Caliper::Raw(0.0), &mut rng).unwrap();
        assert_eq!(ms.pairs, vec![(0, 2)]);
        assert_eq!(ms.unmatched_concurrent, vec![1]);
    }

    #[test]
    fn caliper_is_respected() {
        let (fit, conc, hist) = hand_laid(50, 10, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ms = match_nearest(&fit, &conc, &hist, Caliper::PooledSd(0.2), &mut rng).unwrap();
        assert!(ms.distances.iter().all(|&d| d <= ms.caliper_width));
        assert_eq!(ms.pairs.len() + ms.unmatched_concurrent.len(), 50);
        assert!((ms.caliper_width - 0.2 * fit.pooled_sd()).abs() < 1e-15);
    }

    #[test]
    fn empty_historical_list_leaves_everyone_unmatched() {
        let (fit, conc, _) = hand_laid(5, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ms = match_nearest(&fit, &conc, &[], Caliper::default(), &mut rng).unwrap();
        assert!(ms.pairs.is_empty());
        assert_eq!(ms.unmatched_concurrent.len(), 5);
    }

    #[test]
    fn weight_examples() {
        let fit = PsFit::from_scores(&[(0, 0, 0.9), (1, 1, 0.5), (2, 1, 0.0476), (3, 1, 2.0 / 3.0), (4, 1, 0.96)])
            .unwrap();
        let ws = ipw_weights(&fit, TrimBounds::default());
        assert_eq!(ws.weights[0], 1.0);
        assert!((ws.weights[1] - 1.0).abs() < 1e-12);
        assert_eq!(ws.weights[2], 0.0);
        assert!((ws.weights[3] - 2.0).abs() < 1e-12);
        assert_eq!(ws.weights[4], 0.0);
        assert_eq!(ws.trimmed_ids, vec![2, 4]);
    }

    #[test]
    fn stratify_matches_sort_and_cut() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut entries = Vec::new();
        for i in 0..100 {
            let trial = usize::from(i % 3 == 0);
            entries.push((i, trial, rng.random_range(0.01..0.99)));
        }
        let fit = PsFit::from_scores(&entries).unwrap();
        let conc = fit.concurrent_ids();
        let st = stratify(&fit, &conc, 5).unwrap();

        // Independent version: sort, cut by linear interpolation of order
        // statistics, and count the cuts below each score.
        let mut sorted: Vec<f64> = conc.iter().map(|&i| entries[i].2).collect();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len() as f64;
        let cuts: Vec<f64> = (1..5)
            .map(|s| {
                let pos = (m - 1.0) * s as f64 / 5.0;
                let f = pos.floor();
                sorted[f as usize] * (1.0 - (pos - f)) + sorted[f as usize + 1] * (pos - f)
            })
            .collect();
        for (i, e) in entries.iter().enumerate() {
            let expected = if e.2 < sorted[0] || e.2 > *sorted.last().unwrap() {
                None
            } else {
                Some(cuts.iter().filter(|&&c| c < e.2).count())
            };
            assert_eq!(st.labels[i], expected);
        }
    }

    #[test]
    fn uniform_scores_give_equal_strata() {
        let entries: Vec<(usize, usize, f64)> = (0..103).map(|i| (i, 0, (i as f64 + 0.5) / 103.0)).collect();
        let fit = PsFit::from_scores(&entries).unwrap();
        let st = stratify(&fit, &fit.concurrent_ids(), 5).unwrap();
        let mut counts = [0usize; 5];
        for l in &st.labels {
            counts[l.unwrap()] += 1;
        }
        let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(max - min <= 1, "{counts:?}");
    }

    #[test]
    fn historical_outside_support_is_excluded() {
        let mut entries: Vec<(usize, usize, f64)> = (0..20).map(|i| (i, 0, 0.5 + 0.01 * i as f64)).collect();
        entries.extend((0..10).map(|i| (100 + i, 1, 0.1 + 0.01 * i as f64)));
        let fit = PsFit::from_scores(&entries).unwrap();
        let st = stratify(&fit, &fit.concurrent_ids(), 5).unwrap();
        assert!(st.labels[20..].iter().all(Option::is_none));
        assert!(st.labels[..20].iter().all(Option::is_some));
        assert!(stratify(&fit, &[0, 1, 2], 5).is_err());
        assert!(stratify(&fit, &fit.concurrent_ids(), 1).is_err());
    }

    fn small_dataset() -> TrialDataset {
        let conc = vec![
            subject(0, 0, true, 2.0),
            subject(1, 0, true, 3.0),
            subject(2, 0, true, 1.0),
            subject(3, 0, false, 0.5),
            subject(4, 0, false, 1.5),
            subject(5, 0, true, 2.5),
        ];
        let hist = vec![
            subject(10, 1, false, 0.0),
            subject(11, 1, false, 1.0),
            subject(12, 1, false, 2.0),
            subject(13, 1, false, 4.0),
            subject(14, 1, false, -1.0),
            subject(15, 1, false, 0.7),
        ];
        TrialDataset { full_concurrent: conc.clone(), reduced_concurrent: conc, historical: vec![hist] }
    }

    #[test]
    fn weighted_estimate_matches_hand_formula() {
        let ds = small_dataset();
        let scores = [0.6, 0.3, 0.5, 0.8, 0.45, 0.7, 0.2, 0.4, 0.5, 0.01, 0.9, 0.3];
        let ids: Vec<usize> = ds.reduced_concurrent.iter().chain(ds.historical_subjects()).map(|s| s.id).collect();
        let entries: Vec<(usize, usize, f64)> = ids
            .iter()
            .zip(scores)
            .map(|(&id, p)| (id, usize::from(id >= 10), p))
            .collect();
        let fit = PsFit::from_scores(&entries).unwrap();
        let est = estimate_psw(&ds, &fit, TrimBounds::default(), 0.05).unwrap();

        let treated_mean = (2.0 + 3.0 + 1.0 + 2.5) / 4.0;
        let mut sw = 1.0 + 1.0;
        let mut swy = 0.5 + 1.5;
        for (s, p) in ds.historical[0].iter().zip(&scores[6..]) {
            let w = p / (1.0 - p);
            if (0.05..=20.0).contains(&w) {
                sw += w;
                swy += w * s.y;
            }
        }
        assert!((est.estimate - (treated_mean - swy / sw)).abs() < 1e-12);
        assert_eq!(est.flags, vec!["1 historical trimmed".to_string()]);
    }

    #[test]
    fn unit_weights_equal_pooled_ols() {
        let ds = small_dataset();
        let entries: Vec<(usize, usize, f64)> = ds
            .reduced_concurrent
            .iter()
            .chain(ds.historical_subjects())
            .map(|s| (s.id, s.trial, 0.5))
            .collect();
        let fit = PsFit::from_scores(&entries).unwrap();
        let est = estimate_psw(&ds, &fit, TrimBounds::default(), 0.05).unwrap();
        let all: Vec<SubjectRecord> = ds.reduced_concurrent.iter().chain(ds.historical_subjects()).cloned().collect();
        let (ols, _) = crate::regress::treatment_ols(&all).unwrap();
        assert!((est.estimate - ols).abs() < 1e-12);
    }

    #[test]
    fn no_matches_falls_back_to_concurrent_only() {
        let ds = small_dataset();
        let mut entries: Vec<(usize, usize, f64)> = ds.reduced_concurrent.iter().map(|s| (s.id, 0, 0.9)).collect();
        entries.extend(ds.historical_subjects().map(|s| (s.id, 1, 0.1)));
        let fit = PsFit::from_scores(&entries).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est = estimate_psm(&ds, &fit, Caliper::Raw(0.01), 0.05, &mut rng).unwrap();
        let rc = estimate_unadjusted(&ds, false, 0.05).unwrap();
        assert_eq!(est.estimate, rc.estimate);
        assert_eq!(est.method, MethodId::Psm);
        assert_eq!(est.flags.len(), 1);
    }

    #[test]
    fn psm_and_psw_are_invariant_to_id_relabeling() {
        let coeffs = GenCoefficients::preset("single-moderate").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let ds = build_replicate(&coeffs, 1200, &mut rng).unwrap();
        let relabel = |s: &SubjectRecord| SubjectRecord { id: 50_000 + 3 * s.id, ..s.clone() };
        let ds2 = TrialDataset {
            full_concurrent: ds.full_concurrent.iter().map(relabel).collect(),
            reduced_concurrent: ds.reduced_concurrent.iter().map(relabel).collect(),
            historical: ds.historical.iter().map(|h| h.iter().map(relabel).collect()).collect(),
        };
        let f1 = estimate_ps(&ds, CovSet::One).unwrap();
        let f2 = estimate_ps(&ds2, CovSet::One).unwrap();
        let a = estimate_psm(&ds, &f1, Caliper::default(), 0.05, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = estimate_psm(&ds2, &f2, Caliper::default(), 0.05, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!((a.estimate - b.estimate).abs() < 1e-12);
        assert!((a.se - b.se).abs() < 1e-12);
        let a = estimate_psw(&ds, &f1, TrimBounds::default(), 0.05).unwrap();
        let b = estimate_psw(&ds2, &f2, TrimBounds::default(), 0.05).unwrap();
        assert!((a.estimate - b.estimate).abs() < 1e-12);
    }

    #[test]
    fn weighting_improves_covariate_balance() {
        let coeffs = GenCoefficients::preset("single-severe").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ds = build_replicate(&coeffs, 20_000, &mut rng).unwrap();
        let fit = estimate_ps(&ds, CovSet::One).unwrap();
        let ws = ipw_weights(&fit, TrimBounds::default());
        let hist: HashMap<usize, &SubjectRecord> = ds.historical_subjects().map(|s| (s.id, s)).collect();
        for c in 0..6 {
            let cm = ds.reduced_concurrent.iter().map(|s| s.x[c]).sum::<f64>() / ds.reduced_concurrent.len() as f64;
            let (mut raw, mut n, mut wsum, mut wx) = (0.0, 0.0, 0.0, 0.0);
            for (i, &id) in fit.ids.iter().enumerate() {
                if fit.trial[i] == CONCURRENT {
                    continue;
                }
                let x = hist[&id].x[c];
                raw += x;
                n += 1.0;
                wsum += ws.weights[i];
                wx += ws.weights[i] * x;
            }
            // Covariates have unit variance, so mean differences are already
            // standardized.
            assert!((wx / wsum - cm).abs() <= (raw / n - cm).abs(), "x{}", c + 1);
        }
    }
}
