//! Regression kernels: (weighted) least squares, IRLS logistic regression,
//! HC0 sandwich standard errors and the Wald decision rule.
//!
//! Robust and cluster-robust covariances use the HC0 convention (no
//! small-sample correction).

use nalgebra::{DMatrix, DVector};

use crate::dist::{expit, normal_quantile, normal_sf, softplus};
use crate::error::{invalid, Error, Result};
use crate::metrics::{EffectEstimate, MethodId};
use crate::trialdata::{SubjectRecord, TrialDataset};

/// Relative pivot below which a design column is treated as collinear.
const PIVOT_TOL: f64 = 1e-10;
const IRLS_MAX_ITER: usize = 100;
const IRLS_TOL: f64 = 1e-8;
const IRLS_MAX_HALVINGS: usize = 20;
const SEPARATION_BOUND: f64 = 1e3;

/// A design matrix with column labels. Rows are observations.
#[derive(Debug, Clone)]
pub struct Design {
    matrix: DMatrix<f64>,
    labels: Vec<String>,
}

impl Design {
    pub fn new(matrix: DMatrix<f64>, labels: Vec<String>) -> Result<Self> {
        if matrix.ncols() != labels.len() {
            return invalid(format!(
                "{} labels for {} design columns",
                labels.len(),
                matrix.ncols()
            ));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return invalid("design matrix contains non-finite values");
        }
        Ok(Design { matrix, labels })
    }

    /// Intercept column followed by the given named columns.
    pub fn with_intercept(n: usize, columns: &[(&str, Vec<f64>)]) -> Result<Self> {
        if let Some((name, col)) = columns.iter().find(|(_, c)| c.len() != n) {
            return invalid(format!("column `{name}` has {} rows, expected {n}", col.len()));
        }
        let p = columns.len() + 1;
        let matrix = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { columns[j - 1].1[i] });
        let labels = std::iter::once("(Intercept)".to_string())
            .chain(columns.iter().map(|(name, _)| name.to_string()))
            .collect();
        Design::new(matrix, labels)
    }

    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn column_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitKind {
    Linear,
    Logistic,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub kind: FitKind,
    pub coef: DVector<f64>,
    /// Model-based covariance: `s^2 (X'WX)^-1` for least squares, the inverse
    /// Fisher information for logistic regression.
    pub cov_model: DMatrix<f64>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    pub labels: Vec<String>,
    pub weights: Option<Vec<f64>>,
    pub iterations: usize,
    pub log_likelihood: Option<f64>,
    design: DMatrix<f64>,
    bread: DMatrix<f64>,
}

impl FitResult {
    pub fn model_se(&self, index: usize) -> f64 {
        self.cov_model[(index, index)].sqrt()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }
}

/// Inverse of a symmetric positive definite cross-product matrix. The matrix
/// is scaled to unit diagonal first so the pivot test is scale-free; a
/// vanishing pivot names the offending column.
pub(crate) fn spd_inverse(a: &DMatrix<f64>, labels: &[String]) -> Result<DMatrix<f64>> {
    let p = a.nrows();
    let singular = |j: usize| Error::SingularDesign {
        column: labels.get(j).cloned().unwrap_or_else(|| format!("#{j}")),
    };
    let mut scale = vec![0.0; p];
    for j in 0..p {
        let d = a[(j, j)];
        if !(d > 0.0) || !d.is_finite() {
            return Err(singular(j));
        }
        scale[j] = 1.0 / d.sqrt();
    }
    let b = DMatrix::from_fn(p, p, |i, j| a[(i, j)] * scale[i] * scale[j]);

    let mut l = DMatrix::<f64>::zeros(p, p);
    for j in 0..p {
        let mut d = b[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < PIVOT_TOL {
            return Err(singular(j));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..p {
            let mut s = b[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }

    // inv(B) = inv(L)' inv(L)
    let mut linv = DMatrix::<f64>::zeros(p, p);
    for j in 0..p {
        linv[(j, j)] = 1.0 / l[(j, j)];
        for i in (j + 1)..p {
            let mut s = 0.0;
            for k in j..i {
                s -= l[(i, k)] * linv[(k, j)];
            }
            linv[(i, j)] = s / l[(i, i)];
        }
    }
    let binv = linv.transpose() * &linv;
    Ok(DMatrix::from_fn(p, p, |i, j| binv[(i, j)] * scale[i] * scale[j]))
}

fn check_weights(weights: Option<&[f64]>, n: usize) -> Result<()> {
    if let Some(w) = weights {
        if w.len() != n {
            return invalid(format!("{} weights for {n} rows", w.len()));
        }
        if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return invalid("weights must be finite and non-negative");
        }
    }
    Ok(())
}

fn weighted_cross(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let p = x.ncols();
    let mut out = DMatrix::<f64>::zeros(p, p);
    for (i, &wi) in w.iter().enumerate() {
        if wi == 0.0 {
            continue;
        }
        for a in 0..p {
            let xa = wi * x[(i, a)];
            for b in a..p {
                out[(a, b)] += xa * x[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            out[(a, b)] = out[(b, a)];
        }
    }
    out
}

/// Weighted least squares; `weights = None` is ordinary least squares.
pub fn fit_ols(design: &Design, y: &[f64], weights: Option<&[f64]>) -> Result<FitResult> {
    let x = design.matrix();
    let (n, p) = (x.nrows(), x.ncols());
    if y.len() != n {
        return invalid(format!("{} outcomes for {n} design rows", y.len()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return invalid("outcomes must be finite");
    }
    check_weights(weights, n)?;
    let w: Vec<f64> = weights.map_or_else(|| vec![1.0; n], <[f64]>::to_vec);
    let n_pos = w.iter().filter(|&&v| v > 0.0).count();
    if n_pos < p {
        return invalid(format!("{n_pos} weighted rows for {p} coefficients"));
    }

    let xtwx = weighted_cross(x, &w);
    let bread = spd_inverse(&xtwx, design.labels())?;
    let mut xtwy = DVector::<f64>::zeros(p);
    for i in 0..n {
        for a in 0..p {
            xtwy[a] += w[i] * x[(i, a)] * y[i];
        }
    }
    let coef = &bread * xtwy;
    let fitted: Vec<f64> = (x * &coef).iter().copied().collect();
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let rss: f64 = residuals.iter().zip(&w).map(|(r, w)| w * r * r).sum();
    let sigma2 = if n_pos > p { rss / (n_pos - p) as f64 } else { 0.0 };

    Ok(FitResult {
        kind: FitKind::Linear,
        cov_model: &bread * sigma2,
        coef,
        fitted,
        residuals,
        labels: design.labels().to_vec(),
        weights: weights.map(<[f64]>::to_vec),
        iterations: 1,
        log_likelihood: None,
        design: x.clone(),
        bread,
    })
}

fn logistic_loglik(x: &DMatrix<f64>, t: &[bool], w: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    eta.iter()
        .zip(t)
        .zip(w)
        .map(|((&e, &ti), &wi)| wi * (if ti { e } else { 0.0 } - softplus(e)))
        .sum()
}

/// Logistic regression by iteratively reweighted least squares with step
/// halving. Converges when the largest coefficient step falls below 1e-8.
pub fn fit_logistic(design: &Design, t: &[bool], weights: Option<&[f64]>) -> Result<FitResult> {
    let x = design.matrix();
    let (n, p) = (x.nrows(), x.ncols());
    if t.len() != n {
        return invalid(format!("{} responses for {n} design rows", t.len()));
    }
    check_weights(weights, n)?;
    let w: Vec<f64> = weights.map_or_else(|| vec![1.0; n], <[f64]>::to_vec);
    let positives = t.iter().zip(&w).filter(|(&ti, &wi)| ti && wi > 0.0).count();
    let negatives = t.iter().zip(&w).filter(|(&ti, &wi)| !ti && wi > 0.0).count();
    if positives == 0 || negatives == 0 {
        return Err(Error::Separation(
            "response has a single class".to_string(),
        ));
    }

    let mut beta = DVector::<f64>::zeros(p);
    let mut ll = logistic_loglik(x, t, &w, &beta);
    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=IRLS_MAX_ITER {
        iterations = iter;
        let eta = x * &beta;
        let mu: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
        let irls_w: Vec<f64> = mu.iter().zip(&w).map(|(m, wi)| wi * m * (1.0 - m)).collect();
        let info = weighted_cross(x, &irls_w);
        let info_inv = match spd_inverse(&info, design.labels()) {
            Ok(v) => v,
            Err(Error::SingularDesign { column }) if iter > 1 => {
                return Err(Error::Separation(format!(
                    "information matrix degenerate at column `{column}` (fitted probabilities 0 or 1)"
                )))
            }
            Err(e) => return Err(e),
        };
        let mut score = DVector::<f64>::zeros(p);
        for i in 0..n {
            let resid = w[i] * (if t[i] { 1.0 } else { 0.0 } - mu[i]);
            for a in 0..p {
                score[a] += x[(i, a)] * resid;
            }
        }
        let step = info_inv * score;

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=IRLS_MAX_HALVINGS {
            let cand = &beta + &step * scale;
            let ll_c = logistic_loglik(x, t, &w, &cand);
            if ll_c >= ll - 1e-12 * ll.abs().max(1.0) {
                accepted = Some((cand, ll_c));
                break;
            }
            scale *= 0.5;
        }
        let max_step = step.amax() * scale;
        let Some((cand, ll_c)) = accepted else {
            if max_step < IRLS_TOL {
                converged = true;
                break;
            }
            return Err(Error::Separation(
                "no ascent direction after step halving".to_string(),
            ));
        };
        beta = cand;
        ll = ll_c;
        if beta.amax() > SEPARATION_BOUND {
            return Err(Error::Separation(format!(
                "coefficient norm exceeded {SEPARATION_BOUND} (complete separation)"
            )));
        }
        if max_step < IRLS_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Separation(format!(
            "IRLS did not converge in {IRLS_MAX_ITER} iterations (quasi-separation)"
        )));
    }

    let eta = x * &beta;
    let fitted: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
    let irls_w: Vec<f64> = fitted.iter().zip(&w).map(|(m, wi)| wi * m * (1.0 - m)).collect();
    let bread = spd_inverse(&weighted_cross(x, &irls_w), design.labels())
        .map_err(|_| Error::Separation("information matrix degenerate at the optimum".to_string()))?;
    let residuals = t
        .iter()
        .zip(&fitted)
        .map(|(&ti, m)| if ti { 1.0 } else { 0.0 } - m)
        .collect();
    Ok(FitResult {
        kind: FitKind::Logistic,
        coef: beta,
        cov_model: bread.clone(),
        fitted,
        residuals,
        labels: design.labels().to_vec(),
        weights: weights.map(<[f64]>::to_vec),
        iterations,
        log_likelihood: Some(ll),
        design: x.clone(),
        bread,
    })
}

/// HC0 sandwich covariance `(X'WX)^-1 M (X'WX)^-1` of a least-squares fit.
/// `M` sums outer products of the scores `w_i x_i r_i` per observation, or
/// of their per-cluster sums when cluster ids are given.
pub fn sandwich_cov(fit: &FitResult, clusters: Option<&[usize]>) -> Result<DMatrix<f64>> {
    if fit.kind != FitKind::Linear {
        return invalid("sandwich covariance requires a least-squares fit");
    }
    let x = &fit.design;
    let (n, p) = (x.nrows(), x.ncols());
    let w = |i: usize| fit.weights.as_ref().map_or(1.0, |w| w[i]);
    let score = |i: usize| -> DVector<f64> {
        let s = w(i) * fit.residuals[i];
        DVector::from_fn(p, |a, _| x[(i, a)] * s)
    };

    let mut meat = DMatrix::<f64>::zeros(p, p);
    match clusters {
        None => {
            for i in 0..n {
                let u = score(i);
                meat += &u * u.transpose();
            }
        }
        Some(ids) => {
            if ids.len() != n {
                return invalid(format!("{} cluster ids for {n} rows", ids.len()));
            }
            let mut sums: std::collections::BTreeMap<usize, DVector<f64>> = Default::default();
            for (i, &g) in ids.iter().enumerate() {
                *sums.entry(g).or_insert_with(|| DVector::zeros(p)) += score(i);
            }
            if sums.len() < 2 {
                return invalid("cluster-robust covariance needs at least two clusters");
            }
            for u in sums.values() {
                meat += u * u.transpose();
            }
        }
    }
    let v = &fit.bread * meat * &fit.bread;
    Ok((&v + v.transpose()) * 0.5)
}

pub fn sandwich_se(fit: &FitResult, target: usize, clusters: Option<&[usize]>) -> Result<f64> {
    if target >= fit.coef.len() {
        return invalid(format!("target column {target} out of range"));
    }
    Ok(sandwich_cov(fit, clusters)?[(target, target)].sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaldTest {
    pub reject: bool,
    pub z: f64,
    pub p_value: f64,
}

/// Two-sided Wald test against the normal reference. Rejects when
/// `|z|` strictly exceeds the critical value.
pub fn wald_decision(estimate: f64, se: f64, alpha: f64) -> Result<WaldTest> {
    if !(se > 0.0) || !se.is_finite() {
        return invalid(format!("standard error must be positive, got {se}"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    let z = estimate / se;
    let crit = normal_quantile(1.0 - alpha / 2.0);
    Ok(WaldTest {
        reject: z.abs() > crit,
        z,
        p_value: (2.0 * normal_sf(z.abs())).min(1.0),
    })
}

/// OLS of outcome on treatment (with intercept) over two-arm concurrent
/// data; returns the treatment coefficient and its model-based SE.
pub fn treatment_ols(subjects: &[SubjectRecord]) -> Result<(f64, f64)> {
    let z: Vec<f64> = subjects.iter().map(|s| if s.treated { 1.0 } else { 0.0 }).collect();
    let y: Vec<f64> = subjects.iter().map(|s| s.y).collect();
    let design = Design::with_intercept(subjects.len(), &[("z", z)])?;
    let fit = fit_ols(&design, &y, None)?;
    Ok((fit.coef[1], fit.model_se(1)))
}

/// Concurrent-only analysis on the reduced (`full = false`) or full
/// concurrent trial.
pub fn estimate_unadjusted(dataset: &TrialDataset, full: bool, alpha: f64) -> Result<EffectEstimate> {
    let (subjects, method) = if full {
        (&dataset.full_concurrent, MethodId::UnadjFc)
    } else {
        (&dataset.reduced_concurrent, MethodId::UnadjRc)
    };
    let (est, se) = treatment_ols(subjects)?;
    EffectEstimate::wald(method, est, se, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::logit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_design(n: usize, p: usize, seed: u64) -> (Design, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols: Vec<(String, Vec<f64>)> = (1..p)
            .map(|j| {
                (
                    format!("x{j}"),
                    (0..n).map(|_| rng.sample(StandardNormal)).collect(),
                )
            })
            .collect();
        let named: Vec<(&str, Vec<f64>)> =
            cols.iter().map(|(n, c)| (n.as_str(), c.clone())).collect();
        (Design::with_intercept(n, &named).unwrap(), rng)
    }

    #[test]
    fn exact_fit_recovers_coefficients() {
        let (d, _) = random_design(30, 3, 1);
        let c = [0.5, -1.25, 2.0];
        let y: Vec<f64> = (0..30)
            .map(|i| (0..3).map(|j| d.matrix()[(i, j)] * c[j]).sum())
            .collect();
        let fit = fit_ols(&d, &y, None).unwrap();
        for j in 0..3 {
            assert!((fit.coef[j] - c[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn intercept_only_gives_weighted_mean() {
        let d = Design::with_intercept(4, &[]).unwrap();
        let y = [1.0, 2.0, 3.0, 10.0];
        let w = [1.0, 1.0, 2.0, 0.5];
        let fit = fit_ols(&d, &y, Some(&w)).unwrap();
        let wm = (1.0 + 2.0 + 6.0 + 5.0) / 4.5;
        assert!((fit.coef[0] - wm).abs() < 1e-12);
    }

    #[test]
    fn ols_matches_explicit_normal_equations() {
        // Oracle: nalgebra's general LU inverse of X'X, independent of the
        // Cholesky path used by fit_ols.
        let (d, mut rng) = random_design(50, 3, 9);
        let y: Vec<f64> = (0..50).map(|_| rng.sample(StandardNormal)).collect();
        let x = d.matrix();
        let xtx = x.transpose() * x;
        let inv = xtx.try_inverse().unwrap();
        let oracle = inv * x.transpose() * DVector::from_vec(y.clone());
        let fit = fit_ols(&d, &y, None).unwrap();
        for j in 0..3 {
            assert!((fit.coef[j] - oracle[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn residuals_are_orthogonal_to_design() {
        let (d, mut rng) = random_design(200, 4, 3);
        let y: Vec<f64> = (0..200).map(|_| 5.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let fit = fit_ols(&d, &y, None).unwrap();
        let r = DVector::from_vec(fit.residuals.clone());
        let xtr = d.matrix().transpose() * r;
        assert!(xtr.amax() < 1e-8 * 200.0 * 5.0);
    }

    #[test]
    fn collinear_column_is_named() {
        let a: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| 2.0 * v + 1.0).collect();
        let d = Design::with_intercept(10, &[("a", a), ("twice_a", b)]).unwrap();
        let err = fit_ols(&d, &[0.0; 10], None).unwrap_err();
        match err {
            Error::SingularDesign { column } => assert_eq!(column, "twice_a"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn logistic_intercept_only_is_logit_of_mean() {
        let t: Vec<bool> = (0..40).map(|i| i % 5 == 0 || i % 7 == 0).collect();
        let d = Design::with_intercept(40, &[]).unwrap();
        let fit = fit_logistic(&d, &t, None).unwrap();
        let m = t.iter().filter(|&&v| v).count() as f64 / 40.0;
        assert!((fit.coef[0] - logit(m)).abs() < 1e-6);
    }

    #[test]
    fn logistic_fitted_mean_equals_response_mean() {
        let (d, mut rng) = random_design(300, 3, 12);
        let t: Vec<bool> = (0..300)
            .map(|i| {
                let eta = 0.3 + 0.8 * d.matrix()[(i, 1)] - 0.5 * d.matrix()[(i, 2)];
                rng.random::<f64>() < expit(eta)
            })
            .collect();
        let fit = fit_logistic(&d, &t, None).unwrap();
        let mean_fit = fit.fitted.iter().sum::<f64>() / 300.0;
        let mean_t = t.iter().filter(|&&v| v).count() as f64 / 300.0;
        assert!((mean_fit - mean_t).abs() < 1e-8);
    }

    #[test]
    fn logistic_beats_every_point_of_a_coefficient_grid() {
        let (d, mut rng) = random_design(40, 2, 5);
        let t: Vec<bool> = (0..40)
            .map(|i| rng.random::<f64>() < expit(-0.2 + 1.1 * d.matrix()[(i, 1)]))
            .collect();
        let fit = fit_logistic(&d, &t, None).unwrap();
        let best = fit.log_likelihood.unwrap();
        let w = vec![1.0; 40];
        for a in 0..200 {
            for b in 0..200 {
                let beta = DVector::from_vec(vec![
                    -4.0 + 8.0 * a as f64 / 199.0,
                    -4.0 + 8.0 * b as f64 / 199.0,
                ]);
                assert!(best >= logistic_loglik(d.matrix(), &t, &w, &beta) - 1e-12);
            }
        }
    }

    #[test]
    fn logistic_rejects_single_class_and_separation() {
        let d = Design::with_intercept(6, &[("x", vec![-3., -2., -1., 1., 2., 3.])]).unwrap();
        assert!(matches!(
            fit_logistic(&d, &[true; 6], None),
            Err(Error::Separation(_))
        ));
        let t = [false, false, false, true, true, true];
        assert!(matches!(fit_logistic(&d, &t, None), Err(Error::Separation(_))));
    }

    #[test]
    fn robust_se_agrees_with_model_se_under_homoskedasticity() {
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let z: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let y: Vec<f64> = z
            .iter()
            .map(|&zi| 0.5 * zi + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let d = Design::with_intercept(n, &[("z", z)]).unwrap();
        let fit = fit_ols(&d, &y, None).unwrap();
        let robust = sandwich_se(&fit, 1, None).unwrap();
        assert!((robust / fit.model_se(1) - 1.0).abs() < 0.03);
    }

    #[test]
    fn singleton_clusters_equal_hc0() {
        let (d, mut rng) = random_design(80, 3, 4);
        let y: Vec<f64> = (0..80).map(|_| rng.sample(StandardNormal)).collect();
        let fit = fit_ols(&d, &y, None).unwrap();
        let ids: Vec<usize> = (0..80).collect();
        let a = sandwich_se(&fit, 1, None).unwrap();
        let b = sandwich_se(&fit, 1, Some(&ids)).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn duplicated_rows_with_shared_clusters_leave_se_unchanged() {
        let (d, mut rng) = random_design(60, 2, 8);
        let y: Vec<f64> = (0..60).map(|_| rng.sample(StandardNormal)).collect();
        let ids: Vec<usize> = (0..60).map(|i| i / 3).collect();
        let fit = fit_ols(&d, &y, None).unwrap();
        let base = sandwich_se(&fit, 1, Some(&ids)).unwrap();

        let x = d.matrix();
        let x2 = DMatrix::from_fn(120, 2, |i, j| x[(i % 60, j)]);
        let d2 = Design::new(x2, d.labels().to_vec()).unwrap();
        let y2: Vec<f64> = (0..120).map(|i| y[i % 60]).collect();
        let ids2: Vec<usize> = (0..120).map(|i| ids[i % 60]).collect();
        let fit2 = fit_ols(&d2, &y2, None).unwrap();
        let dup = sandwich_se(&fit2, 1, Some(&ids2)).unwrap();
        assert!((base - dup).abs() < 1e-12 * base.max(1.0));
    }

    #[test]
    fn one_cluster_is_rejected() {
        let (d, _) = random_design(10, 2, 1);
        let fit = fit_ols(&d, &[1.0; 10], None).unwrap();
        assert!(sandwich_se(&fit, 1, Some(&[7; 10])).is_err());
    }

    #[test]
    fn sandwich_is_symmetric_psd() {
        let (d, mut rng) = random_design(100, 4, 77);
        let y: Vec<f64> = (0..100).map(|_| rng.sample(StandardNormal)).collect();
        let fit = fit_ols(&d, &y, None).unwrap();
        let v = sandwich_cov(&fit, None).unwrap();
        assert_eq!(v, v.transpose());
        let eig = v.symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e >= -1e-14));
    }

    #[test]
    fn wald_examples() {
        let t = wald_decision(0.0, 1.0, 0.05).unwrap();
        assert!(!t.reject);
        assert_eq!(t.p_value, 1.0);

        let crit = normal_quantile(0.975);
        assert!(!wald_decision(crit, 1.0, 0.05).unwrap().reject);
        assert!(wald_decision(crit + 1e-9, 1.0, 0.05).unwrap().reject);

        let t = wald_decision(0.5, 0.2, 0.05).unwrap();
        assert!((t.z - 2.5).abs() < 1e-12);
        // 2 * (1 - Phi(2.5))
        assert!((t.p_value - 0.012_419_330_651_552_265).abs() < 1e-12);
        assert!(t.reject);

        assert!(wald_decision(1.0, 0.0, 0.05).is_err());
    }
}
