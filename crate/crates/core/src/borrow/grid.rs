//! Univariate densities on a uniform grid.
//!
//! Masses are density values times normalized trapezoid weights, so they sum
//! to one and moments are plain weighted sums over the grid points.

use crate::dist::{normal_cdf, normal_pdf};
use crate::error::{invalid, Error, Result};

/// Relative size below which a normal's contribution is dropped.
const TAIL_CUTOFF: f64 = 1e-40;
/// Steps between exact re-evaluations in the normal recurrence.
const RESEED: usize = 128;

/// Uniformly spaced support points.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformGrid {
    lo: f64,
    step: f64,
    len: usize,
}

impl UniformGrid {
    pub fn new(lo: f64, hi: f64, len: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) || len < 3 {
            return invalid(format!("grid [{lo}, {hi}] with {len} points is not usable"));
        }
        Ok(UniformGrid { lo, step: (hi - lo) / (len - 1) as f64, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.point(self.len - 1)
    }

    #[inline]
    pub fn point(&self, i: usize) -> f64 {
        self.lo + self.step * i as f64
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.point(i)).collect()
    }

    /// Trapezoid weight of point `i`, up to the common step factor.
    #[inline]
    fn trapezoid(&self, i: usize) -> f64 {
        if i == 0 || i + 1 == self.len {
            0.5
        } else {
            1.0
        }
    }

    /// Adds `scale * N(x; mean, sd)` to `out` at every grid point.
    ///
    /// Values are produced by a multiplicative recurrence outward from the
    /// grid point nearest the mean and stop once they become negligible.
    pub fn add_normal(&self, mean: f64, sd: f64, scale: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len);
        if scale == 0.0 {
            return;
        }
        let h = self.step;
        let start = ((mean - self.lo) / h).round().clamp(0.0, (self.len - 1) as f64) as usize;
        let z0 = (self.point(start) - mean) / sd;
        let peak = scale * normal_pdf(z0) / sd;
        if peak == 0.0 {
            return;
        }
        let floor = peak.abs() * TAIL_CUTOFF;
        let var = sd * sd;
        let q = (-h * h / var).exp();
        out[start] += peak;
        // Exact value and ratio at point `i`; the recurrence is re-seeded from
        // these periodically to bound accumulated rounding.
        let exact = |i: usize, dir: f64| {
            let d = self.point(i) - mean;
            let v = scale * normal_pdf(d / sd) / sd;
            let r = (-(dir * h * d + 0.5 * h * h) / var).exp();
            (v, r)
        };

        // Rightward: f(x + h) / f(x) = exp(-(h (x - mean) + h^2 / 2) / var).
        let (mut v, mut r) = exact(start, 1.0);
        for i in start + 1..self.len {
            if (i - start) % RESEED == 0 {
                (v, r) = exact(i - 1, 1.0);
            }
            v *= r;
            r *= q;
            if v.abs() < floor && r < 1.0 {
                break;
            }
            out[i] += v;
        }
        // Leftward: f(x - h) / f(x) = exp((h (x - mean) - h^2 / 2) / var).
        let (mut v, mut r) = exact(start, -1.0);
        for i in (0..start).rev() {
            if (start - i) % RESEED == 0 {
                (v, r) = exact(i + 1, -1.0);
            }
            v *= r;
            r *= q;
            if v.abs() < floor && r < 1.0 {
                break;
            }
            out[i] += v;
        }
    }
}

/// A normalized density on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    grid: UniformGrid,
    mass: Vec<f64>,
}

impl GridDensity {
    /// Normalizes pointwise density values into trapezoid masses.
    pub fn from_density(grid: UniformGrid, density: Vec<f64>) -> Result<Self> {
        if density.len() != grid.len() {
            return invalid(format!("{} density values for {} grid points", density.len(), grid.len()));
        }
        if density.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return invalid("density values must be finite and non-negative");
        }
        let mut mass = density;
        for (i, m) in mass.iter_mut().enumerate() {
            *m *= grid.trapezoid(i);
        }
        let total: f64 = mass.iter().sum();
        if !(total > 0.0) {
            return Err(Error::GridUnderflow("density has no mass on the grid".to_string()));
        }
        mass.iter_mut().for_each(|m| *m /= total);
        Ok(GridDensity { grid, mass })
    }

    pub fn normal(grid: UniformGrid, mean: f64, sd: f64) -> Result<Self> {
        if !(sd > 0.0) || !mean.is_finite() {
            return invalid(format!("normal component needs a finite mean and sd > 0, got ({mean}, {sd})"));
        }
        let mut d = vec![0.0; grid.len()];
        grid.add_normal(mean, sd, 1.0, &mut d);
        Self::from_density(grid, d)
    }

    pub fn grid(&self) -> &UniformGrid {
        &self.grid
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn mean(&self) -> f64 {
        self.mass.iter().enumerate().map(|(i, m)| m * self.grid.point(i)).sum()
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.mass
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let d = self.grid.point(i) - mean;
                m * d * d
            })
            .sum()
    }

    pub fn sd(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Smallest grid point whose cumulative mass reaches `p`.
    pub fn quantile(&self, p: f64) -> f64 {
        let mut acc = 0.0;
        for (i, m) in self.mass.iter().enumerate() {
            acc += m;
            if acc >= p {
                return self.grid.point(i);
            }
        }
        self.grid.hi()
    }

    /// `(1 - omega) * self + omega * N(vague_mean, vague_sd)`, both normalized
    /// on this grid.
    pub fn robustify(&self, omega: f64, vague_mean: f64, vague_sd: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&omega) {
            return invalid(format!("omega must lie in [0, 1], got {omega}"));
        }
        if omega == 0.0 {
            return Ok(self.clone());
        }
        let vague = GridDensity::normal(self.grid.clone(), vague_mean, vague_sd)?;
        let mass = self
            .mass
            .iter()
            .zip(&vague.mass)
            .map(|(a, b)| (1.0 - omega) * a + omega * b)
            .collect();
        Ok(GridDensity { grid: self.grid.clone(), mass })
    }

    /// Conjugate update with a normal likelihood for the grid parameter.
    pub fn posterior_update(&self, data_mean: f64, data_se: f64) -> Result<Self> {
        let (mass, _) = likelihood_product(self, data_mean, data_se)?;
        let total: f64 = mass.iter().sum();
        if !(total > 0.0) {
            return Err(Error::GridUnderflow(format!(
                "no posterior mass for data mean {data_mean} (se {data_se}) on [{}, {}]",
                self.grid.lo(),
                self.grid.hi()
            )));
        }
        Ok(GridDensity { grid: self.grid.clone(), mass: mass.into_iter().map(|m| m / total).collect() })
    }
}

/// Wraps masses that already sum to one.
pub(crate) fn from_masses(grid: UniformGrid, mass: Vec<f64>) -> GridDensity {
    debug_assert_eq!(grid.len(), mass.len());
    GridDensity { grid, mass }
}

/// Prior masses times the normal likelihood, scaled by `exp(-shift)` to avoid
/// underflow; returns the products and the shift applied.
pub(crate) fn likelihood_product(prior: &GridDensity, data_mean: f64, data_se: f64) -> Result<(Vec<f64>, f64)> {
    if !(data_se > 0.0) || !data_mean.is_finite() {
        return invalid(format!("data needs a finite mean and se > 0, got ({data_mean}, {data_se})"));
    }
    let grid = prior.grid();
    let margin = 40.0 * data_se;
    if data_mean < grid.lo() - margin || data_mean > grid.hi() + margin {
        return Err(Error::GridUnderflow(format!(
            "data mean {data_mean} lies more than 40 standard errors outside [{}, {}]",
            grid.lo(),
            grid.hi()
        )));
    }
    // Log-likelihood is evaluated relative to its maximum over the grid.
    let nearest = data_mean.clamp(grid.lo(), grid.hi());
    let shift = 0.5 * ((nearest - data_mean) / data_se).powi(2);
    let mass = prior
        .mass()
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            if m == 0.0 {
                0.0
            } else {
                let z = (grid.point(i) - data_mean) / data_se;
                m * (-0.5 * z * z + shift).exp()
            }
        })
        .collect();
    Ok((mass, shift))
}

/// Distribution of `T - C` with `T ~ N(t_mean, t_sd^2)` independent of a
/// discrete `C` given by `(points, masses)`.
#[derive(Debug, Clone)]
pub struct DifferencePosterior {
    points: Vec<f64>,
    masses: Vec<f64>,
    t_mean: f64,
    t_sd: f64,
    pub mean: f64,
    pub sd: f64,
}

impl DifferencePosterior {
    pub fn new(control: &GridDensity, t_mean: f64, t_sd: f64) -> Result<Self> {
        if !(t_sd > 0.0) {
            return invalid(format!("treated SE must be positive, got {t_sd}"));
        }
        let peak = control.mass().iter().cloned().fold(0.0, f64::max);
        let keep = peak * 1e-16;
        let (mut points, mut masses) = (Vec::new(), Vec::new());
        for (i, &m) in control.mass().iter().enumerate() {
            if m > keep {
                points.push(control.grid().point(i));
                masses.push(m);
            }
        }
        let total: f64 = masses.iter().sum();
        masses.iter_mut().for_each(|m| *m /= total);
        let c_mean: f64 = points.iter().zip(&masses).map(|(p, m)| p * m).sum();
        let c_var: f64 = points.iter().zip(&masses).map(|(p, m)| m * (p - c_mean).powi(2)).sum();
        Ok(DifferencePosterior {
            points,
            masses,
            t_mean,
            t_sd,
            mean: t_mean - c_mean,
            sd: (t_sd * t_sd + c_var).sqrt(),
        })
    }

    /// `P(T - C <= d)`.
    pub fn cdf(&self, d: f64) -> f64 {
        self.points
            .iter()
            .zip(&self.masses)
            .map(|(c, m)| m * normal_cdf((d + c - self.t_mean) / self.t_sd))
            .sum()
    }

    fn pdf(&self, d: f64) -> f64 {
        self.points
            .iter()
            .zip(&self.masses)
            .map(|(c, m)| m * normal_pdf((d + c - self.t_mean) / self.t_sd))
            .sum::<f64>()
            / self.t_sd
    }

    /// Quantile by safeguarded Newton iteration inside a bisection bracket.
    pub fn quantile(&self, p: f64) -> f64 {
        let span = 12.0 * self.sd + 12.0 * self.t_sd;
        let (mut lo, mut hi) = (self.mean - span, self.mean + span);
        let z = crate::dist::normal_quantile(p);
        let mut x = self.mean + z * self.sd;
        for _ in 0..100 {
            let f = self.cdf(x) - p;
            if f.abs() < 1e-13 {
                return x;
            }
            if f < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let dens = self.pdf(x);
            let newton = x - f / dens;
            x = if dens > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if hi - lo < 1e-12 * (1.0 + x.abs()) {
                break;
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{normal_ln_pdf, normal_quantile};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn grid() -> UniformGrid {
        UniformGrid::new(-10.0, 10.0, 4001).unwrap()
    }

    #[test]
    fn recurrence_matches_direct_evaluation() {
        let g = grid();
        for (mean, sd) in [(0.3, 1.0), (-9.7, 0.05), (4.123, 2.5), (15.0, 2.0)] {
            let mut out = vec![0.0; g.len()];
            g.add_normal(mean, sd, 2.0, &mut out);
            for i in 0..g.len() {
                let direct = 2.0 * normal_ln_pdf(g.point(i), mean, sd).exp();
                assert!((out[i] - direct).abs() <= 1e-11 * direct + 1e-37, "{mean} {sd} at {i}: {} vs {direct}", out[i]);
            }
        }
    }

    #[test]
    fn masses_sum_to_one_and_moments_are_accurate() {
        let d = GridDensity::normal(grid(), 1.5, 0.7).unwrap();
        assert!((d.mass().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((d.mean() - 1.5).abs() < 1e-10);
        assert!((d.sd() - 0.7).abs() < 1e-8);
    }

    #[test]
    fn robustify_examples() {
        let p = GridDensity::normal(grid(), 1.0, 0.2).unwrap();
        assert_eq!(p.robustify(0.0, 0.0, 2.0).unwrap(), p);
        let v = GridDensity::normal(grid(), 0.0, 2.0).unwrap();
        let one = p.robustify(1.0, 0.0, 2.0).unwrap();
        for (a, b) in one.mass().iter().zip(v.mass()) {
            assert!((a - b).abs() < 1e-15);
        }
        let half = p.robustify(0.5, 0.0, 2.0).unwrap();
        for i in 0..p.mass().len() {
            assert!((half.mass()[i] - 0.5 * (p.mass()[i] + v.mass()[i])).abs() < 1e-15);
        }
        assert!((half.mass().iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert!(p.robustify(1.5, 0.0, 1.0).is_err());
    }

    #[test]
    fn flat_prior_update_recovers_the_likelihood() {
        let g = grid();
        let flat = GridDensity::from_density(g.clone(), vec![1.0; g.len()]).unwrap();
        let post = flat.posterior_update(0.77, 0.3).unwrap();
        assert!((post.mean() - 0.77).abs() < g.step());
        assert!((post.sd() / 0.3 - 1.0).abs() < 0.01);
    }

    #[test]
    fn conjugate_normal_update() {
        let prior = GridDensity::normal(grid(), 0.0, 1.0).unwrap();
        let post = prior.posterior_update(1.0, 1.0).unwrap();
        assert!((post.mean() - 0.5).abs() < 1e-8);
        assert!((post.variance() - 0.5).abs() < 1e-8);
    }

    #[test]
    fn conjugate_updates_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let m0: f64 = rng.random_range(-2.0..2.0);
            let s0: f64 = rng.random_range(0.1..2.0);
            let y: f64 = rng.random_range(-2.0..2.0);
            let s: f64 = rng.random_range(0.05..1.5);
            let post = GridDensity::normal(grid(), m0, s0).unwrap().posterior_update(y, s).unwrap();
            let prec = 1.0 / (s0 * s0) + 1.0 / (s * s);
            let mean = (m0 / (s0 * s0) + y / (s * s)) / prec;
            let sd = prec.recip().sqrt();
            assert!((post.mean() - mean).abs() <= 0.01 * sd);
            assert!((post.sd() / sd - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn bimodal_prior_update_matches_mixture_formula() {
        let g = grid();
        let mut d = vec![0.0; g.len()];
        g.add_normal(-2.0, 0.3, 0.5, &mut d);
        g.add_normal(2.0, 0.3, 0.5, &mut d);
        let prior = GridDensity::from_density(g.clone(), d).unwrap();
        let post = prior.posterior_update(2.1, 0.1).unwrap();
        // Closed form: each component updates conjugately, with weights
        // proportional to the marginal density of the data.
        let marg = |m: f64| normal_ln_pdf(2.1, m, 0.1f64.sqrt()).exp();
        let w_far = marg(-2.0) / (marg(-2.0) + marg(2.0));
        let far_mass: f64 = post.mass().iter().enumerate().filter(|(i, _)| g.point(*i) < 0.0).map(|(_, m)| m).sum();
        assert!(far_mass < 1e-3);
        assert!((far_mass - w_far).abs() < 1e-12);
        let near_mean = (2.0 / 0.09 + 2.1 / 0.01) / (1.0 / 0.09 + 1.0 / 0.01);
        assert!((post.mean() - ((1.0 - w_far) * near_mean + w_far * -2.0)).abs() < 1e-3);
    }

    #[test]
    fn far_off_grid_data_is_an_underflow_error() {
        let prior = GridDensity::normal(grid(), 0.0, 1.0).unwrap();
        assert!(matches!(prior.posterior_update(100.0, 0.1), Err(Error::GridUnderflow(_))));
        assert!(prior.posterior_update(10.5, 0.1).is_ok());
    }

    #[test]
    fn difference_of_normals() {
        let c = GridDensity::normal(grid(), 0.0, 0.4).unwrap();
        let d = DifferencePosterior::new(&c, 0.0, 0.4).unwrap();
        assert!(d.mean.abs() < 1e-10);
        assert!((d.sd - 0.4 * 2f64.sqrt()).abs() < 1e-8);
        let q = d.quantile(0.975);
        assert!((q - normal_quantile(0.975) * d.sd).abs() < 1e-8);
        assert!((d.cdf(q) - 0.975).abs() < 1e-12);
    }

    #[test]
    fn near_point_mass_control() {
        let g = UniformGrid::new(-1.0, 1.0, 4001).unwrap();
        let c = GridDensity::normal(g, 0.25, 1e-3).unwrap();
        let d = DifferencePosterior::new(&c, 1.0, 0.2).unwrap();
        assert!((d.mean - 0.75).abs() < 1e-9);
        assert!((d.sd - 0.2).abs() < 1e-5);
    }

    #[test]
    fn mixture_difference_matches_sampling() {
        let g = grid();
        let mut dens = vec![0.0; g.len()];
        g.add_normal(0.5, 0.1, 0.7, &mut dens);
        g.add_normal(0.0, 1.2, 0.3, &mut dens);
        let c = GridDensity::from_density(g, dens).unwrap();
        let d = DifferencePosterior::new(&c, 0.8, 0.15).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let cv = if rng.random::<f64>() < 0.7 {
                0.5 + 0.1 * rng.sample::<f64, _>(StandardNormal)
            } else {
                1.2 * rng.sample::<f64, _>(StandardNormal)
            };
            let t = 0.8 + 0.15 * rng.sample::<f64, _>(StandardNormal);
            s1 += t - cv;
            s2 += (t - cv) * (t - cv);
        }
        let mean = s1 / n as f64;
        let sd = (s2 / n as f64 - mean * mean).sqrt();
        assert!((d.mean / mean - 1.0).abs() < 0.005, "{} vs {mean}", d.mean);
        assert!((d.sd / sd - 1.0).abs() < 0.005, "{} vs {sd}", d.sd);
    }
}
