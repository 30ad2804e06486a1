//! Bayesian and stratified borrowing of historical controls.
//!
//! * [`grid`] holds grid densities, normal updates and effect posteriors.
//! * [`map`] builds meta-analytic-predictive priors and the MAP, PSM+MAP and
//!   PSW+MAP estimators.
//! * [`power`] implements the power prior and the stratified PSS+PP and
//!   PSS+CL estimators.

pub mod grid;
pub mod map;
pub mod power;

pub use grid::{GridDensity, UniformGrid};
pub use map::{
    effect_posterior, estimate_map, estimate_psm_map, estimate_psw_map, map_prior, MapAnalysis,
    MapConfig, MapInputs, StudySummary, TauLevel,
};
#[cfg(feature = "composite-likelihood")]
pub use power::estimate_pss_cl;
pub use power::{estimate_pss_pp, power_prior_update, NormalPrior, StratifiedConfig, TotalBorrow};
