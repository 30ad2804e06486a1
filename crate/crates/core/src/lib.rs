//! Estimators for hybrid-controlled trials, where a randomized trial with an
//! undersized concurrent control arm borrows controls from historical trials.
//!
//! The crate covers the whole pipeline used to study these designs:
//!
//! * [`trialdata`] simulates subjects, trial membership and outcomes.
//! * [`regress`] holds OLS/WLS, IRLS logistic regression and sandwich errors.
//! * [`propensity`] estimates membership propensity scores and implements
//!   matching, trimmed weighting and stratification.
//! * [`borrow`] implements grid-based meta-analytic-predictive priors, their
//!   robust mixtures, power priors and the composed borrowing estimators.
//! * [`mixed`] fits a random-intercept linear mixed model by profiled REML.
//! * [`metrics`] aggregates replicates into bias, rejection rates and ESSR.
//! * [`harness`] runs seeded, parallel Monte Carlo scenarios and writes CSV.

pub mod borrow;
pub mod dist;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod mixed;
pub mod propensity;
pub mod regress;
pub mod trialdata;

pub use error::{Error, Result};
pub use metrics::{EffectEstimate, MethodId, SummaryRow};
pub use propensity::CovSet;
pub use trialdata::{GenCoefficients, SubjectRecord, TrialDataset};
