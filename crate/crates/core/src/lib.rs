//! Bayesian parameter estimation for scalar diffusions from discrete
//! observations, with data augmentation and Euler or Milstein transition
//! densities.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bridge;
pub mod density;
pub mod diagnostics;
pub mod error;
pub mod estimate;
pub mod mcmc;
pub mod model;
pub mod output;
pub mod quadrature;
pub mod scheme;
pub mod study;

pub use bridge::{BridgeConfig, FeasibleKind, FeasibleSet, SegmentProposal};
pub use density::{euler_logdensity, milstein_logdensity, milstein_support_bound, path_loglikelihood, transition_logdensity};
pub use diagnostics::{multivariate_ess, summarize_run, EssReport, SummaryRow};
pub use error::{Error, Result};
pub use estimate::{map_estimate_gbm, ml_estimate_gbm};
pub use mcmc::{run_chain, ChainResult, McmcConfig, MethodCombo, ProposalStrategy};
pub use model::{Cir, CirParams, DiffusionModel, Gbm, GbmParams, OrnsteinUhlenbeck, OuParams, ParameterVector, Prior, PriorSpec};
pub use scheme::{AugmentedPath, Observation, Scheme, TimeGrid};
pub use study::{run_study, ModelId, StudyConfig, StudyModel, StudyReport};
