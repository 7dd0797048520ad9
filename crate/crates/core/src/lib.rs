//! Incremental learning of probabilistic movement primitives (ProMPs).
//!
//! The crate provides the ProMP model ([`model`], [`basis`]), three batch
//! estimators ([`estimators`]), the stepwise-EM learner with a forgetting
//! factor ([`incremental`]), evaluation metrics ([`metrics`]), synthetic data
//! and experiment pipelines ([`synthlab`]) and the on-disk formats ([`io`]).

pub mod basis;
pub mod error;
pub mod estimators;
pub mod incremental;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod synthlab;

pub use basis::BasisConfig;
pub use error::{Error, Result};
pub use estimators::{BatchFitReport, EmConfig, NiwPrior, S0Mode};
pub use incremental::{StepwiseConfig, StepwiseState, UpdatePayload};
pub use metrics::MetricReport;
pub use model::{Demonstration, ProMPParams, WeightPosterior};
