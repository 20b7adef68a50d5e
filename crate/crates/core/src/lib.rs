//! Perioperative acute kidney injury (AKI) risk modeling.
//!
//! The crate is organized along the workflow it implements:
//!
//! * [`cohort`]: patient schema, CSV ingestion, seeded synthetic cohorts and
//!   stratified train/test splits.
//! * [`outcome`]: baseline creatinine and KDIGO-style AKI labels at the 3-day,
//!   7-day and whole-stay horizons.
//! * [`preprocessing`]: tail imputation, conditional-probability encoding of
//!   high-cardinality categoricals and intraoperative time-series cleaning.
//! * [`features`]: signal, lab and oxygenation features assembled into a
//!   [`features::FeatureMatrix`].
//! * [`preop`]: additive logistic model with natural cubic spline terms fitted
//!   by penalized IRLS.
//! * [`forest`] and [`stacking`]: CART random forest, F-test screening, grid
//!   search and the four-model comparison suite.
//! * [`evaluation`]: AUROC, Youden cutoffs, classification tables, NRI and
//!   bootstrap confidence intervals.
//! * [`pipeline`]: configuration and the end-to-end commands used by the CLI.

pub mod cohort;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod folds;
pub mod forest;
pub mod outcome;
pub mod pipeline;
pub mod preop;
pub mod preprocessing;
pub mod stacking;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
