//! Importance-weighted cross-entropy training for models fit on a source
//! distribution Q but evaluated on a target distribution P.
//!
//! * [`corpus`]: datasets, file ingestion, hashing featurizer, splits.
//! * [`model`]: softmax classifier, analytic gradients, SGD trainer.
//! * [`losses`]: CE / weighted CE and the focal, static-importance and
//!   dynamic-importance weight functions, plus the dynamic-importance lower bound.
//! * [`checkers`]: quality and diversity checkers and weight providers.
//! * [`synthworld`]: finite ground-truth P/Q worlds with exact expectations.
//! * [`metrics`]: accuracy, macro-F1, model conditional entropy and KL.
//! * [`experiment`]: end-to-end pipelines, timing, scoring and noise studies.

pub mod checkers;
pub mod clock;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod seeding;
pub mod synthworld;

pub use error::{Error, Result};
