//! Drift-to-action control for deployed classifiers.
//!
//! Unlabeled monitors feed a belief filter over drift types; an anytime-valid
//! upper bound on windowed risk, built from uniformly audited labels, gates
//! automated prediction; a budget- and cooldown-constrained controller picks
//! the next action. [`simenv`] provides a deterministic synthetic stream and
//! [`harness`] runs policies against it and scores them.

pub mod belief;
pub mod controller;
pub mod error;
pub mod monitors;
pub mod riskcert;
pub mod harness;
pub mod simenv;

pub use error::{Error, Result};
