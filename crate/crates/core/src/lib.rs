//! Continuous vulnerability repair engine.
//!
//! Crash reports from a fuzzing pipeline are deduplicated by re-running
//! their PoVs against patches already produced ([`dedup`]), unique crashes
//! are repaired by an ensemble of agents arranged in provider-aware parallel
//! lanes ([`orchestrator`]), candidates are validated ([`validation`]), and
//! every coordinator state change is an event that can be persisted and
//! replayed ([`service`]). [`sim`] drives the same code on virtual time.

pub mod dedup;
pub mod error;
pub mod event;
pub mod model;
pub mod orchestrator;
pub mod service;
pub mod sim;
pub mod validation;

pub use error::{Error, Result};
