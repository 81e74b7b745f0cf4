//! Multiplexed routing network for incremental multilingual text recognition.

pub mod config;
pub mod datastore;
pub mod error;
pub mod formats;
pub mod glyphgen;
pub mod recognizer;
pub mod rehearsal;
pub mod report;
pub mod router;
pub mod trainer;
pub mod rng;
pub mod verify;

pub use error::{MrnError, Result};
