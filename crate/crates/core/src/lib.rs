//! Text-only video anomaly detection: caption corpora are distilled into
//! four-slot class knowledge, a small transformer classifies videos from
//! their captions, and every decision comes with slot weights, retrieved
//! knowledge evidence and counterfactual slot margins.

pub mod classifier;
pub mod embedder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod knowledge;
pub mod reasoning;
pub mod remote;
pub mod tape;
pub mod textcorpus;

mod parallel;

pub use error::{Error, Result};
