//! Greedy, per-module contrastive representation learning with Gaussian
//! latents, its deterministic baselines, a synthetic syllable corpus, and
//! post-hoc interpretability probes.

pub mod error;
pub mod gradcore;
pub mod losses;
pub mod probes;
pub mod rng;
pub mod simnet;
pub mod syllabgen;
pub mod trainer;

pub use error::{Error, Result};
