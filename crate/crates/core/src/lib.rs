//! Preference-summary pipelines around pluggable text-model backends.
//!
//! The crate is organized by pipeline stage:
//!
//! * [`data`]: interaction triples, user histories, segments and summaries.
//! * [`modelio`]: backend abstraction (HTTP chat-completion and scripted mocks),
//!   prompt templates, judge probability extraction.
//! * [`synthpipe`]: the generate / validate / merge SFT data synthesizer.
//! * [`curriculum`]: tractability and learning-potential scoring and pruning.
//! * [`rlengine`]: hierarchical rollouts, cumulative rewards, advantages and
//!   the clipped surrogate loss.
//! * [`streamer`]: full-history and streaming summary inference.
//! * [`transferbench`]: cross-domain and multi-interest benchmark builders.
//! * [`evalharness`]: selection-style preference prediction evaluation.
//! * [`simlab`]: synthetic users and scripted backends with known ground truth.

pub mod curriculum;
pub mod data;
pub mod error;
pub mod evalharness;
pub mod modelio;
pub mod par;
pub mod rlengine;
pub mod seed;
pub mod simlab;
pub mod streamer;
pub mod synthpipe;
pub mod telemetry;
pub mod transferbench;

pub use error::{Error, Result};
