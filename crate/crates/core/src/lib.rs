//! Label-aware prompt retrieval with mixture-of-expert dual encoders.
//!
//! A query router produces mixture weights over K expert pairs. Query and
//! prompt embeddings are the same weighted mixture of their experts' outputs,
//! and retrieval ranks prompts by scaled cosine between the two.

pub mod bench;
#[cfg(feature = "cli")]
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod model;
mod parallel;
pub mod retrieval;
pub mod synth;
pub mod training;
pub mod rng;

pub use error::{LaprError, Result};
pub use linalg::{Matrix, Vector};
pub use model::{LaprModel, MixtureWeights, ModelConfig};
pub use retrieval::{PromptRecord, QueryRecord, RankedResult};
pub use rng::SeededRng;
