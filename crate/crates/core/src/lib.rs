//! Self-instructed fact verification with a constrained DPO objective, at desk scale.
//!
//! The pipeline runs claim records through four generation settings, turns the outputs into
//! difficulty-weighted preference pairs, and trains low-rank adapters on a tiny transformer
//! policy against a frozen reference.

pub mod augmentation;
pub mod claims;
pub mod config;
pub mod error;
pub mod eval;
pub mod generation;
pub mod objective;
pub mod pipeline;
pub mod policy;
pub mod prompting;
pub mod synth;
pub mod trainer;
mod util;

pub use claims::{load_claims, save_claims, ClaimRecord, Label, Split};
pub use config::{Hyperparams, Variant};
pub use error::{Error, Result};
