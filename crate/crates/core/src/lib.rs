//! Hybrid preference-based reinforcement learning: a noisy embedding model
//! labels most segment pairs, a KL filter separates trustworthy, flippable
//! and uncertain labels, and a budget-capped scripted oracle answers the
//! uncertain ones while its answers fine-tune the embedding adapters.

pub mod agent;
pub mod envs;
pub mod feedback;
pub mod harness;
pub mod error;
pub mod nn;
pub mod reward;
pub mod stats;
pub mod verify;
pub mod vle;

pub use error::{Error, Result};
