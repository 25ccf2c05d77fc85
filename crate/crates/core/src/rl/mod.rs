//! Soft actor-critic training of the compliance policy.

pub mod checkpoint;
pub mod env;
pub mod nn;
pub mod replay;
pub mod sac;
pub mod train;

pub use checkpoint::Checkpoint;
pub use env::{EnvConfig, EnvItem, ItemModel, Observation, SlicingEnv, Termination};
pub use sac::{Sac, SacConfig};
pub use train::{evaluate, evaluate_schedule, train, Metrics, Policy};
