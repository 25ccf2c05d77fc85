//! Simulation, control and learning pipeline for robotic food slicing.
//!
//! The pipeline runs in four stages: record force profiles from a scripted
//! cut, calibrate a differentiable cutting model (or a compression-spring
//! baseline) against them, train a compliance-control policy with soft
//! actor-critic inside a lockstep co-simulation of the cutting model and a
//! planar robot, and compare the resulting policies.

pub mod baseline;
pub mod calibration;
pub mod bridge;
pub mod cutsim;
pub mod error;
pub mod fdcc;
pub mod harness;
pub mod rl;
pub mod robosim;

pub use cutsim::{ContactForce, CutScene, FoodSpec, ForceProfile, KnifeState, ProfileSample, SimParams};
pub use error::{Error, Result};
pub use fdcc::{CompliantTarget, ControllerGains, GainBounds};
pub use robosim::{ChainSpec, RobotState};
