//! Job placement and discrete-event simulation for 3D-torus accelerator
//! clusters built from reconfigurable cubes joined by optical circuit
//! switches, with static-torus baselines.

#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod placement;
pub mod shapes;
pub mod simulator;
pub mod svg;
pub mod sweep;
pub mod topology;
pub mod workload;

pub use error::{Error, Result};
