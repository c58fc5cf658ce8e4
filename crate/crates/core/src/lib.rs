//! Cooperative multi-agent reinforcement learning with learned communication
//! over a simulated slotted wireless network.
//!
//! The crate is organised bottom-up:
//!
//! - [`wireless`]: path loss, p-CSMA contention and SINR arbitration for one game step
//! - [`grid`]: predator-prey and lumberjacks grid worlds
//! - [`meta_env`]: game and radio aligned into one environment with a one-step message lag
//! - [`nn`]: dense/GRU/mixing layers with analytic gradients, Adam, checkpoints
//! - [`codec`]: set encoders for received messages
//! - [`trainer`]: off-policy value-decomposition and on-policy REINFORCE trainers
//! - [`config`] and [`harness`]: experiment configuration, runs, evaluation and suites

pub mod codec;
pub mod config;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod harness;
pub mod meta_env;
pub mod nn;
pub mod trainer;
pub mod wireless;

pub use error::{Error, Result};
pub use geometry::{Obstacle, Orientation, Pos};
