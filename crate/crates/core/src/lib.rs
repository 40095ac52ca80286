//! Multi-view state fusion with bisimulation metrics.

pub mod agent;
pub mod envs;
pub mod error;
pub mod harness;
pub mod losses;
pub mod mdp;
pub mod model;
pub mod seeding;
pub mod stats;

pub use error::{Error, Result};
