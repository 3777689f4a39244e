//! Path-conditioned reinforcement-learning local planner in a planar
//! navigation simulator.

pub mod ablation;
pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod pathrep;
pub mod plot;
pub mod policy;
pub mod reward;
pub mod roadmap;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use geometry::Vec2;
