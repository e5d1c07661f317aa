//! Trajectory forecasting with a high-capacity teacher, a compact student,
//! multi-granular distillation, closed-loop PPO refinement, and a
//! complexity-ordered curriculum.

pub mod checkpoint;
pub mod config;
pub mod curriculum;
pub mod distill;
pub mod error;
pub mod graph;
pub mod head;
pub mod hybrid;
pub mod io;
pub mod metrics;
pub mod moe;
pub mod nn;
pub mod params;
pub mod profile;
pub mod pipeline;
pub mod rl;
pub mod scene;
pub mod sim;
pub mod student;
pub mod teacher;
pub mod train;

pub use error::{CoreError, Result};
