//! Recurrent image restoration with learned stopping.
//!
//! A restoration unit is applied repeatedly as a forward-Euler step on the degraded
//! image; a small recurrent policy decides after each step whether to continue.
//! The crate covers degradation and metrics, both networks, their training loops,
//! checkpoints and evaluation reports.

pub mod checkpoint;
pub mod cli;
pub mod csv;
pub mod degradation;
pub mod error;
pub mod eval;
pub mod image;
pub mod pipelines;
pub mod policy;
pub mod restorer;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, UnitKind};
pub use error::{DurrError, Result};
pub use image::Image;
pub use restorer::{build_restoration_unit, unfold_step, unfold_trajectory, RestorerArch, Trajectory};
pub use policy::{
    build_policy_unit, decorrelation_stop_index, oracle_peak_index, policy_decide, policy_q_step, Action, Episode, PolicyArch,
    PolicyState, StopDecision,
};
