//! Geometry and evaluation machinery for a two-stage 3D car detector that
//! seeds point-cloud region proposals from monocular pose estimates.
//!
//! Stages:
//!
//! 1. [`mono`] solves a 3D center from a 2D box plus regressed size and
//!    heading, then scatters seed points along the viewing ray.
//! 2. [`pipeline`] gathers points inside standing-cylinder proposals, scores
//!    them (RPN), regresses boxes (BRN) and suppresses duplicates.
//! 3. [`eval`] matches detections against labels and runs the recall sweeps
//!    and the sensor desynchronization study.
//!
//! Network predictions are abstracted behind traits in [`pipeline`]; the
//! oracle predictors there stand in for trained models.

pub mod codec;
pub mod eval;
pub mod geom;
pub mod kitti;
pub mod losses;
pub mod mono;
pub mod pipeline;
pub mod rng;
pub mod synth;
