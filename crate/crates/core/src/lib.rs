//! Desk-scale testbed for autonomous coarse-waste sorting.
//!
//! Two halves share one pipeline:
//!
//! * **Perception** turns a multispectral exposure series into a per-pixel
//!   material map: [`cube`] (band model, capture containers, exposure control),
//!   [`register`] (cross-camera SIFT + RANSAC homographies and warping) and
//!   [`matclass`] (per-pixel MLP, metrics, band ablation, synthetic scenes).
//! * **Control** moves a single hydraulic joint to pick what perception found:
//!   [`plant`] (synthetic joint with dead-zone, hysteresis, temperature gain
//!   and a parallel-kinematic sensor), [`sysid`] (LSTM motion predictor) and
//!   [`control`] (pick planning, trajectories, PID, learned policy, marker
//!   state estimation, episodes).

// `!(x > 0.0)` is how the validators reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod cube;
pub mod error;
pub mod image;
pub mod matclass;
pub mod plant;
pub mod register;
pub mod sysid;

mod rng;

pub use error::{Error, Result};
