//! Ab-initio single-particle cryo-EM reconstruction at desk scale.
//!
//! A multi-head pose encoder and an explicit mantissa/exponent Hartley volume are trained
//! jointly; pose estimation then switches to per-particle gradient descent on SO(3).

pub mod cli;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod objective;
pub mod optim;
pub mod parallel;
pub mod particles;
pub mod simulator;
pub mod trainer;
pub mod transforms;
pub mod volume;

pub use error::{Error, Result};
