//! Train, prune, explain and calibrate a small residual CNN.

pub mod calib;
pub mod cam;
pub mod data;
pub mod error;
pub mod fsutil;
pub mod model;
pub mod prune;
pub mod road;
pub mod run;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
