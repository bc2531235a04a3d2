pub mod checkpoint;
pub mod cmie;
pub mod config;
pub mod data;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod pca;
pub mod plot;
pub mod scenario;
pub mod train;
pub mod uavd;
pub mod vgtb;
pub mod vstae;

pub use error::{Error, Result};
