pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod frechet;
pub mod gan;
pub mod image;
pub mod io_util;
pub mod losses;
pub mod margin;
pub mod nn;
pub mod ops;
pub mod oracle;
pub mod pipeline;
pub mod providers;
pub mod recognition;
pub mod training;

pub use error::{Error, Result};
