//! Integer discrete flows for lossless compression.

pub mod analysis;
pub mod autodiff;
pub mod config;
mod container;
pub mod data;
pub mod dists;
pub mod error;
pub mod flows;
pub mod grid;
pub mod nn;
pub mod rans;
pub mod train;

pub use error::{Error, Result};
