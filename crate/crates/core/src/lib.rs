pub mod autodiff;
mod binio;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod meta;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
