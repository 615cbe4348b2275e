pub mod autodiff;
pub mod cli;
pub mod competition;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod segnet;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
