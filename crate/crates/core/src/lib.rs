pub mod cli;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod ot;
pub mod reweight;

pub use error::{Error, Result};
