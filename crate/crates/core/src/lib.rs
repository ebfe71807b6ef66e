pub mod barlow;
pub mod check;
pub mod cli;
pub mod config;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod pooling;
pub mod synthdata;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
