pub mod action_offset;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod ecn;
pub mod embedding;
pub mod error;
pub mod f64file;
pub mod iea;
pub mod metrics;
pub mod implicit_mining;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
