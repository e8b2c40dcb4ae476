//! Asymmetric two-model video generation on procedurally generated scenes.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod generator;
pub mod masking;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod planner;
pub mod cli;
pub mod eval;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
