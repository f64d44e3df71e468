//! Graph neural network dynamics laboratory.

pub mod autodiff;
pub mod dynamics;
pub mod graph;
pub mod lemmas;
pub mod nn;
pub mod prune;
pub mod error;
pub mod experiment;

pub use error::{Error, Result};
