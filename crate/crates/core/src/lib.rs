pub mod classifiers;
pub mod curriculum;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod neural;
pub mod offline;
pub mod scoring;
pub mod theory;

pub use error::{Error, Result};
