//! Clustering-based unsupervised person re-identification with
//! camera-adversarial training.

pub mod adversary;
pub mod data;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod nn;
pub mod objectives;
pub mod pseudo;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
