//! Hierarchical conversation model for end-to-end spoken language
//! understanding: speech and text utterance encoders share one
//! conversation encoder and one multilabel classifier.

pub mod ablate;
pub mod autodiff;
pub mod config;
pub mod conversation;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod training;

pub use error::{Error, Result};
pub use config::ExperimentConfig;
