//! Continual domain expansion for trajectory prediction.
//!
//! A frozen generalized predictor is extended phase by phase with
//! hypernetwork-generated decoder heads and normalizing flows. Flow
//! likelihoods pick the specialized model for each scene and Dirichlet
//! fusion keeps the generalized model as a floor.

pub mod adcore;
pub mod bundle;
pub mod config;
pub mod contlearn;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod fuse;
pub mod hyper;
pub mod metrics;
pub mod prednet;
pub mod scenegen;
mod train;

pub use config::Config;
pub use error::{DecodeError, Result};
