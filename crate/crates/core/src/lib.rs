//! Speaker embedding with masked cross self-attentive encoding: log-mel
//! frontend, residual backbone, utterance encoders, training loop and
//! verification scoring.

pub mod attention;
pub mod backbone;
pub mod config;
mod error;
pub mod evaluation;
pub mod frontend;
pub mod regularization;
pub mod selftest;
pub mod training;

pub use error::{Error, Result};
