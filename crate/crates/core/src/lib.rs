//! Monocular visual odometry with a dual-branch convolutional LSTM and
//! context-aware feature guidance.
//!
//! The crate is self-contained: a small reverse-mode tensor engine drives the
//! flow-style encoder, the recurrent branches and the guidance blocks; the
//! data, evaluation and export modules cover everything around training.

pub mod config;
pub mod convlstm;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod export;
pub mod gradcheck;
pub mod guidance;
pub mod model;
pub mod pose;
pub mod tensor;

pub use error::{Error, Result};
