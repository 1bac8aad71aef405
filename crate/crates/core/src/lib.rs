//! Compressed gradient communication for data-parallel training.

pub mod codec;
pub mod collectives;
pub mod model;
pub mod simnet;
pub mod adaptive;
pub mod engine;
pub mod cli;
