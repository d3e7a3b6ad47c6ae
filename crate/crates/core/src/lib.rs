//! Exact local linear models of feed-forward ReLU networks.
//!
//! A trained network is split into the activation regions its training data
//! visits; on each region the network is an affine map. The modules below
//! compute those maps and build interpretation, diagnostic and
//! simplification reports on top of them.

pub mod cli;
pub mod data;
pub mod diagnose;
pub mod glm;
pub mod interpret;
pub mod metrics;
pub mod network;
pub mod report;
pub mod simplify;
pub mod stats;
pub mod svg;
pub mod trainer;
pub mod unwrapper;

use thiserror::Error;

/// Any library error, prefixed with the module it came from.
#[derive(Debug, Error)]
pub enum Error {
    #[error("network: {0}")]
    Network(#[from] network::NetworkError),
    #[error("data: {0}")]
    Data(#[from] data::DataError),
    #[error("unwrapper: {0}")]
    Unwrap(#[from] unwrapper::UnwrapError),
    #[error("glm: {0}")]
    Glm(#[from] glm::GlmError),
    #[error("trainer: {0}")]
    Train(#[from] trainer::TrainError),
    #[error("interpret: {0}")]
    Interpret(#[from] interpret::InterpretError),
    #[error("diagnose: {0}")]
    Diagnose(#[from] diagnose::DiagnoseError),
    #[error("simplify: {0}")]
    Simplify(#[from] simplify::SimplifyError),
    #[error("cli: {0}")]
    Cli(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
