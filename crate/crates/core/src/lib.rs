//! Visuo-tactile imitation learning at desk scale.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: f64 tensors and a reverse-mode autodiff tape.
//! - [`nn`]: linear layers, layer norm, attention and transformer blocks.
//! - [`fusion`]: cross-attention between visual and tactile token streams.
//! - [`policy`]: the CVAE action model with tactile forecasting.
//! - [`training`]: losses, Adam, the curriculum and the training loop.
//! - [`synthworld`]: a 2-D insertion world whose fine phase needs touch.
//! - [`hns`]: stage-weighted scoring of rollouts and score sheets.
//! - [`ablation`]: variant sweeps on a shared dataset.
//!
//! [`config`] holds every knob; [`checkpoint`] and [`gradcheck`] are the
//! persistence and verification surfaces used by the command-line tool.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod fusion;
pub mod gradcheck;
pub mod hns;
pub mod nn;
pub mod policy;
pub mod synthworld;
pub mod tensor;
pub mod training;

use std::path::{Path, PathBuf};

pub use config::{Config, Variant};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error("config: {0}")]
    Config(#[from] config::ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Format(#[from] checkpoint::FormatError),
    #[error(transparent)]
    Hns(#[from] hns::HnsError),
    /// A loss or gradient stopped being finite.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Inputs do not fit together: shapes versus config, digests, variant versus phase.
    #[error("{0}")]
    Incompatible(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/policy.md")]
    mod policy {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/world.md")]
    mod world {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
}
