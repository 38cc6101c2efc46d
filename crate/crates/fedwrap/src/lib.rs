//! Files, configuration, sockets and the command line around
//! `fedwrap-core`.

pub mod app;
pub mod config;
pub mod experiment;
pub mod io;
pub mod net;
pub mod state;
pub mod synth;

use std::path::{Path, PathBuf};

use fedwrap_core::dataset::DataError;
use fedwrap_core::federation::FederationError;
use fedwrap_core::model::ModelError;
use fedwrap_core::runtime::client::ClientError;
use fedwrap_core::sim::SimError;
use fedwrap_core::wrapper::WrapperError;

pub use fedwrap_core as core;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("cannot reach server at {addr}: {source}")]
    Connect { addr: String, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Wrapper(#[from] WrapperError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("interrupted")]
    Interrupted,
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Error {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn format(path: impl AsRef<Path>, message: impl ToString) -> Error {
        Error::Format { path: path.as_ref().to_path_buf(), message: message.to_string() }
    }

    /// 0 success, 1 experiment failure, 2 usage or configuration, 130 SIGINT.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Config(_)
            | Error::Bind { .. }
            | Error::Connect { .. }
            | Error::Data(_) => 2,
            Error::Wrapper(WrapperError::Config(_)) => 2,
            Error::Federation(FederationError::Interrupted) | Error::Interrupted => 130,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
