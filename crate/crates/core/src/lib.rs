//! Stochastic inversion of process-structure-property links for random
//! two-phase microstructures.
//!
//! The crate is organised bottom-up: [`tensorad`] supplies reverse-mode
//! differentiation, [`randfield`] maps process parameters to random
//! microstructures, [`homog`] labels microstructures with effective
//! properties, [`surrogate`] learns a probabilistic property model,
//! [`vbem`] optimizes process parameters against it and [`active`] grows
//! the training set. [`pipeline`] strings everything into runnable commands.

pub mod active;
pub mod homog;
pub mod io;
pub mod optim;
pub mod pipeline;
pub mod randfield;
pub mod seed;
pub mod surrogate;
pub mod tensorad;
pub mod vbem;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("numerical: {0}")]
    Numerical(String),
    #[error("interrupted: {0}")]
    Interrupted(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] tensorad::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Numerical(_) | Error::Tensor(_) => 3,
            _ => 1,
        }
    }
}
