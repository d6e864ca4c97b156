use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MfgError>;

/// Loss term that produced a non-finite value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    TransportCost,
    RunningCost,
    HjbResidual,
    TerminalCost,
    TerminalPenalty,
}

impl std::fmt::Display for LossTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            LossTerm::TransportCost => "c_L",
            LossTerm::RunningCost => "c_F",
            LossTerm::HjbResidual => "c_1",
            LossTerm::TerminalCost => "G_hat",
            LossTerm::TerminalPenalty => "C_2",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum MfgError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite {term} for sample {sample}")]
    NonFinite { term: LossTerm, sample: usize },

    #[error("integration error for sample {sample} at t={t}: {reason}")]
    Integration {
        sample: usize,
        t: f64,
        reason: String,
    },

    #[error("line search failed after {backtracks} backtracks")]
    LineSearch { backtracks: usize },

    #[error("non-finite loss at iteration {iter}")]
    Diverged { iter: usize },

    #[error("characteristics cross: finite-difference Jacobian determinant is {det:e}")]
    NonInvertible { det: f64 },

    #[error("CFL condition violated: {0}")]
    Cfl(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error in {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MfgError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MfgError::Io {
            path: path.into(),
            source,
        }
    }
}
