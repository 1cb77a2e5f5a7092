use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not hyperbolic: min | |mu| - 1 | = {min_gap:e}")]
    NotHyperbolic { min_gap: f64 },

    #[error("eigenvalue solver failed to converge on a {dim}x{dim} matrix")]
    EigenSolverFailure { dim: usize },

    #[error("matrix is not in GL(d, Z): determinant is {det}")]
    NotUnimodular { det: i128 },

    #[error("integer overflow while computing {0}")]
    IntegerOverflow(&'static str),

    #[error("fibre inversion did not converge after {steps} Newton steps (residual {residual:e})")]
    InversionFailed { steps: usize, residual: f64 },

    #[error("singular Jacobian: {0}")]
    SingularJacobian(String),

    #[error("fibre map is not an equivariant torus lift: {0}")]
    NotEquivariant(String),

    #[error("induced homology {found:?} does not match model matrix {expected:?}")]
    HomologyMismatch {
        expected: Vec<Vec<i64>>,
        found: Vec<Vec<i64>>,
    },

    #[error("base maps of system and model differ")]
    BaseMismatch,

    #[error("leaf is not a graph over its reference subspace: {0}")]
    GraphFailure(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration rejected:\n{}", format_config_errors(.0))]
    Config(Vec<ConfigError>),
}

fn format_config_errors(errors: &[ConfigError]) -> String {
    errors
        .iter()
        .map(|e| format!("  - {e}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
