//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("schema: {0}")]
    Schema(String),

    #[error("space: distance matrix asymmetric at ({i},{j}): {dij} vs {dji}")]
    Asymmetric { i: usize, j: usize, dij: f64, dji: f64 },

    #[error("space: nonzero diagonal at ({i},{i}): {value}")]
    NonzeroDiagonal { i: usize, value: f64 },

    #[error("space: nonpositive off-diagonal distance at ({i},{j}): {value}")]
    NonpositiveDistance { i: usize, j: usize, value: f64 },

    #[error("space: nonpositive mass at point {i}: {value}")]
    NonpositiveMass { i: usize, value: f64 },

    #[error(
        "space: triangle inequality violated at ({i},{j},{k}): d({i},{k}) = {dik} > {dij} + {djk}"
    )]
    TriangleViolation { i: usize, j: usize, k: usize, dik: f64, dij: f64, djk: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("max iterations exhausted: {0}")]
    MaxIter(String),

    #[error("index search cap {cap} exhausted at level {level} (Delta = {delta})")]
    IndexCapExhausted { level: usize, delta: f64, cap: usize },

    #[error("construction failure: {0}")]
    Construction(String),
}

impl Error {
    /// Parse errors from serde, tagged as schema violations.
    pub fn schema(err: impl std::fmt::Display) -> Self {
        Error::Schema(err.to_string())
    }
}
