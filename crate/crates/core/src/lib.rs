pub mod bench;
pub mod error;
pub mod gaussian;
pub mod inference;
pub mod linalg;
pub mod map_smoother;
pub mod models;
pub mod optimizer;
pub mod particle;
pub mod rng;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
