pub mod accum;
pub mod activation;
pub mod config;
pub mod criteria;
pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod flow;
pub mod gaussian;
pub mod io;
pub mod kernel;
pub mod quadrature;
pub mod reproduce;
pub mod rng;

pub use activation::Activation;
pub use error::{Error, Result};
pub use kernel::{KernelMatrix, PairIndex, PairMatrix};
pub use quadrature::QuadratureRule;
