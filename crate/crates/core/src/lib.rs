//! Penalized sieve minimum distance (PSMD) estimation of nonparametric
//! instrumental variable models, mean (NPIV) and quantile (NPQIV), with
//! sieve Wald, quasi-likelihood ratio and score inference on scalar
//! functionals, plus the weighted bootstrap.

pub mod basis;
pub mod bootstrap;
pub mod data_io;
pub mod error;
pub mod exec;
pub mod functionals;
pub mod inference;
pub mod linalg;
pub mod mc;
pub mod models;
pub mod normal;
pub mod optim;
pub mod psmd;
pub mod variance;

pub use error::{Error, Result};
