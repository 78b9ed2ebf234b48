pub mod adjoint;
pub mod admm;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod lagrangian;
pub mod linalg;
pub mod problem;
pub mod subsolvers;
pub mod tuner;

pub use error::{Error, Result};
