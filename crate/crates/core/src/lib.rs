pub mod cli;
pub mod error;
pub mod experiments;
pub mod fbsde;
pub mod io;
pub mod lattice;
pub mod lqoracle;
pub mod metrics;
pub mod mfg;
pub mod model;

pub use error::{Error, Result};
