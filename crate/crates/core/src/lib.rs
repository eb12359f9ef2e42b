//! Quasi-stationary analysis of absorbed Markov chains on reducible finite
//! state spaces.
//!
//! The pipeline is: validate an [`AbsorbedChain`], split it into
//! communication classes ([`classes`]), compute per-class Perron data
//! ([`spectral`]), assemble the global certificate ([`synthesis`]) and check it
//! against brute-force iteration ([`oracle`]).

pub mod chain;
pub mod classes;
pub mod commands;
pub mod dsl;
pub mod error;
pub mod fixtures;
pub mod io;
pub mod linalg;
pub mod oplab;
pub mod oracle;
pub mod report;
pub mod spectral;
pub mod synthesis;

pub use chain::{AbsorbedChain, FunctionVector, MeasureVector};
pub use error::{Error, Result};
