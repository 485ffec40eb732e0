//! Origin-destination demand forecasting with radiation and attraction
//! capacity learning, plus the classical mobility baselines and a
//! synthetic-city generator for end-to-end verification.

pub mod autodiff;
pub mod baselines;
pub mod capacity;
pub mod competition;
pub mod config;
pub mod error;
pub mod geodata;
pub mod head;
pub mod model;
pub mod pipeline;
pub mod population;
pub mod preprocess;
pub mod synth;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
