//! Joint latent class illness-death models for a longitudinal marker and
//! interval-censored semi-competing events.

pub mod data;
pub mod error;
pub mod hazards;
pub mod likelihood;
pub mod longitudinal;
pub mod optimizer;
pub mod params;
pub mod postfit;
pub mod quadrature;
pub mod replicate;
pub mod simulator;
pub mod spec;

pub use error::{Error, Result};
