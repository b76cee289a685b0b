//! Attentive joint model of longitudinal measurements, recurrent events and
//! survival.

pub mod autodiff;
pub mod data;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod quadrature;
pub mod simulator;
pub mod thinning;
pub mod training;
pub mod transformer;

pub use error::{LsrError, Result};
