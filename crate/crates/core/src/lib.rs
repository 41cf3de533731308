//! Context-augmented forecasting: data-driven context selection, dynamic
//! exponential-smoothing decomposition, an FFT-feature context track with
//! per-series modulation, stacked weighted dilated RNN cells and
//! pinball-loss training on a small reverse-mode autodiff tape.

pub mod config;
pub mod context;
pub mod data;
pub mod error;
pub mod es;
pub mod eval;
pub mod forecaster;
pub mod model;
pub mod params;
pub mod select;
pub mod tensor;
pub mod wdrnn;

pub use error::{Error, Result};
