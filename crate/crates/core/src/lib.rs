//! Forecasting and counterfactual intervention analysis for amine-based
//! carbon-capture plant telemetry.
//!
//! The pipeline runs bottom-up through these modules:
//!
//! - [`ingest`]: CSV loading, gap filling, resampling, concatenation, splits.
//! - [`synthplant`]: seeded synthetic plant with closed-form responses.
//! - [`features`]: min-max scaling, lag and rolling features, windowing.
//! - [`neuralcore`]: tensors, reverse-mode differentiation, LSTM/ConvLSTM cells, Adam.
//! - [`architectures`]: Basic/Stacked/Bi/Conv LSTM models and the model file format.
//! - [`training`]: early-stopped training, metrics, forward-chaining CV, Bayesian search.
//! - [`forecast`]: exogenous and autoregressive multi-step forecasts.
//! - [`causal`]: single- and two-feature intervention sweeps.

pub mod architectures;
pub mod causal;
pub mod error;
pub mod features;
pub mod forecast;
pub mod ingest;
pub mod neuralcore;
pub mod synthplant;
pub mod training;

pub use error::{Error, Result};
