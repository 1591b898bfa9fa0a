//! Forecasting library for logistics pressure in on-demand delivery.
//!
//! The crate bundles a minimal reverse-mode numerics engine, geospatial
//! preprocessing, a synthetic order-event simulator, sliding-window feature
//! aggregation, the spatio-temporal transformer + memory network model, and
//! the training/evaluation harness around it.

pub mod error;
pub mod features;
pub mod fingerprint;
pub mod geo;
pub mod numerics;
pub mod simulator;

pub use error::{Error, Result};
pub use numerics::{AdamState, DifferentiableValue, Graph, Parameter, Tensor, ValueId};
