//! Decision-focused demand forecasting for EV charging stations.
//!
//! A station schedules charging power for customers whose energy demand responds
//! to the selling price they are offered. The schedule is the optimum of a convex
//! QP built from demand forecasts ([`model`], solved by [`qpsolver`]). The
//! forecaster can be trained on demand error alone or on the operation cost of
//! the schedules it induces, which requires differentiating the QP optimum
//! ([`diffopt`]). [`learner`] holds the forecaster and both training regimes;
//! [`pbdr`] generates synthetic customers and datasets.

pub mod diffopt;
pub mod error;
pub mod gradcheck;
pub mod learner;
pub mod model;
pub mod pbdr;
pub mod qpsolver;

pub use error::{Error, Result};
