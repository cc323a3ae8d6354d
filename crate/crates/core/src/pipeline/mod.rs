//! Desk-scale two-stage adaptation experiment.

pub mod config;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod scene;
pub mod train;
