//! Training, evaluation and prediction around the counting model.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod predict;
pub mod schedule;
pub mod synth;
pub mod train;
