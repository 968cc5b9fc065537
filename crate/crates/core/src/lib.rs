//! Multi-task self-supervised anomaly detection.
//!
//! A patch transformer whose feed-forward blocks are task-routed
//! mixtures of experts is trained jointly on five proxy tasks (masked
//! image modeling, jigsaw solving, patch de-mixing, and two pseudo-anomaly
//! classifiers). At inference each task's failure to solve an image
//! becomes an anomaly score; scores are fused by weighted percentile rank.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod famo;
pub mod moe;
pub mod params;
pub mod pseudo;
pub mod rng;
pub mod scoring;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
