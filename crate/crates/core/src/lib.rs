//! Multi-object tracking driven by a learned motion predictor.
//!
//! A small self-attention encoder, extended with a dynamic channel-mixing
//! MLP, predicts each track's next-frame box offset from its recent
//! history. Tracks are associated to detections by IoU with an optimal
//! linear assignment. Kalman and no-motion baselines, MOTChallenge I/O,
//! a synthetic scene generator and CLEAR/ID metrics round out the toolkit.

pub mod assignment;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod predictor;
pub mod tensor;
pub mod tracker;
pub mod train;

pub use error::{Error, Result};
