//! Pose regression from rectified spatiotemporal volumes: synthetic walkers,
//! object-centric motion compensation, multi-scale 3D HOG, random-feature
//! kernel embeddings, and KRR / KDE / deep-network regressors.

pub mod binfmt;
pub mod cli;
pub mod domain;
pub mod error;
pub mod eval;
pub mod hog3d;
pub mod image;
pub mod kernels;
pub mod manifest;
pub mod motioncomp;
pub mod nnet;
pub mod pipeline;
pub mod regress;
pub mod seed;
pub mod selftest;
pub mod synth;

pub use error::{Error, Result};
