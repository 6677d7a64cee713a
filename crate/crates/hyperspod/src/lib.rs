//! Benchmark toolkit for hyperspectral point-object detection: scene
//! simulation from a spectral fluctuation model and the linear mixing model,
//! classic hyperspectral target detectors, forward-only transformer
//! detection kernels, and instance-level evaluation.

pub mod annotate;
pub mod assign;
pub mod error;
pub mod eval;
pub mod hsicube;
pub mod htd;
pub mod kernels;
pub mod scenesynth;
pub mod specmodel;

pub use error::{Error, Result};
