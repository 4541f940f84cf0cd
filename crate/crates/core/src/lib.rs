//! Point-view relation fusion for 3D shape recognition.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` arrays, a reverse-mode tape, parameters,
//!   optimisers, gradient checking and checkpoints.
//! * [`nn`]: dense layers and MLPs on top of the tape.
//! * [`synth`]: procedural labelled shapes with paired point clouds and
//!   per-camera view descriptors.
//! * [`encoders`]: EdgeConv point encoder and weight-shared view encoder.
//! * [`fusion`]: relation scores, residual view enhancement, single-view
//!   and multi-view fusion, and the classification head.
//! * [`train`]: two-phase training, classification and retrieval metrics,
//!   ablation and robustness runners.
//! * [`config`]: the experiment configuration file; [`io`] holds the shared
//!   file helpers and [`alloc`] the allocator settings used by long runs.
//! * [`verify`]: the self-check suite behind `pvrf verify`.

pub mod alloc;
pub mod config;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod io;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use alloc::tune_allocator;
pub use error::{Error, Result};
