//! Temporal graph learning recurrent network (TGLRN) for traffic forecasting.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`params`], [`gradcheck`], [`gradsuite`]: dense `f64` tensors,
//!   a reverse-mode tape and a finite-difference harness.
//! - [`roadnet`]: the directed sensor graph, hop distances and k-hop masks.
//! - [`data`]: flow ingestion, z-scoring, windowing and synthetic datasets.
//! - [`dyngraph`]: per-time-step graph construction from recurrent node
//!   embeddings, with Gumbel relaxation, edge sampling and hop-range pruning.
//! - [`stnet`]: diffusion convolution, gated temporal convolution and the
//!   spatio-temporal blocks.
//! - [`model`], [`trainer`], [`checkpoint`]: assembly, MAE training,
//!   metrics and persistence.
//! - [`config`]: the flat `key = value` run configuration.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dyngraph;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod model;
pub mod params;
pub mod roadnet;
pub mod rng;
pub mod stnet;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
