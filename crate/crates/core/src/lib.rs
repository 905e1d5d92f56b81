//! Multimodal (video, audio, text) contrastive representation learning at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff engine, miniature video,
//! audio and text encoders, the shared / disjoint / fine-and-coarse embedding
//! graphs, NCE and MIL-NCE objectives, a synthetic correlated corpus, a
//! training loop, video-to-image deflation and downstream evaluation.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod deflation;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod graph;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
