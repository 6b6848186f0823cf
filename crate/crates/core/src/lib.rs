//! Training-free grounding experiments on a small joint-attention diffusion
//! transformer: a rectified-flow model, attention capture and intervention,
//! attention-based segmentation, and the tools to evaluate all of it.

pub mod attnlab;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod flow;
pub mod io;
pub mod magnet;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod real;
pub mod rng;
pub mod segment;

pub use error::{Error, Result};
pub use real::Real;
