//! Key-graph attention for image restoration, at desk scale.
//!
//! The crate builds, per window of a feature map, a sparse top-k graph over
//! node self-similarity and runs scaled dot-product attention restricted to
//! that graph. Three interchangeable backends realize the same operation with
//! different memory/compute trade-offs (gather, mask, blockwise streaming
//! with online softmax). On top sit the transformer stage (shared graph,
//! layer loop, residual tail convolution), a small grayscale denoising
//! network with training, and an analytic cost model with a measured scaling
//! harness.

pub mod attention;
pub mod bench;
pub mod block;
pub mod checks;
pub mod config;
pub mod error;
pub mod keygraph;
pub(crate) mod mapcache;
pub mod model;
pub mod numerics;
pub mod pgm;
pub mod train;
pub mod windowing;

pub use error::{KgtError, Result};
pub use numerics::{Parameter, Real, Tensor, Var};
