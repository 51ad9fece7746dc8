//! Unsupervised deformable image registration with patch-based attention.
//!
//! A fixed and a moving image are cut into patches and embedded as token
//! sequences. A transformer encoder reads the fixed tokens; a decoder reads
//! the moving tokens and cross-attends to the encoder. A linear head turns
//! every decoder token into the displacements of its patch, the field warps
//! the moving image through a differentiable bilinear sampler, and the
//! whole chain is trained end to end on an image-similarity loss. Several
//! patch sizes can run side by side and have their fields fused by learned
//! softmax weights.

pub mod attention;
pub mod dataio;
pub mod deform;
pub mod embed;
pub mod error;
pub mod eval;
pub mod exec;
pub mod graph;
pub mod tensor;
pub mod train;
pub mod warp;

pub use error::{AirError, Result};
pub use exec::Exec;
