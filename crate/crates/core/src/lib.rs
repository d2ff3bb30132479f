//! Few-shot defect synthesis on procedural textures: a small conditional
//! diffusion model, masked concept learning, noise-blended inpainting,
//! seamless integration and detection evaluation.

pub mod bench;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod generation;
pub mod grid;
pub mod imageio;
pub mod integration;
pub mod inversion;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
pub use grid::{BinaryMask, Grid, ImageGrid, LatentGrid, PixelBox};
