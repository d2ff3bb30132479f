//! Minimal hand-differentiated network building blocks.

pub mod ops;
pub mod params;
mod real;

pub use ops::{Conv2d, CrossAttention, Linear};
pub use params::{clip_grad_norm, Adam, Init, ParamEntry, ParamLayout};
pub use real::Real;
