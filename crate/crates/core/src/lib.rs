//! Teacher-student distillation of distortion-robust vision transformer
//! encoders.
//!
//! A frozen teacher encodes clean images; a student with the same
//! architecture encodes distorted copies and is trained to match the
//! teacher's class token, patch tokens, and last-layer class attention.

pub mod data;
pub mod distill;
pub mod distortions;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod linalg;
pub mod rng;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use image::Image;
