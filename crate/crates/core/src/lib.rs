//! Two-stream cloth-changing person re-identification at desk scale.
//!
//! The global stream learns cloth-irrelevant features through an attention
//! map supervised by parsing masks; the face stream distills a teacher that
//! sees clean faces into a student that sees degraded ones. A procedural
//! dataset generator supplies the masks, face boxes, and clean/degraded face
//! pairs that external networks would otherwise provide.

pub mod ablate;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod eval;
pub mod face;
pub mod losses;
pub mod model;
pub mod nn;
pub mod plot;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
