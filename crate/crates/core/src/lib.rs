//! End-to-end scene-text recognition with character-aware glyph masks:
//! synthetic data generation, a rectifier → backbone → glyph-segmentation →
//! aligned-fusion → decoder model, a joint recognition + segmentation loss,
//! and the training/evaluation machinery around them.

pub mod data;
pub mod linalg;
pub mod model;
pub mod ops;
pub mod param;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use param::Param;
pub use tensor::{Scalar, Tensor};
