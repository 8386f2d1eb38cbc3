//! Synthetic data engine: canonical mask rendering, styled image synthesis,
//! augmentation, pixel-weight computation, and the on-disk dataset format.

pub mod augment;
pub mod dataset;
pub mod font;
pub mod synth;

pub use augment::{augment, AugmentConfig};
pub use dataset::{load_valid, read_dataset, write_dataset, DatasetReader, DatasetWriter};
pub use font::{FontSpec, FontWeight, LoadedFont, SlotLayout};
pub use synth::{
    generate_dataset, generate_sample, render_canonical_mask, sample_label, synthesize_image,
    SynthConfig,
};

use crate::tensor::{Scalar, Tensor};
use thiserror::Error;

/// Input image extent fed to the rectifier.
pub const IMG_H: usize = 64;
pub const IMG_W: usize = 256;
/// Canonical mask / rectified image extent.
pub const MASK_H: usize = 32;
pub const MASK_W: usize = 128;

pub const DATASET_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("character {0:?} is outside the vocabulary")]
    UnknownCharacter(char),
    #[error("label has {0} characters, max is {1}")]
    LabelTooLong(usize, usize),
    #[error("mask contains no foreground pixels")]
    AllBackground,
    #[error("corrupt record {id}: {reason}")]
    CorruptRecord { id: String, reason: String },
    #[error("missing mask for record {0}")]
    MissingMask(String),
    #[error("dataset schema {found} does not match supported {expected}")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("vocab hash mismatch: dataset {found}, current {expected}")]
    VocabMismatch { found: String, expected: String },
    #[error("font error: {0}")]
    Font(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One training example: styled input image, label, canonical glyph mask.
#[derive(Clone, Debug)]
pub struct TextSample {
    pub id: String,
    /// [3, 64, 256] in [0,1].
    pub image: Tensor<f32>,
    pub label: String,
    /// Row-major 32×128, values 0..=68 (0 = background).
    pub mask: Vec<u8>,
}

/// Per-pixel segmentation weights: w = N_neg/(N − N_neg) on foreground, 1 on
/// background. Errors when the mask has no foreground at all.
pub fn compute_pixel_weights<T: Scalar>(
    mask: &[u8], h: usize, w: usize,
) -> Result<Tensor<T>, DataError> {
    assert_eq!(mask.len(), h * w);
    let n = h * w;
    let n_neg = mask.iter().filter(|&&v| v == 0).count();
    if n_neg == n {
        return Err(DataError::AllBackground);
    }
    let fg_weight = n_neg as f64 / (n - n_neg) as f64;
    if n_neg == 0 {
        log::warn!("all-foreground mask: foreground weight degenerates to 0");
    }
    let mut out = Tensor::zeros(vec![h, w]);
    for (o, &m) in out.data.iter_mut().zip(mask.iter()) {
        *o = if m > 0 { T::from_f64(fg_weight) } else { T::one() };
    }
    Ok(out)
}
