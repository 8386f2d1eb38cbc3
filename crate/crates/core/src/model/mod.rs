//! Model components: rectifier → backbone → glyph segmentation →
//! aligned fusion → decoder, assembled into the full recognizer.

pub mod align_fuse;
pub mod backbone;
pub mod cam;
pub mod decoder;
pub mod objective;
pub mod glyph_seg;
pub mod rectifier;

pub use align_fuse::{make_reference_grid, AlignFuse, FusionError, FusionStrategy};
pub use backbone::{Backbone, BackboneConfig};
pub use cam::{argmax_masks, seg_pixel_accuracy, CamModel, ModelVariant};
pub use decoder::{word_accuracy, Decoder, DecoderConfig, DecoderError};
pub use objective::{
    recognition_loss, segmentation_loss, total_loss, LossError, LossReport, DEFAULT_LAMBDA,
};
pub use glyph_seg::SegHead;
pub use rectifier::{canonical_fiducials, Rectifier, TpsBasis, TpsError};
