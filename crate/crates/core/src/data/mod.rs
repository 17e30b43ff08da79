//! Dataset layout, tiling, augmentation and the synthetic corpus.

pub mod augment;
pub mod dataset;
pub mod image;
pub mod synth;
pub mod tiling;

pub use augment::{augment, AugmentOp};
pub use dataset::{load_dataset, split, DatasetManifest, ManifestEntry, Split};
pub use image::{image_to_tensor, read_pnm, write_pnm, Image};
pub use synth::{synth_generate, synth_sample, SynthConfig, SynthRecord};
pub use tiling::{stitch_logits, tile_image, tile_origins};

use crate::models::derive_image_label;

/// An RGB tile with its binary mask and where it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleTile {
    pub image: Image,
    /// Values in {0, 1}.
    pub mask: Image,
    /// Derived from `mask`.
    pub label: usize,
    pub source_id: String,
    /// (row, col) of the tile within its source raster.
    pub origin: (usize, usize),
}

impl SampleTile {
    pub fn new(image: Image, mask: Image, source_id: String, origin: (usize, usize)) -> Self {
        let label = derive_image_label(&mask.data);
        Self {
            image,
            mask,
            label,
            source_id,
            origin,
        }
    }
}
