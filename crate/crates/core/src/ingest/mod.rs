//! Building datasets from raw corpora and from the synthetic generator.

mod aerial;
mod em;
mod synthetic;
mod tiling;

pub use aerial::{decode_colour_mask, load_aerial_dubai, load_aerial_dubai_with, AERIAL_CLASSES, AERIAL_LEGEND};
pub use em::{em_default_tiling, load_electron_microscopy, read_tiff_pages, EM_GROUNDTRUTH, EM_VOLUME};
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use tiling::{tile_image, EdgePolicy, TilingSpec};
