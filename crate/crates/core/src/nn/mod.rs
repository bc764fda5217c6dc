pub mod checkpoint;
pub mod export;
mod maps;
mod ops;
mod real;
mod unet;

pub use maps::{gap, gap_backward, predict_masks, HeadActivation, MaskRule, ScoreMaps};
pub use real::Real;
pub use unet::{BackboneConfig, ForwardGraph, Gradients, Input, ModelState, OutputGrad, TensorSpec, DEPTH};
