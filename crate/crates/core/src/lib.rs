//! n-CNN-ViT ("Scopeformer") built from first principles.
//!
//! `n` separable-convolution backbones see the same image; their final
//! residual-add feature maps are optionally reduced by a 1×1 convolution,
//! concatenated along channels and read as a token sequence by a ViT encoder
//! with a multi-label head.
//!
//! Module map:
//! - [`tensor`]: fp64 arrays and the reverse-mode tape.
//! - [`backbone`]: Xception-style separable blocks and the ensemble fusion.
//! - [`vit`]: tokenisation, self-attention encoder and classification head.
//! - [`loss`]: weighted multi-label log loss and accuracy metrics.
//! - [`data`]: DICOM subset parsing, HU windowing, resizing, synthetic corpora.
//! - [`config`]: the JSON run configuration.
//! - [`model`]: parameters, the assembled network and the shape planner.
//! - [`train`]: optimisers, the training loop and checkpoints.
//! - [`cli`]: the `scopeformer` command line.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
mod error;
pub mod gradcheck_suite;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
