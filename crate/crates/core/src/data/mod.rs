//! Ingestion: DICOM slices to windowed three-channel images, the `.sfi`
//! sample format, manifests, deterministic batching and a synthetic corpus.

mod batch;
mod dicom;
mod resize;
mod sfi;
mod synth;
mod window;

pub use batch::{batch_iter, read_manifest, write_manifest, Batch, BatchIter, Manifest, ManifestEntry};
pub use dicom::{parse_dicom_lite, write_dicom_lite, CtSlice, FixtureOptions, EXPLICIT_VR_LE};
pub use resize::resize_bilinear;
pub use sfi::{decode_sfi, encode_sfi, read_sfi, write_sfi, SFI_MAGIC};
pub use synth::{render_sample, synth_generate, synth_samples, SynthSample, LESION_HU, POSITIVE_RATE};
pub use window::{hu_window_stack, window_value, WindowSpec, DEFAULT_WINDOWS};

use std::path::PathBuf;

use thiserror::Error;

/// Number of labels: "any" at index 0 followed by the five subtypes.
pub const NUM_LABELS: usize = 6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("unsupported DICOM content: {0}")]
    Unsupported(String),
    #[error("corrupt data at byte {offset}: {msg} (need {needed} bytes, {available} available)")]
    Corrupt {
        msg: String,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("missing required element {0}")]
    MissingElement(&'static str),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("bad .sfi data: {0}")]
    Sfi(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("sample `{id}` ({path}): {source}")]
    MissingSample {
        id: String,
        path: PathBuf,
        #[source]
        source: Box<DataError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}
