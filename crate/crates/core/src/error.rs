use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch{}: expected {expected}, got {actual:?}", layer_suffix(*.layer))]
    ShapeMismatch {
        layer: Option<usize>,
        expected: String,
        actual: Vec<usize>,
    },

    #[error("max-pool{} requires even spatial dims, got {height}x{width}", layer_suffix(*.layer))]
    OddSpatialDims {
        layer: Option<usize>,
        height: usize,
        width: usize,
    },

    #[error("forward cache does not belong to a {expected} layer")]
    CacheMismatch { expected: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("function returned a non-finite value at element {index}")]
    NonFinite { index: usize },

    #[error("depth {depth} out of range, valid depths are {min}..={max}")]
    DepthOutOfRange { depth: usize, min: usize, max: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("layer {layer} is not a Conv2D layer")]
    NotConvLayer { layer: usize },

    #[error("filter {filter} out of range, layer {layer} has {count} filters")]
    FilterOutOfRange {
        layer: usize,
        filter: usize,
        count: usize,
    },

    #[error("architecture mismatch at layer {layer}: {reason}")]
    ArchitectureMismatch { layer: usize, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("failed to decode image {}: {source}", path.display())]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("failed to decode image bytes: {0}")]
    DecodeBytes(#[source] image::ImageError),

    #[error("training failed at epoch {epoch}, batch {batch}: {source}")]
    Batch {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("failed to encode image: {0}")]
    Encode(#[source] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("unknown layer kind tag {tag} in format version {version}")]
    UnknownLayerKind { tag: u8, version: u32 },
    #[error("unknown {field} tag {tag}")]
    UnknownTag { field: &'static str, tag: u8 },
    #[error("file truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("header CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    HeaderCrc { stored: u32, computed: u32 },
    #[error("parameter CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    BlobCrc { stored: u32, computed: u32 },
    #[error("{0}")]
    Malformed(String),
}

fn layer_suffix(layer: Option<usize>) -> String {
    match layer {
        Some(i) => format!(" at layer {i}"),
        None => String::new(),
    }
}
