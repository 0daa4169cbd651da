use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty pooling window")]
    EmptyWindow,
    #[error("redundancy must be positive")]
    ZeroRedundancy,
    #[error("insufficient physical sets for redundancy: {num_sets} sets, redundancy {redundancy}")]
    InsufficientSets { num_sets: u64, redundancy: u64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("not an IDX image file (magic {0:#010x})")]
    NotIdxImages(u32),
    #[error("not an IDX label file (magic {0:#010x})")]
    NotIdxLabels(u32),
    #[error("unexpected end of file")]
    UnexpectedEof,
    #[error("label out of range: {0}")]
    LabelOutOfRange(u8),
    #[error("invalid weight file: {0}")]
    WeightFormat(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}
