use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error("dangling reference: {0}")]
    DanglingReference(String),

    #[error("duplicate id: {0}")]
    DuplicateId(String),

    #[error("degenerate box for annotation {ann_id}: w={w}, h={h} after clamping")]
    DegenerateBox { ann_id: u64, w: f64, h: f64 },

    #[error("bad magic bytes (expected \"EMBF\")")]
    BadMagic,

    #[error("unsupported EMBF version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("duplicate key {0:?}")]
    DuplicateKey(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("vector for key {key:?} is not unit length (norm {norm})")]
    NotNormalized { key: String, norm: f64 },

    #[error("invalid embedding key {0:?}")]
    InvalidKey(String),

    #[error("missing embeddings for {} key(s): {}", .0.len(), .0.join(", "))]
    MissingEmbedding(Vec<String>),

    #[error("dataset {0} has no evaluable crops")]
    EmptyDataset(String),

    #[error("empty dataset collection")]
    EmptyCollection,

    #[error("split sizes sum to {sizes_total} but there are {datasets} datasets")]
    SizeMismatch { sizes_total: usize, datasets: usize },

    #[error("invalid accuracy {value} for dataset {dataset_id}")]
    InvalidAccuracy { dataset_id: String, value: f64 },

    #[error("episode belongs to dataset {episode:?}, not {dataset:?}")]
    ForeignEpisode { episode: String, dataset: String },

    #[error("missing cell: method={method:?} k={k} seed={seed} dataset={dataset_id:?}")]
    MissingCell {
        method: String,
        k: u32,
        seed: u32,
        dataset_id: String,
    },

    #[error("duplicate cell: method={method:?} k={k} seed={seed} dataset={dataset_id:?}")]
    DuplicateCell {
        method: String,
        k: u32,
        seed: u32,
        dataset_id: String,
    },

    #[error("seeds for method={method:?} k={k} are not contiguous from 0: {seeds:?}")]
    NonContiguousSeeds {
        method: String,
        k: u32,
        seeds: Vec<u32>,
    },

    #[error("coverage mismatch: {0}")]
    CoverageMismatch(String),

    #[error("closed-set mean is zero at k={k} split={split}")]
    DivisionByZeroMean { k: u32, split: String },

    #[error("invalid value: {0}")]
    InvalidValue(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the filesystem rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
