//! Dataset ledger and every dataset-construction protocol: ingestion,
//! stratified partitioning, unbalanced base-model subsets, balanced
//! evaluation sets, JPEG corpus variants and generalization benchmarks.

mod image_io;
mod ingest;
mod jpeg;
mod manifest;
mod sampling;
pub mod synth;

use std::path::PathBuf;

use thiserror::Error;

pub use image_io::{load_image_tensor, load_tensors, DEFAULT_INPUT_SIZE};
pub use ingest::{ingest, IngestReport, LabelRule};
pub use jpeg::{jpeg_corpus, jpeg_reencode_file, mean_abs_pixel_diff};
pub use manifest::{BinaryLabel, ClassLabel, ImageRecord, Manifest, Split, MANIFEST_MAGIC};
pub use sampling::{
    apportion, assemble_generalization_set, balance_eval_set, carve_validation, equal_quotas,
    make_unbalanced_subset, split_three_way, GenBenchSpec, DEFAULT_UNBALANCE_RATIO,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("no images matched under the corpus root")]
    EmptyCorpus,
    #[error("fractions {0:?} must be positive and sum to 1")]
    BadFractions(Vec<f64>),
    #[error("class {class} has {count} records, at least {min} required")]
    TooFewRecords {
        class: ClassLabel,
        count: usize,
        min: usize,
    },
    #[error("class {0} is absent")]
    MissingClass(ClassLabel),
    #[error("need {needed} 'others' records ({per_class:?} per class), have {available:?}")]
    InsufficientOthers {
        needed: usize,
        per_class: [usize; 2],
        available: [usize; 2],
    },
    #[error("tag {tag:?}: need {needed} records, pool has {available}")]
    InsufficientPool {
        tag: String,
        needed: usize,
        available: usize,
    },
    #[error("JPEG encode of {path} at QF {qf} failed: {reason}")]
    EncodeFailure {
        path: PathBuf,
        qf: u8,
        reason: String,
    },
    #[error("quality factor {0} outside 1..=100")]
    BadQuality(i64),
    #[error("ratio {0} must lie strictly between 0 and 1")]
    BadRatio(f64),
    #[error("invalid benchmark spec: {0}")]
    BadSpec(String),
    #[error("duplicate path {0}")]
    DuplicatePath(PathBuf),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}
