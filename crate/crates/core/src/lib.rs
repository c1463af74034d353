//! Benchmark harness for few-shot object detection under varying text describability.
//!
//! The crate is organised along the pipeline:
//!
//! - [`dataset`]: COCO-format ground truth and detection result ingestion.
//! - [`embedding`]: the `EMBF` binary embedding store.
//! - [`describability`]: zero-shot crop classification over a unioned vocabulary,
//!   per-dataset accuracy and the split partition.
//! - [`episode`]: seeded K-shot episode sampling and manifests.
//! - [`eval`]: IoU, greedy matching and 101-point AP over IoU 0.50:0.95.
//! - [`report`]: per-split aggregation over seeds, OVD/COD ratios, CSV/JSON/SVG output.

pub mod dataset;
pub mod describability;
pub mod embedding;
pub mod episode;
mod error;
pub mod eval;
pub mod fsutil;
pub mod report;
pub mod rng;

pub use error::{Error, Result};
