//! Few-shot object detection by prototype classification.
//!
//! Class-agnostic region proposals are scored against unit-norm class and
//! background prototypes using cosine similarity over pre-extracted patch
//! feature grids. The crate covers building prototypes from a handful of
//! annotated shots, clustering background prototypes, fine-tuning
//! prototypes with a softmax cross-entropy objective, running detection,
//! and evaluating detections (mAP50) or box classification (F1/accuracy).

pub mod classifier;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod fixture;
pub mod geometry;
pub mod io;
pub mod kmeans;
pub mod pooling;
pub mod prototypes;
pub mod trainer;
pub mod types;

pub use dataset::Dataset;
pub use error::{Error, Result};
pub use types::{
    Annotation, ClassEntry, ClassRole, ClassTable, DatasetManifest, Detection, FeatureMap, ManifestEntry, Mask,
    PixelBox, PrototypeSet, Provenance, SplitRole,
};
