//! Rehearsal-free incremental anomaly detection.
//!
//! A frozen toy vision transformer is adapted per image by a bank of
//! decomposed (query, key, value) prompt components. Two prototype banks
//! (one image-level vector per task, `N_s` patch-level vectors per task)
//! regularize training and serve as the memory bank for nearest-prototype
//! scoring at inference. No raw samples from earlier tasks are ever kept.

pub mod backbone;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod prompt_bank;
pub mod prototypes;
pub mod synthdata;

pub use error::{Error, Result};

pub use backbone::{Backbone, BackboneConfig, FeatureBundle, Image};
pub use metrics::{MetricMatrix, MetricReport, TaskMetrics};
pub use pipeline::{AnomalyResult, EngineConfig, EngineState, RunConfig, TrainConfig};
pub use prompt_bank::PromptBank;
pub use prototypes::{ImagePrototypeBank, PixelPrototypeBank};
pub use synthdata::{DataConfig, SampleId, TaskDataset, TaskSample};
