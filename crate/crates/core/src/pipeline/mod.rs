//! Task-sequential training, scoring and experience persistence.

mod config;
mod engine;
mod persist;

pub use config::{EngineConfig, RunConfig, TrainConfig};
pub use engine::{AnomalyResult, EngineState, TrainReport};
pub use persist::{
    decode_experience, encode_experience, load_experience, load_experience_with_features,
    prototype_bytes_per_task, save_experience, write_atomic, Experience, FeatureStore, MAGIC,
    VERSION,
};
