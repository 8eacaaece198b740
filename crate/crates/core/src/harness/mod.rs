//! Scene simulation, pipeline configuration and stage orchestration.

pub mod cache;
pub mod config;
pub mod pipeline;
pub mod simulate;
pub mod training;

pub use cache::{StageCache, CACHE_ENV};
pub use config::{OverlapSource, PipelineConfig, Track};
pub use pipeline::{
    format_score, run_pipeline, utterance_file_name, PipelineInputs, PipelineReport, StageRun,
};
pub use simulate::{simulate_scene, SceneSpec, SceneTruth};
pub use training::{speaker_embeddings, train_synthetic_plda, training_scene, TRAINING_SEED_BASE};
