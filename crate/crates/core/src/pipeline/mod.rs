//! Configuration, run manifests, pipeline stages and experiment presets.

pub mod config;
pub mod experiment;
pub mod manifest;
pub mod stages;

pub use config::{GenerateConfig, MaskSource, PipelineConfig, PretrainConfig};
pub use experiment::{run_experiment, run_seed, Arm, ExperimentOutcome, SeedOutcome};
pub use manifest::{sha256_bytes, sha256_file, RunManifest, RunRecorder};
