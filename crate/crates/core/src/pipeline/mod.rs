//! End-to-end runs: data, generation, both filters, training, evaluation.

mod config;
mod report;
mod run;
mod sweep;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{
    DataConfig, EvaluationConfig, GenerationConfig, ImageStageConfig, InstanceStageConfig, PipelineConfig, ScorerConfig, StageToggles,
    DEFAULT_COPIES, PRESETS,
};
pub use report::{render_markdown, render_pr_svg, render_sweep_svg, write_report};
pub use run::{
    effective_p, generator_palette, palette_for, run_pipeline, run_pipeline_from, stage_data, stage_evaluate, stage_filter_images,
    stage_filter_instances, stage_generate, stage_train, training_config, DataSummary, InstanceStageOutput, Layout,
    RunReport, Stage, StageRecord, SweepPoint,
};
pub use sweep::{run_sweep, SweepAxis, SWEEP_AXES};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("unknown sweep axis {0:?}")]
    InvalidAxis(String),
    #[error("value {value} out of range for axis {axis}")]
    InvalidValue { axis: String, value: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Name of the failing stage, if the error came from one.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}
