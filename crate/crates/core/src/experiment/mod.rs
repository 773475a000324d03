//! Experiment orchestration: configuration, the staged pipeline and the
//! final report.

mod config;
mod pipeline;
mod report;

pub use config::{EvaluationStage, ExperimentConfig, GenerateStage, PhantomStage, SegmentationStage, StageTraining};
pub use pipeline::{intensity_contrast, run_pipeline, usable_synthetic, PipelineRun, PipelineStage, RunDir};
pub use report::{
    build_report, format_improvement, improvement_percent, DiceRow, FidTable, GenerationStats, Report, ReportMetadata,
    SegmentationResult, REPORT_VERSION,
};
