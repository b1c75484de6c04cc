//! Synthetic worlds, pipeline orchestration, and reporting.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod world;

pub use config::RunConfig;
pub use pipeline::{
    compare_adaptive_vs_fixed, prepare_components, recount_report, run_pipeline, write_run_dir,
    PipelineArtifacts, PipelineComponents,
};
pub use report::{macro_f1, RunReport, SweepRow, Timing};
pub use world::{generate_world, SyntheticExpert, SyntheticQuery, SyntheticWorld, WorldSpec};
