//! Benchmark harness: synchronous multi-turn pipelines, Poisson-arrival load,
//! and LoRA-versus-aLoRA parameter sweeps over the `alora-serve` engine.

pub mod driver;
pub mod load;
pub mod pipeline;
pub mod setup;
pub mod sweep;

use alora_serve::{EngineError, MetricsError};
use thiserror::Error;

pub use load::{arrival_times, run_async_load, AsyncRun, LoadSpec};
pub use pipeline::{expected_hits, run_multi_adapter, run_pipeline, run_sync_pipeline, PipelineKind, PipelineRun, PipelineSpec, StageRecord};
pub use setup::{EngineSettings, ALORA_RANK, LORA_RANK};
pub use sweep::{compare_modes, run_mode, run_rep, speedup, ModeResult, RepResult, SpeedupRow, StageSummary, SweepParam, SweepReport, SweepSpec};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{context}: {source}")]
    Engine {
        context: String,
        #[source]
        source: EngineError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("runs are not comparable: {0}")]
    Mismatch(String),
    #[error("engine stalled with {0} pipeline instances unfinished")]
    Stalled(usize),
}

impl BenchError {
    pub(crate) fn engine(context: impl Into<String>) -> impl FnOnce(EngineError) -> BenchError {
        let context = context.into();
        move |source| BenchError::Engine { context, source }
    }
}
