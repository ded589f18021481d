use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use alora_serve::{ComparisonMode, Engine, EngineError, MetricsTable, RequestMetrics, Transformer};
use serde::{Deserialize, Serialize};

use crate::driver::{Driver, STAGE_ADAPTER, STAGE_BASE, STAGE_FINAL};
pub use crate::driver::StageRecord;
use crate::setup::{EngineSettings, INVOCATION_LEN};
use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    BaseAdapter,
    AdapterBase,
    BaseAdapterBase,
    MultiAdapter,
}

impl PipelineKind {
    pub const ALL: [PipelineKind; 4] = [
        PipelineKind::BaseAdapter,
        PipelineKind::AdapterBase,
        PipelineKind::BaseAdapterBase,
        PipelineKind::MultiAdapter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineKind::BaseAdapter => "base_adapter",
            PipelineKind::AdapterBase => "adapter_base",
            PipelineKind::BaseAdapterBase => "base_adapter_base",
            PipelineKind::MultiAdapter => "multi_adapter",
        }
    }

    /// Stage whose metrics are reported as the evaluation step.
    pub fn eval_stage(self) -> &'static str {
        match self {
            PipelineKind::AdapterBase => STAGE_BASE,
            _ => STAGE_ADAPTER,
        }
    }
}

impl fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| format!("unknown pipeline `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub kind: PipelineKind,
    /// Initial prompt length.
    pub prompt_len: usize,
    /// Tokens generated by the first base call.
    pub base_gen_len: usize,
    /// Tokens generated by each adapter call and by a final base call.
    pub adapter_gen_len: usize,
    pub n_adapters: usize,
    pub mode: ComparisonMode,
    pub seed: u64,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        Self {
            kind: PipelineKind::BaseAdapter,
            prompt_len: 256,
            base_gen_len: 64,
            adapter_gen_len: 16,
            n_adapters: 1,
            mode: ComparisonMode::Alora,
            seed: 0,
        }
    }
}

impl PipelineSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.prompt_len == 0 || self.base_gen_len == 0 || self.adapter_gen_len == 0 {
            return Err(BenchError::InvalidSpec("all lengths must be at least 1".into()));
        }
        if self.n_adapters == 0 {
            return Err(BenchError::InvalidSpec("n_adapters must be at least 1".into()));
        }
        Ok(())
    }

    pub fn adapters_used(&self) -> usize {
        match self.kind {
            PipelineKind::MultiAdapter => self.n_adapters,
            _ => 1,
        }
    }

    /// Tokens of the longest single request (prompt plus generation).
    pub fn max_sequence_len(&self) -> usize {
        let (x, y, r) = (self.prompt_len, self.base_gen_len, self.adapter_gen_len);
        let inv = INVOCATION_LEN;
        match self.kind {
            PipelineKind::BaseAdapter | PipelineKind::AdapterBase => x + y + inv + r,
            PipelineKind::BaseAdapterBase | PipelineKind::MultiAdapter => {
                x + y + self.adapters_used() * (inv + r) + r
            }
        }
    }

    pub fn with_mode(&self, mode: ComparisonMode) -> Self {
        Self { mode, ..self.clone() }
    }
}

/// Cache hits a stage must see when the pool never evicts a live prefix.
/// `None` where the count depends on eviction.
pub fn expected_hits(spec: &PipelineSpec, block_size: usize, stage: &str) -> Option<usize> {
    let (x, y) = (spec.prompt_len, spec.base_gen_len);
    let b = block_size;
    let alora = spec.mode == ComparisonMode::Alora;
    match (spec.kind, stage) {
        (PipelineKind::AdapterBase, STAGE_ADAPTER) => Some(0),
        (PipelineKind::AdapterBase, STAGE_BASE) => Some(if alora { x / b * b } else { 0 }),
        (_, STAGE_BASE) => Some(0),
        // The last generated token of the base call never gets KV.
        (_, STAGE_ADAPTER) => Some(if alora { (x + y - 1) / b * b } else { 0 }),
        (_, STAGE_FINAL) if alora => Some((x + y) / b * b),
        _ => None,
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub spec: PipelineSpec,
    pub instances: usize,
    pub pool_blocks: usize,
    pub table: MetricsTable,
    pub records: Vec<StageRecord>,
}

impl PipelineRun {
    pub fn stage_rows<'a>(&'a self, stage: &'a str) -> impl Iterator<Item = &'a RequestMetrics> + 'a {
        self.table.stage(stage)
    }

    pub fn eval_rows(&self) -> impl Iterator<Item = &RequestMetrics> + '_ {
        self.stage_rows(self.spec.kind.eval_stage())
    }

    /// Mismatches between observed hit counts and [`expected_hits`].
    pub fn hit_mismatches(&self, block_size: usize) -> Vec<String> {
        self.records
            .iter()
            .filter_map(|r| {
                let want = expected_hits(&self.spec, block_size, &r.stage)?;
                (want != r.hit_tokens).then(|| {
                    format!(
                        "instance {} {} (adapter {:?}): {} hit tokens, expected {}",
                        r.instance, r.stage, r.adapter, r.hit_tokens, want
                    )
                })
            })
            .collect()
    }
}

/// Runs `instances` copies of the pipeline in lockstep: each stage is
/// submitted for every copy at once, after all copies finished the previous one.
pub fn run_sync_pipeline(
    engine: &mut Engine,
    settings: &EngineSettings,
    spec: &PipelineSpec,
    instances: usize,
) -> Result<PipelineRun, BenchError> {
    spec.validate()?;
    if instances == 0 {
        return Err(BenchError::InvalidSpec("at least one pipeline instance is required".into()));
    }
    let cfg = engine.config();
    if cfg.comparison_mode != spec.mode {
        return Err(BenchError::InvalidSpec(format!(
            "engine runs in {} mode but the pipeline asks for {}",
            cfg.comparison_mode.as_str(),
            spec.mode.as_str()
        )));
    }
    if cfg.adapters.len() < spec.adapters_used() {
        return Err(BenchError::InvalidSpec(format!(
            "pipeline needs {} adapters, engine has {}",
            spec.adapters_used(),
            cfg.adapters.len()
        )));
    }
    let pool_blocks = cfg.pool_blocks;
    let context = format!("{} pipeline ({})", spec.kind, spec.mode.as_str());
    let mut driver = Driver::new(spec, settings, instances, true);
    let first: Vec<_> = (0..instances).flat_map(|i| driver.launch(i, None)).collect();
    engine.submit_batch(first).map_err(BenchError::engine(&context))?;
    while !driver.all_done() {
        if !engine.has_work() {
            return Err(BenchError::Stalled(driver.unfinished()));
        }
        let report = engine.step().map_err(BenchError::engine(&context))?;
        if let Some(f) = report.failed.first() {
            return Err(BenchError::Engine {
                context,
                source: EngineError::RequestFailed {
                    id: f.id,
                    reason: f.reason.clone(),
                },
            });
        }
        let next: Vec<_> = report.completed.iter().flat_map(|c| driver.on_complete(c)).collect();
        drop(report);
        if !next.is_empty() {
            engine.submit_batch(next).map_err(BenchError::engine(&context))?;
        }
    }
    let (table, records) = driver.finish();
    Ok(PipelineRun {
        spec: spec.clone(),
        instances,
        pool_blocks,
        table,
        records,
    })
}

/// Multi-adapter pipeline: adapter evaluations of one instance run
/// concurrently, then a final base call consumes all of them.
pub fn run_multi_adapter(
    engine: &mut Engine,
    settings: &EngineSettings,
    spec: &PipelineSpec,
    instances: usize,
) -> Result<PipelineRun, BenchError> {
    if spec.kind != PipelineKind::MultiAdapter {
        return Err(BenchError::InvalidSpec(format!("expected multi_adapter, got {}", spec.kind)));
    }
    run_sync_pipeline(engine, settings, spec, instances)
}

/// Builds an engine sized by the batch rule and runs the pipeline on it.
pub fn run_pipeline(
    settings: &EngineSettings,
    model: Arc<Transformer>,
    spec: &PipelineSpec,
    instances: usize,
) -> Result<PipelineRun, BenchError> {
    spec.validate()?;
    let pool = settings
        .pool_blocks
        .unwrap_or_else(|| settings.pool_for(instances, spec.max_sequence_len()));
    let mut engine = settings.engine(model, pool, spec.adapters_used(), spec.mode)?;
    run_sync_pipeline(&mut engine, settings, spec, instances)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_parsing() {
        for k in PipelineKind::ALL {
            assert_eq!(k.as_str().parse::<PipelineKind>().unwrap(), k);
        }
        assert_eq!("base-adapter".parse::<PipelineKind>().unwrap(), PipelineKind::BaseAdapter);
        assert!("nope".parse::<PipelineKind>().is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(PipelineSpec::default().validate().is_ok());
        let bad = PipelineSpec {
            kind: PipelineKind::MultiAdapter,
            n_adapters: 0,
            ..PipelineSpec::default()
        };
        assert!(bad.validate().is_err());
        let zero = PipelineSpec {
            base_gen_len: 0,
            ..PipelineSpec::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn hit_formula() {
        let spec = PipelineSpec {
            prompt_len: 32,
            base_gen_len: 16,
            ..PipelineSpec::default()
        };
        assert_eq!(expected_hits(&spec, 4, STAGE_ADAPTER), Some(44));
        assert_eq!(expected_hits(&spec.with_mode(ComparisonMode::Lora), 4, STAGE_ADAPTER), Some(0));
        let rev = PipelineSpec {
            kind: PipelineKind::AdapterBase,
            prompt_len: 30,
            ..PipelineSpec::default()
        };
        assert_eq!(expected_hits(&rev, 4, STAGE_BASE), Some(28));
    }
}
