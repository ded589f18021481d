use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use alora_serve::metrics::format_sig6;
use alora_serve::{ComparisonMode, ExportFormat, MetricsTable, RequestMetrics, Summary, Transformer};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::load::{run_async_load, LoadSpec, DEFAULT_ASYNC_CAPACITY};
use crate::pipeline::{run_pipeline, PipelineSpec};
use crate::setup::EngineSettings;
use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    PromptLen,
    GenLen,
    ArrivalRate,
    BatchSize,
}

impl SweepParam {
    pub const ALL: [SweepParam; 4] = [
        SweepParam::PromptLen,
        SweepParam::GenLen,
        SweepParam::ArrivalRate,
        SweepParam::BatchSize,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::PromptLen => "prompt_len",
            SweepParam::GenLen => "gen_len",
            SweepParam::ArrivalRate => "arrival_rate",
            SweepParam::BatchSize => "batch_size",
        }
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == norm)
            .ok_or_else(|| format!("unknown sweep parameter `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub base: PipelineSpec,
    /// Load for arrival-rate sweeps; its rate is replaced by each value.
    pub load: LoadSpec,
    /// Pipeline instances per run, fixed from the largest configuration.
    /// Ignored by batch-size sweeps.
    pub batch: usize,
    pub reps: usize,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.values.is_empty() {
            return Err(BenchError::InvalidSpec("sweep needs at least one value".into()));
        }
        if self.reps == 0 || self.batch == 0 {
            return Err(BenchError::InvalidSpec("reps and batch must be at least 1".into()));
        }
        for &v in &self.values {
            let integral = v >= 1.0 && v.fract() == 0.0;
            let ok = match self.param {
                SweepParam::ArrivalRate => v.is_finite() && v > 0.0,
                _ => integral,
            };
            if !ok {
                return Err(BenchError::InvalidSpec(format!("bad {} value {v}", self.param.as_str())));
            }
        }
        self.base.validate()
    }

    /// Pipeline spec at one sweep point.
    pub fn point(&self, value: f64) -> PipelineSpec {
        let mut spec = self.base.clone();
        match self.param {
            SweepParam::PromptLen => spec.prompt_len = value as usize,
            SweepParam::GenLen => spec.base_gen_len = value as usize,
            SweepParam::ArrivalRate | SweepParam::BatchSize => {}
        }
        spec
    }

    pub fn largest_sequence(&self) -> usize {
        self.values.iter().map(|&v| self.point(v).max_sequence_len()).max().unwrap_or(0)
    }
}

/// Means over one stage's rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageSummary {
    pub count: usize,
    pub failures: usize,
    pub e2e_s: f64,
    pub ttft_s: f64,
    pub queue_s: f64,
    pub prefill_s: f64,
    pub decode_s: f64,
    pub hit_rate: f64,
}

impl StageSummary {
    pub fn of<'a>(rows: impl Iterator<Item = &'a RequestMetrics>, failures: usize) -> Self {
        let rows: Vec<_> = rows.collect();
        let mean = |f: fn(&RequestMetrics) -> f64| Summary::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>()).mean;
        let hits: usize = rows.iter().map(|r| r.cache_hit_tokens).sum();
        let computed: usize = rows.iter().map(|r| r.prefill_tokens_computed).sum();
        Self {
            count: rows.len(),
            failures,
            e2e_s: mean(RequestMetrics::e2e_s),
            ttft_s: mean(RequestMetrics::ttft_s),
            queue_s: mean(RequestMetrics::queue_s),
            prefill_s: mean(RequestMetrics::prefill_s),
            decode_s: mean(RequestMetrics::decode_s),
            hit_rate: if hits + computed == 0 { 0.0 } else { hits as f64 / (hits + computed) as f64 },
        }
    }

    /// Field-wise median across repetitions.
    pub fn median(reps: &[StageSummary]) -> Self {
        let med = |f: fn(&StageSummary) -> f64| Summary::of(&reps.iter().map(f).collect::<Vec<_>>()).median;
        Self {
            count: reps.iter().map(|r| r.count).sum(),
            failures: reps.iter().map(|r| r.failures).sum(),
            e2e_s: med(|r| r.e2e_s),
            ttft_s: med(|r| r.ttft_s),
            queue_s: med(|r| r.queue_s),
            prefill_s: med(|r| r.prefill_s),
            decode_s: med(|r| r.decode_s),
            hit_rate: med(|r| r.hit_rate),
        }
    }
}

/// All repetitions of one mode at one sweep point.
#[derive(Debug, Clone)]
pub struct ModeResult {
    pub spec: PipelineSpec,
    pub param: SweepParam,
    pub value: f64,
    pub batch: usize,
    pub pool_blocks: usize,
    pub load: Option<LoadSpec>,
    /// Evaluation-stage summary, median over repetitions.
    pub summary: StageSummary,
    pub reps: Vec<StageSummary>,
    pub table: MetricsTable,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedupRow {
    pub param: SweepParam,
    pub value: f64,
    pub lora: StageSummary,
    pub alora: StageSummary,
    pub e2e: f64,
    pub ttft: f64,
    pub queue: f64,
    pub prefill: f64,
    pub decode: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 { 1.0 } else { f64::INFINITY }
    } else {
        a / b
    }
}

/// LoRA-over-aLoRA ratios for the evaluation stage. Refuses results whose
/// runs differ in anything but the comparison mode.
pub fn speedup(lora: &ModeResult, alora: &ModeResult) -> Result<SpeedupRow, BenchError> {
    if lora.spec.mode != ComparisonMode::Lora || alora.spec.mode != ComparisonMode::Alora {
        return Err(BenchError::Mismatch("expected one lora and one alora run".into()));
    }
    if lora.spec.with_mode(ComparisonMode::Alora) != alora.spec {
        return Err(BenchError::Mismatch(format!("pipeline specs differ: {:?} vs {:?}", lora.spec, alora.spec)));
    }
    if lora.value != alora.value || lora.param != alora.param {
        return Err(BenchError::Mismatch("sweep points differ".into()));
    }
    if lora.batch != alora.batch || lora.pool_blocks != alora.pool_blocks {
        return Err(BenchError::Mismatch("batch size or pool size differ".into()));
    }
    if lora.load != alora.load || lora.reps.len() != alora.reps.len() {
        return Err(BenchError::Mismatch("load or repetition count differ".into()));
    }
    let (l, a) = (lora.summary, alora.summary);
    Ok(SpeedupRow {
        param: lora.param,
        value: lora.value,
        lora: l,
        alora: a,
        e2e: ratio(l.e2e_s, a.e2e_s),
        ttft: ratio(l.ttft_s, a.ttft_s),
        queue: ratio(l.queue_s, a.queue_s),
        prefill: ratio(l.prefill_s, a.prefill_s),
        decode: ratio(l.decode_s, a.decode_s),
    })
}

/// One repetition of one mode at one sweep point.
#[derive(Debug, Clone)]
pub struct RepResult {
    pub summary: StageSummary,
    pub table: MetricsTable,
    pub pool_blocks: usize,
    pub load: Option<LoadSpec>,
}

/// Runs repetition `rep` of one mode at one sweep point. Repetitions differ
/// only in their seeds.
pub fn run_rep(
    settings: &EngineSettings,
    model: Arc<Transformer>,
    sweep: &SweepSpec,
    value: f64,
    mode: ComparisonMode,
    rep: usize,
) -> Result<RepResult, BenchError> {
    let spec = sweep.point(value).with_mode(mode);
    let rep_spec = PipelineSpec {
        seed: spec.seed + rep as u64,
        ..spec
    };
    let mut s = settings.clone();
    let (table, pool_blocks, load) = match sweep.param {
        SweepParam::ArrivalRate => {
            let l = LoadSpec {
                arrival_rate: value,
                seed: sweep.load.seed + rep as u64,
                ..sweep.load.clone()
            };
            s.pool_blocks = Some(
                settings
                    .pool_blocks
                    .unwrap_or_else(|| settings.pool_for(DEFAULT_ASYNC_CAPACITY, sweep.largest_sequence())),
            );
            let run = run_async_load(&s, model, &rep_spec, &l)?;
            let load = LoadSpec { seed: sweep.load.seed, ..l };
            (run.table, run.pool_blocks, Some(load))
        }
        _ => {
            let (batch, largest) = match sweep.param {
                SweepParam::BatchSize => (value as usize, rep_spec.max_sequence_len()),
                _ => (sweep.batch, sweep.largest_sequence()),
            };
            s.pool_blocks = Some(settings.pool_blocks.unwrap_or_else(|| settings.pool_for(batch, largest)));
            let run = run_pipeline(&s, model, &rep_spec, batch)?;
            (run.table, run.pool_blocks, None)
        }
    };
    let eval = rep_spec.kind.eval_stage();
    let failures = table.failures.iter().filter(|f| f.stage == eval).count();
    Ok(RepResult {
        summary: StageSummary::of(table.stage(eval), failures),
        table,
        pool_blocks,
        load,
    })
}

impl ModeResult {
    /// Collects repetitions of one mode at one sweep point.
    pub fn from_reps(sweep: &SweepSpec, value: f64, mode: ComparisonMode, reps: Vec<RepResult>) -> Self {
        let summaries: Vec<StageSummary> = reps.iter().map(|r| r.summary).collect();
        let mut table = MetricsTable::default();
        let (mut pool_blocks, mut load) = (0, None);
        for r in reps {
            table.extend(r.table);
            pool_blocks = r.pool_blocks;
            load = r.load;
        }
        Self {
            spec: sweep.point(value).with_mode(mode),
            param: sweep.param,
            value,
            batch: match sweep.param {
                SweepParam::BatchSize => value as usize,
                _ => sweep.batch,
            },
            pool_blocks,
            load,
            summary: StageSummary::median(&summaries),
            reps: summaries,
            table,
        }
    }
}

/// Runs every repetition of one mode at one sweep point.
pub fn run_mode(
    settings: &EngineSettings,
    model: Arc<Transformer>,
    sweep: &SweepSpec,
    value: f64,
    mode: ComparisonMode,
) -> Result<ModeResult, BenchError> {
    sweep.validate()?;
    let reps = (0..sweep.reps)
        .map(|rep| run_rep(settings, model.clone(), sweep, value, mode, rep))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ModeResult::from_reps(sweep, value, mode, reps))
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub spec: SweepSpec,
    pub rows: Vec<SpeedupRow>,
    pub lora: Vec<ModeResult>,
    pub alora: Vec<ModeResult>,
}

pub const SPEEDUP_COLUMNS: [&str; 18] = [
    "param",
    "value",
    "lora_e2e_s",
    "alora_e2e_s",
    "lora_ttft_s",
    "alora_ttft_s",
    "lora_queue_s",
    "alora_queue_s",
    "lora_prefill_s",
    "alora_prefill_s",
    "lora_decode_s",
    "alora_decode_s",
    "alora_hit_rate",
    "speedup_e2e",
    "speedup_ttft",
    "speedup_queue",
    "speedup_prefill",
    "speedup_decode",
];

impl SpeedupRow {
    fn cells(&self) -> Vec<(&'static str, Value, String)> {
        let f = |x: f64| {
            let s = format_sig6(x);
            let v = s.parse::<f64>().ok().filter(|v| v.is_finite()).map_or(Value::Null, Value::from);
            (v, s)
        };
        let nums = [
            self.value,
            self.lora.e2e_s,
            self.alora.e2e_s,
            self.lora.ttft_s,
            self.alora.ttft_s,
            self.lora.queue_s,
            self.alora.queue_s,
            self.lora.prefill_s,
            self.alora.prefill_s,
            self.lora.decode_s,
            self.alora.decode_s,
            self.alora.hit_rate,
            self.e2e,
            self.ttft,
            self.queue,
            self.prefill,
            self.decode,
        ];
        let mut out = vec![("param", Value::from(self.param.as_str()), self.param.as_str().to_string())];
        for (name, x) in SPEEDUP_COLUMNS[1..].iter().zip(nums) {
            let (v, s) = f(x);
            out.push((name, v, s));
        }
        out
    }
}

impl SweepReport {
    pub fn render(&self, format: ExportFormat) -> Result<String, BenchError> {
        Ok(match format {
            ExportFormat::Csv => {
                let mut s = SPEEDUP_COLUMNS.join(",");
                s.push('\n');
                for row in &self.rows {
                    s.push_str(&row.cells().into_iter().map(|c| c.2).collect::<Vec<_>>().join(","));
                    s.push('\n');
                }
                s
            }
            ExportFormat::Json => {
                let rows: Vec<Value> = self
                    .rows
                    .iter()
                    .map(|r| Value::Object(r.cells().into_iter().map(|(k, v, _)| (k.to_string(), v)).collect::<Map<_, _>>()))
                    .collect();
                let mut s = serde_json::to_string_pretty(&rows).map_err(alora_serve::MetricsError::from)?;
                s.push('\n');
                s
            }
        })
    }

    /// Human-readable speedup table.
    pub fn summary_table(&self) -> String {
        let mut s = format!(
            "{:>12} {:>10} {:>10} {:>10} {:>10} {:>10} {:>9}\n",
            self.spec.param.as_str(),
            "e2e",
            "ttft",
            "queue",
            "prefill",
            "decode",
            "hit_rate"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>12} {:>9.2}x {:>9.2}x {:>9.2}x {:>9.2}x {:>9.2}x {:>9.3}",
                format_sig6(r.value),
                r.e2e,
                r.ttft,
                r.queue,
                r.prefill,
                r.decode,
                r.alora.hit_rate
            );
        }
        s
    }

    /// Every row's metrics in one table.
    pub fn metrics(&self) -> MetricsTable {
        let mut t = MetricsTable::default();
        for r in self.lora.iter().chain(&self.alora) {
            t.extend(r.table.clone());
        }
        t
    }
}

/// Runs both modes at every sweep point with identical seeds and sizing,
/// alternating modes between repetitions.
pub fn compare_modes(
    settings: &EngineSettings,
    model: Arc<Transformer>,
    sweep: &SweepSpec,
) -> Result<SweepReport, BenchError> {
    sweep.validate()?;
    let mut report = SweepReport {
        spec: sweep.clone(),
        rows: Vec::new(),
        lora: Vec::new(),
        alora: Vec::new(),
    };
    for &value in &sweep.values {
        let (mut lora, mut alora) = (Vec::new(), Vec::new());
        for rep in 0..sweep.reps {
            lora.push(run_rep(settings, model.clone(), sweep, value, ComparisonMode::Lora, rep)?);
            alora.push(run_rep(settings, model.clone(), sweep, value, ComparisonMode::Alora, rep)?);
        }
        let lora = ModeResult::from_reps(sweep, value, ComparisonMode::Lora, lora);
        let alora = ModeResult::from_reps(sweep, value, ComparisonMode::Alora, alora);
        report.rows.push(speedup(&lora, &alora)?);
        report.lora.push(lora);
        report.alora.push(alora);
    }
    Ok(report)
}
