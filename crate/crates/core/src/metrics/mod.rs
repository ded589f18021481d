//! Stage metrics: queue, prefill and decode durations and the quantities
//! derived from them (E2E, TTFT, ITL, hit rate, throughput).

mod clock;
mod export;

pub use clock::{Clock, VirtualClock, VirtualCost, WallClock};
pub use export::{format_sig6, ExportFormat, CSV_COLUMNS};

use std::collections::BTreeMap;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::scheduler::{Request, RequestState};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("request {id} has no {stage} timestamp")]
    MissingTimestamp { id: u64, stage: &'static str },
    #[error("request {id} is not finished")]
    NotFinished { id: u64 },
    #[error("nothing to export")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestMetrics {
    pub request_id: u64,
    pub mode: String,
    pub pipeline: String,
    pub stage: String,
    pub prompt_len: usize,
    pub output_tokens: usize,
    pub queue: Duration,
    pub prefill: Duration,
    pub decode: Duration,
    pub cache_hit_tokens: usize,
    pub prefill_tokens_computed: usize,
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

impl RequestMetrics {
    pub fn e2e(&self) -> Duration {
        self.queue + self.prefill + self.decode
    }

    pub fn ttft(&self) -> Duration {
        self.queue + self.prefill
    }

    /// Decode time over `output_tokens - 1`; absent for single-token outputs.
    pub fn itl_s(&self) -> Option<f64> {
        (self.output_tokens >= 2).then(|| secs(self.decode) / (self.output_tokens - 1) as f64)
    }

    pub fn queue_s(&self) -> f64 {
        secs(self.queue)
    }

    pub fn prefill_s(&self) -> f64 {
        secs(self.prefill)
    }

    pub fn decode_s(&self) -> f64 {
        secs(self.decode)
    }

    pub fn ttft_s(&self) -> f64 {
        secs(self.ttft())
    }

    pub fn e2e_s(&self) -> f64 {
        secs(self.e2e())
    }
}

/// Stage durations from a finished request's lifecycle timestamps.
pub fn finalize(request: &Request) -> Result<RequestMetrics, MetricsError> {
    let id = request.id.0;
    if request.state != RequestState::Finished {
        return Err(MetricsError::NotFinished { id });
    }
    let ts = &request.timestamps;
    let missing = |stage| MetricsError::MissingTimestamp { id, stage };
    let prefill_start = ts.prefill_start.ok_or_else(|| missing("prefill_start"))?;
    let decode_start = ts.decode_start.ok_or_else(|| missing("decode_start"))?;
    let finish = ts.finish.ok_or_else(|| missing("finish"))?;
    Ok(RequestMetrics {
        request_id: id,
        mode: request.tag.mode.clone(),
        pipeline: request.tag.pipeline.clone(),
        stage: request.tag.stage.clone(),
        prompt_len: request.prompt_len(),
        output_tokens: request.generated().len(),
        queue: prefill_start - ts.arrival,
        prefill: decode_start - prefill_start,
        decode: finish - decode_start,
        cache_hit_tokens: request.cache_hit_tokens,
        prefill_tokens_computed: request.prompt_len() - request.cache_hit_tokens,
    })
}

/// A request that did not complete; its metrics are incomplete.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureRecord {
    pub request_id: u64,
    pub mode: String,
    pub pipeline: String,
    pub stage: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsTable {
    pub rows: Vec<RequestMetrics>,
    pub failures: Vec<FailureRecord>,
}

impl MetricsTable {
    pub fn extend(&mut self, other: MetricsTable) {
        self.rows.extend(other.rows);
        self.failures.extend(other.failures);
    }

    pub fn stage<'a>(&'a self, stage: &'a str) -> impl Iterator<Item = &'a RequestMetrics> + 'a {
        self.rows.iter().filter(move |r| r.stage == stage)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

impl Summary {
    /// Mean, median and nearest-rank 95th percentile. Empty input gives zeros.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Self {
            mean: sorted.iter().sum::<f64>() / n as f64,
            median,
            p95: sorted[rank - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateMetrics {
    pub pipeline: String,
    pub stage: String,
    pub mode: String,
    pub count: usize,
    pub failures: usize,
    pub queue_s: Summary,
    pub prefill_s: Summary,
    pub decode_s: Summary,
    pub ttft_s: Summary,
    pub itl_s: Summary,
    pub e2e_s: Summary,
    pub hit_tokens: usize,
    pub computed_tokens: usize,
    pub cache_hit_rate: f64,
    /// Prompt plus output tokens over summed E2E seconds.
    pub throughput_tok_s: f64,
}

impl AggregateMetrics {
    /// One aggregate per (pipeline, stage, mode), sorted by that key.
    pub fn from_table(table: &MetricsTable) -> Vec<AggregateMetrics> {
        let mut groups: BTreeMap<(String, String, String), Vec<&RequestMetrics>> = BTreeMap::new();
        for row in &table.rows {
            groups
                .entry((row.pipeline.clone(), row.stage.clone(), row.mode.clone()))
                .or_default()
                .push(row);
        }
        let mut failures: BTreeMap<(String, String, String), usize> = BTreeMap::new();
        for f in &table.failures {
            let key = (f.pipeline.clone(), f.stage.clone(), f.mode.clone());
            *failures.entry(key.clone()).or_default() += 1;
            groups.entry(key).or_default();
        }
        groups
            .into_iter()
            .map(|(key, rows)| {
                let col = |f: fn(&RequestMetrics) -> f64| -> Summary {
                    Summary::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>())
                };
                let itls: Vec<f64> = rows.iter().filter_map(|r| r.itl_s()).collect();
                let hit_tokens: usize = rows.iter().map(|r| r.cache_hit_tokens).sum();
                let computed_tokens: usize = rows.iter().map(|r| r.prefill_tokens_computed).sum();
                let total_tokens: usize = rows.iter().map(|r| r.prompt_len + r.output_tokens).sum();
                let total_e2e: f64 = rows.iter().map(|r| r.e2e_s()).sum();
                let cache_hit_rate = if hit_tokens + computed_tokens == 0 {
                    0.0
                } else {
                    hit_tokens as f64 / (hit_tokens + computed_tokens) as f64
                };
                AggregateMetrics {
                    failures: failures.get(&key).copied().unwrap_or(0),
                    pipeline: key.0,
                    stage: key.1,
                    mode: key.2,
                    count: rows.len(),
                    queue_s: col(RequestMetrics::queue_s),
                    prefill_s: col(RequestMetrics::prefill_s),
                    decode_s: col(RequestMetrics::decode_s),
                    ttft_s: col(RequestMetrics::ttft_s),
                    itl_s: Summary::of(&itls),
                    e2e_s: col(RequestMetrics::e2e_s),
                    hit_tokens,
                    computed_tokens,
                    cache_hit_rate,
                    throughput_tok_s: if total_e2e > 0.0 {
                        total_tokens as f64 / total_e2e
                    } else {
                        0.0
                    },
                }
            })
            .collect()
    }
}
