use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{AggregateMetrics, MetricsError, MetricsTable, RequestMetrics, Summary};

pub const CSV_COLUMNS: [&str; 14] = [
    "request_id",
    "mode",
    "pipeline",
    "stage",
    "prompt_len",
    "gen_len",
    "queue_s",
    "prefill_s",
    "decode_s",
    "ttft_s",
    "itl_s",
    "e2e_s",
    "hit_tokens",
    "computed_tokens",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Json,
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Json => "json",
        }
    }
}

impl FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            other => Err(format!("unknown export format `{other}`")),
        }
    }
}

/// Six significant digits, without exponent for ordinary magnitudes.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_finite() { "0".into() } else { x.to_string() };
    }
    let s = format!("{x:.5e}");
    let parsed: f64 = s.parse().expect("formatted float parses");
    let exp = parsed.abs().log10().floor() as i32;
    if (-5..=15).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let fixed = format!("{parsed:.decimals$}");
        if fixed.contains('.') {
            fixed.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            fixed
        }
    } else {
        s
    }
}

#[derive(Debug, Clone)]
enum Cell {
    Int(u64),
    Text(String),
    Float(Option<f64>),
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => csv_escape(s),
            Cell::Float(Some(v)) => format_sig6(*v),
            Cell::Float(None) => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Int(v) => Value::from(*v),
            Cell::Text(s) => Value::from(s.clone()),
            Cell::Float(Some(v)) => {
                let rounded: f64 = format_sig6(*v).parse().expect("sig6 parses");
                Value::from(rounded)
            }
            Cell::Float(None) => Value::Null,
        }
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn row_cells(r: &RequestMetrics) -> Vec<(&'static str, Cell)> {
    let cells = vec![
        Cell::Int(r.request_id),
        Cell::Text(r.mode.clone()),
        Cell::Text(r.pipeline.clone()),
        Cell::Text(r.stage.clone()),
        Cell::Int(r.prompt_len as u64),
        Cell::Int(r.output_tokens as u64),
        Cell::Float(Some(r.queue_s())),
        Cell::Float(Some(r.prefill_s())),
        Cell::Float(Some(r.decode_s())),
        Cell::Float(Some(r.ttft_s())),
        Cell::Float(r.itl_s()),
        Cell::Float(Some(r.e2e_s())),
        Cell::Int(r.cache_hit_tokens as u64),
        Cell::Int(r.prefill_tokens_computed as u64),
    ];
    CSV_COLUMNS.iter().copied().zip(cells).collect()
}

fn aggregate_cells(a: &AggregateMetrics) -> Vec<(String, Cell)> {
    let mut out = vec![
        ("pipeline".to_string(), Cell::Text(a.pipeline.clone())),
        ("stage".to_string(), Cell::Text(a.stage.clone())),
        ("mode".to_string(), Cell::Text(a.mode.clone())),
        ("count".to_string(), Cell::Int(a.count as u64)),
        ("failures".to_string(), Cell::Int(a.failures as u64)),
    ];
    let summaries: [(&str, &Summary); 6] = [
        ("queue_s", &a.queue_s),
        ("prefill_s", &a.prefill_s),
        ("decode_s", &a.decode_s),
        ("ttft_s", &a.ttft_s),
        ("itl_s", &a.itl_s),
        ("e2e_s", &a.e2e_s),
    ];
    for (name, s) in summaries {
        out.push((format!("{name}_mean"), Cell::Float(Some(s.mean))));
        out.push((format!("{name}_median"), Cell::Float(Some(s.median))));
        out.push((format!("{name}_p95"), Cell::Float(Some(s.p95))));
    }
    out.push(("hit_tokens".into(), Cell::Int(a.hit_tokens as u64)));
    out.push(("computed_tokens".into(), Cell::Int(a.computed_tokens as u64)));
    out.push(("cache_hit_rate".into(), Cell::Float(Some(a.cache_hit_rate))));
    out.push(("throughput_tok_s".into(), Cell::Float(Some(a.throughput_tok_s))));
    out
}

fn render<K: AsRef<str>>(rows: &[Vec<(K, Cell)>], format: ExportFormat) -> Result<String, MetricsError> {
    let first = rows.first().ok_or(MetricsError::Empty)?;
    match format {
        ExportFormat::Csv => {
            let mut out = first.iter().map(|(k, _)| k.as_ref()).collect::<Vec<_>>().join(",");
            out.push('\n');
            for row in rows {
                out.push_str(&row.iter().map(|(_, c)| c.csv()).collect::<Vec<_>>().join(","));
                out.push('\n');
            }
            Ok(out)
        }
        ExportFormat::Json => {
            let arr: Vec<Value> = rows
                .iter()
                .map(|row| {
                    Value::Object(
                        row.iter()
                            .map(|(k, c)| (k.as_ref().to_string(), c.json()))
                            .collect::<Map<_, _>>(),
                    )
                })
                .collect();
            let mut s = serde_json::to_string_pretty(&Value::Array(arr))?;
            s.push('\n');
            Ok(s)
        }
    }
}

impl MetricsTable {
    /// Per-request rows in the fixed column order.
    pub fn render(&self, format: ExportFormat) -> Result<String, MetricsError> {
        let rows: Vec<_> = self.rows.iter().map(row_cells).collect();
        render(&rows, format)
    }

    pub fn export(&self, path: &Path, format: ExportFormat) -> Result<(), MetricsError> {
        fs::write(path, self.render(format)?)?;
        Ok(())
    }
}

impl AggregateMetrics {
    pub fn render_all(aggregates: &[AggregateMetrics], format: ExportFormat) -> Result<String, MetricsError> {
        let rows: Vec<_> = aggregates.iter().map(aggregate_cells).collect();
        render(&rows, format)
    }

    pub fn export_all(aggregates: &[AggregateMetrics], path: &Path, format: ExportFormat) -> Result<(), MetricsError> {
        fs::write(path, Self::render_all(aggregates, format)?)?;
        Ok(())
    }
}
