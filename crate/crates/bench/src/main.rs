use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alora_bench::pipeline::run_sync_pipeline;
use alora_bench::sweep::run_mode;
use alora_bench::{
    compare_modes, expected_hits, run_async_load, EngineSettings, LoadSpec, PipelineKind, PipelineSpec,
    StageSummary, SweepParam, SweepSpec,
};
use alora_serve::metrics::format_sig6;
use alora_serve::{AggregateMetrics, ComparisonMode, EngineConfig, Exec, ExportFormat, MetricsTable};
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "alora-bench", version, about = "Multi-turn LoRA versus aLoRA serving benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synchronous multi-turn pipeline.
    Sync(SyncArgs),
    /// Pipelines launched by a Poisson arrival process.
    Async(AsyncArgs),
    /// One mode over a range of values of one parameter.
    Sweep(SweepArgs),
    /// Both modes over a sweep, reporting LoRA/aLoRA speedups.
    Compare(SweepArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Alora,
    Lora,
}

impl From<Mode> for ComparisonMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Alora => ComparisonMode::Alora,
            Mode::Lora => ComparisonMode::Lora,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ExportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ExportFormat::Csv,
            Format::Json => ExportFormat::Json,
        }
    }
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, default_value = "base-adapter")]
    pipeline: PipelineKind,
    #[arg(long, value_enum, default_value = "alora")]
    mode: Mode,
    #[arg(long, default_value_t = 256)]
    prompt_len: usize,
    /// Base model generation length.
    #[arg(long, default_value_t = 64)]
    gen_len: usize,
    #[arg(long, default_value_t = 16)]
    adapter_gen_len: usize,
    #[arg(long, default_value_t = 1)]
    n_adapters: usize,
    #[arg(long)]
    block_size: Option<usize>,
    /// Fixed pool size in blocks; sized from the batch rule when absent.
    #[arg(long)]
    pool_blocks: Option<usize>,
    #[arg(long)]
    token_budget: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Deterministic virtual time instead of wall time.
    #[arg(long)]
    virtual_clock: bool,
    /// Engine configuration JSON; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run kernels on one thread.
    #[arg(long)]
    sequential: bool,
    /// Verify hit counts and exported metric identities; exit nonzero on failure.
    #[arg(long)]
    check: bool,
}

#[derive(Args, Debug)]
struct SyncArgs {
    #[command(flatten)]
    common: Common,
    /// Concurrent pipeline instances.
    #[arg(long, default_value_t = 1)]
    instances: usize,
    /// Write a per-step scheduler trace as JSON lines.
    #[arg(long)]
    trace: bool,
}

#[derive(Args, Debug)]
struct AsyncArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1.0)]
    arrival_rate: f64,
    #[arg(long, default_value_t = 50)]
    n_requests: usize,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "prompt-len")]
    param: SweepParam,
    /// Comma-separated values of the swept parameter.
    #[arg(long, value_delimiter = ',', default_values_t = vec![64.0, 256.0, 1024.0, 4096.0])]
    values: Vec<f64>,
    /// Pipeline instances per run, fixed across the sweep.
    #[arg(long, default_value_t = 2)]
    instances: usize,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long, default_value_t = 1.0)]
    arrival_rate: f64,
    #[arg(long, default_value_t = 50)]
    n_requests: usize,
}

impl Common {
    fn settings(&self) -> Result<EngineSettings> {
        let mut s = match &self.config {
            Some(path) => {
                let cfg = EngineConfig::from_path(path).with_context(|| format!("loading {}", path.display()))?;
                EngineSettings::from_engine_config(&cfg)
            }
            None => EngineSettings::default(),
        };
        if let Some(b) = self.block_size {
            s.block_size = b;
        }
        if self.pool_blocks.is_some() {
            s.pool_blocks = self.pool_blocks;
        }
        if let Some(t) = self.token_budget {
            s.scheduler.token_budget = t;
        }
        s.virtual_clock = self.virtual_clock;
        if self.sequential {
            s.exec = Exec::Sequential;
        }
        let longest = self.pipeline_spec().max_sequence_len();
        if s.model.max_seq_len < longest {
            s.model.max_seq_len = longest;
        }
        Ok(s)
    }

    fn pipeline_spec(&self) -> PipelineSpec {
        PipelineSpec {
            kind: self.pipeline,
            prompt_len: self.prompt_len,
            base_gen_len: self.gen_len,
            adapter_gen_len: self.adapter_gen_len,
            n_adapters: self.n_adapters,
            mode: self.mode.into(),
            seed: self.seed,
        }
    }

    fn path(&self, stem: &str) -> PathBuf {
        let format: ExportFormat = self.format.into();
        self.out.join(format!("{stem}.{}", format.extension()))
    }

    fn write_metrics(&self, stem: &str, table: &MetricsTable) -> Result<Vec<String>> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let format = self.format.into();
        let path = self.path(stem);
        table.export(&path, format)?;
        if !table.rows.is_empty() {
            AggregateMetrics::export_all(&AggregateMetrics::from_table(table), &self.path(&format!("{stem}_aggregate")), format)?;
        }
        println!("wrote {}", path.display());
        Ok(if self.check { exported_identity_errors(&path, format)? } else { Vec::new() })
    }
}

/// Re-reads an exported table and checks the stage-duration identities at
/// the precision of the export.
fn exported_identity_errors(path: &Path, format: ExportFormat) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    let rows: Vec<Vec<(String, Option<f64>)>> = match format {
        ExportFormat::Csv => {
            let mut lines = text.lines();
            let header: Vec<String> = lines.next().unwrap_or_default().split(',').map(String::from).collect();
            lines
                .map(|l| header.iter().cloned().zip(l.split(',').map(|c| c.parse().ok())).collect())
                .collect()
        }
        ExportFormat::Json => {
            let v: Vec<serde_json::Map<String, serde_json::Value>> = serde_json::from_str(&text)?;
            v.into_iter().map(|m| m.into_iter().map(|(k, v)| (k, v.as_f64())).collect()).collect()
        }
    };
    let close = |a: f64, b: f64| (a - b).abs() <= 2e-5 * a.abs().max(b.abs()) + 1e-12;
    let mut errors = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let get = |name: &str| row.iter().find(|(k, _)| k == name).and_then(|(_, v)| *v);
        let (Some(q), Some(p), Some(d), Some(e2e), Some(ttft), Some(n)) = (
            get("queue_s"),
            get("prefill_s"),
            get("decode_s"),
            get("e2e_s"),
            get("ttft_s"),
            get("gen_len"),
        ) else {
            errors.push(format!("row {i}: missing duration column"));
            continue;
        };
        if !close(e2e, q + p + d) {
            errors.push(format!("row {i}: e2e {e2e} != queue + prefill + decode {}", q + p + d));
        }
        if !close(ttft, q + p) {
            errors.push(format!("row {i}: ttft {ttft} != queue + prefill {}", q + p));
        }
        match (get("itl_s"), n >= 2.0) {
            (Some(itl), true) if !close(itl, d / (n - 1.0)) => {
                errors.push(format!("row {i}: itl {itl} != decode / (n - 1) {}", d / (n - 1.0)))
            }
            (None, true) => errors.push(format!("row {i}: itl missing")),
            (Some(_), false) => errors.push(format!("row {i}: itl present for a single token")),
            _ => {}
        }
    }
    Ok(errors)
}

fn run_sync(args: &SyncArgs) -> Result<Vec<String>> {
    let c = &args.common;
    let settings = c.settings()?;
    let spec = c.pipeline_spec();
    let model = settings.model()?;
    let pool = settings.pool_blocks.unwrap_or_else(|| settings.pool_for(args.instances, spec.max_sequence_len()));
    let mut engine = settings.engine(model, pool, spec.adapters_used(), spec.mode)?;
    if args.trace {
        engine.enable_trace();
    }
    let run = run_sync_pipeline(&mut engine, &settings, &spec, args.instances)?;
    let mut errors = c.write_metrics("metrics", &run.table)?;
    if args.trace {
        fs::create_dir_all(&c.out)?;
        let lines: Vec<String> = engine
            .take_trace()
            .iter()
            .map(serde_json::to_string)
            .collect::<Result<_, _>>()?;
        let path = c.out.join("trace.jsonl");
        fs::write(&path, lines.join("\n") + "\n")?;
        println!("wrote {}", path.display());
    }
    for r in &run.records {
        println!(
            "instance {:>3} {:<11} adapter {:<4} prompt {:>6} hits {:>6}",
            r.instance,
            r.stage,
            r.adapter.map_or("-".to_string(), |a| a.to_string()),
            r.prompt_len,
            r.hit_tokens
        );
    }
    let eval = StageSummary::of(run.eval_rows(), 0);
    println!(
        "{} evaluation: e2e {}s ttft {}s queue {}s prefill {}s hit rate {}",
        spec.mode.as_str(),
        format_sig6(eval.e2e_s),
        format_sig6(eval.ttft_s),
        format_sig6(eval.queue_s),
        format_sig6(eval.prefill_s),
        format_sig6(eval.hit_rate)
    );
    if c.check {
        errors.extend(run.hit_mismatches(settings.block_size));
        errors.extend(run.table.failures.iter().map(|f| format!("request {} failed: {}", f.request_id, f.reason)));
    }
    Ok(errors)
}

fn run_async(args: &AsyncArgs) -> Result<Vec<String>> {
    let c = &args.common;
    let settings = c.settings()?;
    let spec = c.pipeline_spec();
    let load = LoadSpec {
        arrival_rate: args.arrival_rate,
        n_requests: args.n_requests,
        seed: c.seed,
    };
    let run = run_async_load(&settings, settings.model()?, &spec, &load)?;
    let mut errors = c.write_metrics("metrics", &run.table)?;
    let eval = StageSummary::of(run.table.stage(spec.kind.eval_stage()), 0);
    println!(
        "{} pipelines at {}/s: {} rows, {} failures, evaluation e2e {}s, hit rate {}",
        run.load.n_requests,
        format_sig6(run.load.arrival_rate),
        run.table.rows.len(),
        run.table.failures.len(),
        format_sig6(eval.e2e_s),
        format_sig6(eval.hit_rate)
    );
    if c.check {
        let b = settings.block_size;
        for r in &run.records {
            if let Some(want) = expected_hits(&spec, b, &r.stage) {
                if r.hit_tokens > want {
                    errors.push(format!("instance {} {}: {} hits exceed {}", r.instance, r.stage, r.hit_tokens, want));
                }
            }
        }
    }
    Ok(errors)
}

fn sweep_spec(args: &SweepArgs) -> SweepSpec {
    let c = &args.common;
    SweepSpec {
        param: args.param,
        values: args.values.clone(),
        base: c.pipeline_spec(),
        load: LoadSpec {
            arrival_rate: args.arrival_rate,
            n_requests: args.n_requests,
            seed: c.seed,
        },
        batch: args.instances,
        reps: args.reps,
    }
}

fn sweep_settings(args: &SweepArgs, sweep: &SweepSpec) -> Result<EngineSettings> {
    let mut s = args.common.settings()?;
    s.model.max_seq_len = s.model.max_seq_len.max(sweep.largest_sequence());
    Ok(s)
}

fn run_sweep(args: &SweepArgs) -> Result<Vec<String>> {
    let c = &args.common;
    let sweep = sweep_spec(args);
    sweep.validate()?;
    let settings = sweep_settings(args, &sweep)?;
    let model = settings.model()?;
    let mut table = MetricsTable::default();
    let mut summary = String::from("value,e2e_s,ttft_s,queue_s,prefill_s,decode_s,hit_rate,failures\n");
    for &v in &sweep.values {
        let r = run_mode(&settings, model.clone(), &sweep, v, c.mode.into())?;
        let s = r.summary;
        println!(
            "{} {}: e2e {}s queue {}s prefill {}s hit rate {}",
            sweep.param.as_str(),
            format_sig6(v),
            format_sig6(s.e2e_s),
            format_sig6(s.queue_s),
            format_sig6(s.prefill_s),
            format_sig6(s.hit_rate)
        );
        let cells = [v, s.e2e_s, s.ttft_s, s.queue_s, s.prefill_s, s.decode_s, s.hit_rate];
        summary.push_str(&cells.map(format_sig6).join(","));
        summary.push_str(&format!(",{}\n", s.failures));
        table.extend(r.table);
    }
    let errors = c.write_metrics("metrics", &table)?;
    let path = c.out.join("sweep_summary.csv");
    fs::write(&path, summary)?;
    println!("wrote {}", path.display());
    Ok(errors)
}

fn run_compare(args: &SweepArgs) -> Result<Vec<String>> {
    let c = &args.common;
    let sweep = sweep_spec(args);
    sweep.validate()?;
    let settings = sweep_settings(args, &sweep)?;
    let report = compare_modes(&settings, settings.model()?, &sweep)?;
    let errors = c.write_metrics("metrics", &report.metrics())?;
    let format = c.format.into();
    let path = c.path("speedups");
    fs::write(&path, report.render(format)?)?;
    println!("wrote {}", path.display());
    print!("{}", report.summary_table());
    Ok(errors)
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Sync(a) => run_sync(a),
        Command::Async(a) => run_async(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Compare(a) => run_compare(a),
    };
    match result {
        Ok(errors) if errors.is_empty() => ExitCode::SUCCESS,
        Ok(errors) => {
            for e in &errors {
                eprintln!("check failed: {e}");
            }
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_is_well_formed() {
        Cli::command().debug_assert();
    }

}
