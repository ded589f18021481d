use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use alora_serve::{Engine, MetricsTable, RequestSpec, Transformer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::driver::{Driver, StageRecord};
use crate::pipeline::PipelineSpec;
use crate::setup::EngineSettings;
use crate::BenchError;

/// Concurrent conversations the default async pool is sized for.
pub const DEFAULT_ASYNC_CAPACITY: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadSpec {
    /// Pipeline instances per second.
    pub arrival_rate: f64,
    pub n_requests: usize,
    pub seed: u64,
}

impl LoadSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        if !(self.arrival_rate.is_finite() && self.arrival_rate > 0.0) {
            return Err(BenchError::InvalidSpec("arrival_rate must be positive".into()));
        }
        if self.n_requests == 0 {
            return Err(BenchError::InvalidSpec("n_requests must be at least 1".into()));
        }
        Ok(())
    }
}

/// Arrival instants of a Poisson process: cumulative exponential gaps, the
/// first arrival at the first gap.
pub fn arrival_times(load: &LoadSpec) -> Result<Vec<Duration>, BenchError> {
    load.validate()?;
    let exp = Exp::new(load.arrival_rate).map_err(|e| BenchError::InvalidSpec(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(load.seed);
    let mut t = 0.0f64;
    Ok((0..load.n_requests)
        .map(|_| {
            t += exp.sample(&mut rng);
            Duration::from_secs_f64(t)
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct AsyncRun {
    pub spec: PipelineSpec,
    pub load: LoadSpec,
    pub pool_blocks: usize,
    pub arrivals: Vec<Duration>,
    pub table: MetricsTable,
    pub records: Vec<StageRecord>,
}

/// Launches one pipeline instance per arrival and lets each run its turns.
/// Requests the engine cannot hold are recorded as failures.
pub fn run_async_load(
    settings: &EngineSettings,
    model: Arc<Transformer>,
    spec: &PipelineSpec,
    load: &LoadSpec,
) -> Result<AsyncRun, BenchError> {
    spec.validate()?;
    let arrivals = arrival_times(load)?;
    let pool_blocks = settings
        .pool_blocks
        .unwrap_or_else(|| settings.pool_for(DEFAULT_ASYNC_CAPACITY, spec.max_sequence_len()));
    let mut engine = settings.engine(model, pool_blocks, spec.adapters_used(), spec.mode)?;
    let mut driver = Driver::new(spec, settings, load.n_requests, false);
    if settings.virtual_clock {
        drive_virtual(&mut engine, &mut driver, &arrivals)?;
    } else {
        drive_wall(&mut engine, &mut driver, &arrivals)?;
    }
    let (table, records) = driver.finish();
    Ok(AsyncRun {
        spec: spec.clone(),
        load: load.clone(),
        pool_blocks,
        arrivals,
        table,
        records,
    })
}

fn submit(engine: &Engine, driver: &mut Driver, specs: Vec<RequestSpec>) {
    if specs.is_empty() {
        return;
    }
    if let Err(e) = engine.submit_batch(specs.clone()) {
        driver.reject(&specs, &e.to_string());
    }
}

fn step(engine: &mut Engine, driver: &mut Driver) -> Result<(), BenchError> {
    let report = engine.step().map_err(BenchError::engine("async load"))?;
    for f in &report.failed {
        driver.on_failed(f);
    }
    for c in &report.completed {
        let next = driver.on_complete(c);
        submit(engine, driver, next);
    }
    Ok(())
}

fn drive_virtual(engine: &mut Engine, driver: &mut Driver, arrivals: &[Duration]) -> Result<(), BenchError> {
    let clock = engine.clock().clone();
    let mut next = 0;
    loop {
        let now = clock.now();
        while next < arrivals.len() && arrivals[next] <= now {
            let specs = driver.launch(next, Some(arrivals[next]));
            submit(engine, driver, specs);
            next += 1;
        }
        if engine.has_work() {
            step(engine, driver)?;
        } else if next < arrivals.len() {
            clock.advance_to(arrivals[next]);
        } else if driver.all_done() {
            return Ok(());
        } else {
            return Err(BenchError::Stalled(driver.unfinished()));
        }
    }
}

fn drive_wall(engine: &mut Engine, driver: &mut Driver, arrivals: &[Duration]) -> Result<(), BenchError> {
    let launches: Vec<(Duration, Vec<RequestSpec>)> = arrivals
        .iter()
        .enumerate()
        .map(|(i, &at)| (at, driver.launch(i, None)))
        .collect();
    let handle = engine.handle();
    let (tx, rx) = mpsc::channel::<(Vec<RequestSpec>, String)>();
    let submitter = thread::spawn(move || {
        for (at, specs) in launches {
            let now = handle.clock().now();
            if at > now {
                thread::sleep(at - now);
            }
            if let Err(e) = handle.submit_batch(specs.clone()) {
                let _ = tx.send((specs, e.to_string()));
            }
        }
    });
    while !driver.all_done() {
        for (specs, reason) in rx.try_iter() {
            driver.reject(&specs, &reason);
        }
        if engine.has_work() {
            step(engine, driver)?;
        } else if submitter.is_finished() {
            for (specs, reason) in rx.try_iter() {
                driver.reject(&specs, &reason);
            }
            if !driver.all_done() && !engine.has_work() {
                return Err(BenchError::Stalled(driver.unfinished()));
            }
        } else {
            thread::sleep(Duration::from_micros(50));
        }
    }
    submitter.join().expect("submitter thread panicked");
    Ok(())
}
