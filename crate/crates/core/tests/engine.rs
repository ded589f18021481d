mod common;

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use alora_serve::{
    EngineError, RequestId, RequestSpec, RequestTag, SchedulerError, SpanKind, VirtualClock,
    WallClock,
};
use alora_serve::Engine;
use common::*;

fn base(id: u64, prompt: Vec<u32>, gen: usize) -> RequestSpec {
    RequestSpec::new(id, prompt, gen)
}

fn alora(id: u64, prompt: Vec<u32>, gen: usize) -> RequestSpec {
    RequestSpec::new(id, prompt, gen).with_adapter("alora")
}

fn conversation(first: &alora_serve::CompletedRequest) -> Vec<u32> {
    first.request.tokens().to_vec()
}

#[test]
fn adapter_reuses_base_prefix() {
    let b = 4;
    let mut rng = rng(1);
    for (x, y) in [(32, 16), (30, 7), (5, 1), (13, 13)] {
        let mut e = virtual_engine(config(b, 256, 64));
        let first = e.run_request(base(1, random_prompt(&mut rng, x), y)).unwrap();
        assert_eq!(first.metrics.cache_hit_tokens, 0);
        let prompt = with_invocation(conversation(&first));
        let second = e.run_request(alora(2, prompt.clone(), 16)).unwrap();
        assert_eq!(second.metrics.cache_hit_tokens, (x + y - 1) / b * b, "x={x} y={y}");
        assert_eq!(
            second.metrics.prefill_tokens_computed + second.metrics.cache_hit_tokens,
            prompt.len()
        );

        let mut cold_cfg = config(b, 256, 64);
        cold_cfg.prefix_caching = false;
        cold_cfg.record_logits = true;
        let mut cold = virtual_engine(cold_cfg);
        let reference = cold.run_request(alora(2, prompt.clone(), 16)).unwrap();
        assert_eq!(second.generated(), reference.generated());
    }
}

#[test]
fn lora_mode_gets_no_hits() {
    let mut rng = rng(2);
    let mut e = virtual_engine(lora_config(config(4, 256, 64)));
    let first = e.run_request(base(1, random_prompt(&mut rng, 32), 16)).unwrap();
    let second = e.run_request(alora(2, with_invocation(conversation(&first)), 16)).unwrap();
    assert_eq!(second.metrics.cache_hit_tokens, 0);
    assert_eq!(second.metrics.prefill_tokens_computed, 51);
}

#[test]
fn base_reuses_adapter_prefix_up_to_invocation() {
    let b = 4;
    let mut rng = rng(3);
    for x in [8, 21, 32, 3] {
        let mut e = virtual_engine(config(b, 256, 64));
        let first = e.run_request(alora(1, with_invocation(random_prompt(&mut rng, x)), 16)).unwrap();
        assert_eq!(first.request.inv_start, Some(x));
        let second = e.run_request(base(2, conversation(&first), 8)).unwrap();
        assert_eq!(second.metrics.cache_hit_tokens, x / b * b, "x={x}");
    }
}

#[test]
fn caching_does_not_change_logits() {
    for trial in 0..5 {
        let x = 10 + trial * 7;
        let mut outputs = Vec::new();
        for caching in [true, false] {
            let mut cfg = config(3, 256, 16);
            cfg.prefix_caching = caching;
            cfg.record_logits = true;
            let mut e = virtual_engine(cfg);
            let mut rng = rng(100 + trial as u64);
            let p = random_prompt(&mut rng, x);
            let a = e.run_request(base(1, p, 9)).unwrap();
            let b = e.run_request(alora(2, with_invocation(conversation(&a)), 5)).unwrap();
            let c = e.run_request(base(3, conversation(&b), 4)).unwrap();
            outputs.push(
                [a, b, c]
                    .into_iter()
                    .map(|r| (r.generated().to_vec(), r.logits().unwrap().to_vec()))
                    .collect::<Vec<_>>(),
            );
        }
        for ((ta, la), (tb, lb)) in outputs[0].iter().zip(&outputs[1]) {
            assert_eq!(ta, tb);
            for (x, y) in la.iter().zip(lb) {
                assert!(max_abs_diff(x, y) <= 1e-6);
            }
        }
    }
}

#[test]
fn chunking_only_changes_timing() {
    let mut rng = rng(5);
    let prompts: Vec<Vec<u32>> = (0..4).map(|i| with_invocation(random_prompt(&mut rng, 10 + 9 * i))).collect();
    let mut results = Vec::new();
    for chunked in [true, false] {
        let mut cfg = config(4, 256, 64);
        cfg.scheduler.chunked_prefill = chunked;
        if chunked {
            cfg.scheduler.token_budget = 5;
        }
        let mut e = virtual_engine(cfg);
        let specs = prompts
            .iter()
            .enumerate()
            .map(|(i, p)| if i % 2 == 0 { alora(i as u64, p.clone(), 6) } else { base(i as u64, p.clone(), 6) })
            .collect();
        e.submit_batch(specs).unwrap();
        let mut out = e.run_until_idle().unwrap().completed;
        out.sort_by_key(|c| c.id());
        results.push(out.iter().map(|c| c.generated().to_vec()).collect::<Vec<_>>());
    }
    assert_eq!(results[0], results[1]);
}

#[test]
fn long_unchunked_prefill_delays_the_next_request() {
    let mut queue = Vec::new();
    for chunked in [true, false] {
        let mut cfg = config(4, 256, 64);
        cfg.scheduler.chunked_prefill = chunked;
        let mut e = virtual_engine(cfg);
        let mut rng = rng(6);
        e.submit(base(1, random_prompt(&mut rng, 4), 8)).unwrap();
        e.step().unwrap();
        e.submit_batch(vec![
            base(2, random_prompt(&mut rng, 60), 2),
            base(3, random_prompt(&mut rng, 4), 2),
        ])
        .unwrap();
        let out = e.run_until_idle().unwrap();
        queue.push(out.get(RequestId(3)).unwrap().metrics.queue);
    }
    assert_eq!(queue[0], Duration::ZERO);
    assert!(queue[1] > queue[0]);
}

#[test]
fn stage_identities_hold_exactly() {
    let mut e = virtual_engine(config(4, 256, 8));
    let mut rng = rng(7);
    let specs = (0..6).map(|i| base(i, random_prompt(&mut rng, 5 + 3 * i as usize), 1 + i as usize)).collect();
    e.submit_batch(specs).unwrap();
    let out = e.run_until_idle().unwrap();
    assert_eq!(out.completed.len(), 6);
    for c in &out.completed {
        let ts = c.request.timestamps;
        let m = &c.metrics;
        assert_eq!(ts.finish.unwrap() - ts.arrival, m.queue + m.prefill + m.decode);
        assert_eq!(m.e2e(), m.queue + m.prefill + m.decode);
        assert_eq!(m.ttft(), m.queue + m.prefill);
        assert!(ts.arrival <= ts.prefill_start.unwrap());
        assert!(ts.prefill_start <= ts.decode_start && ts.decode_start <= ts.finish);
        assert_eq!(m.output_tokens, c.request.max_new_tokens);
    }
}

#[test]
fn fully_cached_prefill_takes_one_step() {
    let mut e = virtual_engine(config(4, 256, 4));
    let mut rng = rng(8);
    let p = random_prompt(&mut rng, 21);
    let cold = e.run_request(base(1, p.clone(), 2)).unwrap();
    e.enable_trace();
    let warm = e.run_request(base(2, p, 2)).unwrap();
    assert_eq!(warm.metrics.cache_hit_tokens, 20);
    let trace = e.take_trace();
    let prefills: Vec<_> = trace
        .iter()
        .flat_map(|t| &t.scheduled)
        .filter(|s| s.kind == SpanKind::Prefill)
        .collect();
    assert_eq!(prefills.len(), 1);
    assert_eq!(prefills[0].span, [20, 21]);
    assert!(warm.metrics.ttft() < cold.metrics.ttft());
}

#[test]
fn input_processing_errors() {
    let e = virtual_engine(config(4, 8, 64));
    assert!(matches!(
        e.submit(alora(1, vec![1, 2, 3], 2)),
        Err(EngineError::InvocationNotFound { .. })
    ));
    assert!(matches!(
        e.submit(base(1, vec![1, 2, 3], 2).with_adapter("missing")),
        Err(EngineError::UnknownAdapter(_))
    ));
    assert!(matches!(
        e.submit(base(1, vec![1; 40], 2)),
        Err(EngineError::RequestTooLarge { needed: 11, pool_blocks: 8, .. })
    ));
    e.submit(base(1, vec![1; 4], 2)).unwrap();
    assert!(matches!(
        e.submit(base(1, vec![1; 4], 2)),
        Err(EngineError::Scheduler(SchedulerError::DuplicateId(_)))
    ));
}

#[test]
fn invocation_uses_last_occurrence() {
    let mut e = virtual_engine(config(4, 64, 64));
    let mut prompt = with_invocation(vec![1, 2, 3, 4, 5]);
    prompt.extend([6, 7]);
    prompt.extend(INVOCATION);
    let done = e.run_request(alora(1, prompt, 2)).unwrap();
    assert_eq!(done.request.inv_start, Some(10));
}

#[test]
fn concurrent_submitters_all_complete() {
    let clock = Arc::new(WallClock::new());
    let mut e = Engine::new(config(4, 512, 32), clock).unwrap();
    let handle = e.handle();
    let producers: Vec<_> = (0..4u64)
        .map(|t| {
            let h = handle.clone();
            thread::spawn(move || {
                let mut rng = rng(t);
                for i in 0..5 {
                    let id = t * 100 + i;
                    let spec = if i % 2 == 0 {
                        RequestSpec::new(id, random_prompt(&mut rng, 12), 3)
                    } else {
                        RequestSpec::new(id, with_invocation(random_prompt(&mut rng, 12)), 3).with_adapter("alora")
                    };
                    h.submit(spec.with_tag(RequestTag::new("t", "s", "alora"))).unwrap();
                }
            })
        })
        .collect();
    let mut done = Vec::new();
    while done.len() < 20 {
        done.extend(e.step().unwrap().completed);
        if !e.has_work() {
            thread::yield_now();
        }
    }
    for p in producers {
        p.join().unwrap();
    }
    let mut ids: Vec<u64> = done.iter().map(|c| c.id().0).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 20);
    assert_eq!(e.pool().allocated_count(), 0);
    e.pool().check_invariants().unwrap();
}

#[test]
fn virtual_clock_advances_with_work() {
    let clock = Arc::new(VirtualClock::new());
    let mut e = Engine::new(config(4, 64, 64), clock.clone()).unwrap();
    e.run_request(base(1, vec![1; 10], 3)).unwrap();
    assert!(alora_serve::Clock::now(clock.as_ref()) > Duration::ZERO);
}
