use std::sync::mpsc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::config::{PositionPolicy, RetrievalMode};
use crate::model::init_model;
use crate::qa::oracle_answer;
use crate::store::StoreConfig;

fn tiny() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        num_heads: 2,
        head_dim: 4,
        tokens_per_frame: 4,
        vocab_size: 32,
        local_window: 16,
        chunk_size: 8,
        eos_token: None,
        ..ModelConfig::default()
    }
}

fn pool(workers: usize, capacity: usize, mode: RetrievalMode, r: usize) -> WorkerPoolConfig {
    WorkerPoolConfig {
        workers,
        queue_capacity: capacity,
        options: QaOptions {
            mode,
            r,
            b: 1,
            tau: 1.0,
            position_policy: PositionPolicy::Consecutive,
            max_new_tokens: 3,
            eos: None,
        },
        sink_frames: 1,
        embed_dim: 16,
        embed_seed: 0,
        key_pooling: KeyPooling::PreRope,
        fps: 1.0,
        faults: FaultPlan::default(),
    }
}

fn stream(rng: &mut ChaCha8Rng, cfg: &ModelConfig, n: usize) -> Vec<InputFrame> {
    (0..n)
        .map(|i| InputFrame {
            tokens: (0..cfg.tokens_per_frame).map(|_| rng.random_range(1..cfg.vocab_size as u32)).collect(),
            timestamp: i as f64,
        })
        .collect()
}

fn start(cfg: &ModelConfig, frames: Vec<InputFrame>, config: WorkerPoolConfig) -> Session {
    let model = Arc::new(init_model(cfg, 3).unwrap());
    let (writer, _) = KvStore::create(StoreConfig::for_model(cfg, 1)).unwrap();
    run_stream(frames, model, writer, config).unwrap()
}

fn request(id: u64, tokens: Vec<u32>, t: f64) -> QARequest {
    QARequest {
        question_id: id,
        tokens,
        admission_timestamp: t,
        priority: 0,
        relevant: None,
    }
}

#[test]
fn session_without_questions_stores_every_frame() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let session = start(&cfg, stream(&mut rng, &cfg, 25), pool(2, 4, RetrievalMode::Internal, 4));
    let store = session.store().clone();
    let m = session.finish().unwrap();
    assert_eq!(store.len(), 25);
    assert!(store.is_closed());
    assert_eq!(m.frames_encoded, 25);
    assert!(m.frames_per_second > 0.0);
    assert!(m.questions.is_empty());
}

#[test]
fn mid_stream_questions_see_only_admitted_frames() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let session = start(&cfg, stream(&mut rng, &cfg, 40), pool(3, 16, RetrievalMode::All, 64));
    let handles: Vec<QaHandle> = (0..8)
        .map(|i| session.submit(request(i, vec![1, 2, 3], 4.5 * i as f64)).unwrap())
        .collect();
    for (i, h) in handles.into_iter().enumerate() {
        assert_eq!(h.question_id(), i as u64);
        let served = h.wait().unwrap();
        let t = 4.5 * i as f64;
        let expect = (t.floor() as u64).min(39);
        assert_eq!(served.admission_frame, Some(expect));
        assert_eq!(served.result.retrieved[0].frame_indices, (0..=expect).collect::<Vec<_>>());
    }
    let m = session.finish().unwrap();
    assert_eq!(m.frames_encoded, 40);
    assert_eq!(m.questions.len(), 8);
    assert!(m.questions.iter().all(|q| q.ok && q.attempts == 1));
}

#[test]
fn question_before_first_frame_has_empty_context() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let session = start(&cfg, stream(&mut rng, &cfg, 6), pool(1, 4, RetrievalMode::Internal, 8));
    let early = session.submit(request(0, vec![5, 6], -1.0)).unwrap().wait().unwrap();
    let at_zero = session.submit(request(1, vec![5, 6], 0.0)).unwrap().wait().unwrap();
    session.finish().unwrap();
    assert_eq!(early.admission_frame, None);
    assert!(early.result.context_tokens.iter().all(|&c| c == 0));
    let model = init_model(&cfg, 3).unwrap();
    assert_eq!(early.result.answer, oracle_answer(&model, &[], &[5, 6], 3, None, 64).unwrap().answer);
    assert_eq!(at_zero.admission_frame, Some(0));
}

#[test]
fn identical_questions_get_identical_answers() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let session = start(&cfg, stream(&mut rng, &cfg, 30), pool(4, 8, RetrievalMode::Internal, 4));
    let a = session.submit(request(0, vec![7, 8, 9], 17.0)).unwrap();
    let b = session.submit(request(1, vec![7, 8, 9], 17.0)).unwrap();
    let (a, b) = (a.wait().unwrap(), b.wait().unwrap());
    session.finish().unwrap();
    assert_eq!(a.result.answer, b.result.answer);
    assert_eq!(a.result.retrieved, b.result.retrieved);
}

#[test]
fn injected_crash_is_retried_once() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut config = pool(2, 8, RetrievalMode::Internal, 4);
    config.faults.crashes.insert(1, 1);
    config.faults.crashes.insert(2, 5);
    let session = start(&cfg, stream(&mut rng, &cfg, 20), config);
    let hs: Vec<QaHandle> = (0..3).map(|i| session.submit(request(i, vec![3, 4], 10.0)).unwrap()).collect();
    let out: Vec<Result<Served>> = hs.into_iter().map(QaHandle::wait).collect();
    let m = session.finish().unwrap();
    assert_eq!(out[0].as_ref().unwrap().attempts, 1);
    assert_eq!(out[1].as_ref().unwrap().attempts, 2);
    assert_eq!(out[1].as_ref().unwrap().result.answer, out[0].as_ref().unwrap().result.answer);
    assert!(matches!(out[2], Err(Error::Worker(_))));
    assert_eq!(m.frames_encoded, 20);
    let failed: Vec<&QuestionMetric> = m.questions.iter().filter(|q| !q.ok).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].attempts, 2);
}

#[test]
fn full_queue_pushes_back() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frames = stream(&mut rng, &cfg, 4);
    let (gate_tx, gate_rx) = mpsc::channel::<()>();
    // The source stalls until released, so the lone worker blocks on
    // admission and the queue fills up.
    let source = frames.into_iter().enumerate().map(move |(i, f)| {
        if i == 1 {
            gate_rx.recv().unwrap();
        }
        f
    });
    let model = Arc::new(init_model(&cfg, 3).unwrap());
    let (writer, _) = KvStore::create(StoreConfig::for_model(&cfg, 1)).unwrap();
    let session = run_stream(source, model, writer, pool(1, 1, RetrievalMode::Internal, 2)).unwrap();
    let first = session.submit(request(0, vec![1], 2.5)).unwrap();
    while !session.tx.is_empty() {
        std::thread::yield_now();
    }
    let second = session.submit(request(1, vec![1], 2.5)).unwrap();
    assert!(matches!(
        session.submit(request(2, vec![1], 2.5)),
        Err(Error::Backpressure { capacity: 1 })
    ));
    gate_tx.send(()).unwrap();
    assert_eq!(first.wait().unwrap().admission_frame, Some(2));
    assert_eq!(second.wait().unwrap().admission_frame, Some(2));
    let m = session.finish().unwrap();
    assert_eq!(m.questions.len(), 2);
    assert!(m.queue_depth.iter().any(|s| s.depth == 1));
}

#[test]
fn metrics_accounting_and_reports() {
    let big = ModelConfig {
        num_layers: 28,
        num_heads: 4,
        head_dim: 128,
        tokens_per_frame: 196,
        bytes_per_scalar: 2,
        ..ModelConfig::default()
    };
    assert_eq!(bytes_per_stream_hour(&big, 0.5), 20_230_963_200);

    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let session = start(&cfg, stream(&mut rng, &cfg, 12), pool(2, 4, RetrievalMode::Uniform, 4));
    session.submit(request(0, vec![1, 2], 5.0)).unwrap().wait().unwrap();
    let m = session.finish().unwrap();
    let lines: Vec<serde_json::Value> = m.to_jsonl().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["record"], "question");
    assert_eq!(lines[1]["record"], "summary");
    assert_eq!(lines[1]["frames_encoded"], 12);
    assert_eq!(lines[1]["bytes_per_stream_hour"], size_bytes(&cfg, 3600));
    assert!(m.summary_table().contains("frames encoded"));
    assert!(m.peak_bytes.hot > 0);
    assert_eq!(m.frame_times_us.len(), 12);
}

#[test]
fn bigger_context_costs_more() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let frames = stream(&mut rng, &cfg, 80);
    let run = |r: usize| {
        let session = start(&cfg, frames.clone(), pool(1, 32, RetrievalMode::Internal, r));
        let hs: Vec<QaHandle> = (0..10).map(|i| session.submit(request(i, vec![1, 2, 3], 79.0)).unwrap()).collect();
        let served: Vec<Served> = hs.into_iter().map(|h| h.wait().unwrap()).collect();
        let m = session.finish().unwrap();
        let ops = served[0].result.attention_ops;
        let latency: u64 = m.questions.iter().map(|q| q.latency_us).min().unwrap();
        let work: u64 = served.iter().map(|s| s.result.latency.total_us()).sum();
        (ops, latency, work)
    };
    let (ops0, _, work0) = run(0);
    let (ops64, _, work64) = run(64);
    assert!(ops0 < ops64);
    assert!(work0 < work64, "r=0 took {work0}us, r=64 took {work64}us");
}

/// Answers of questions admitted before `cut` must not change when every
/// later frame is replaced.
fn gating_schedule(seed: u64) {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(5..30);
    let frames = stream(&mut rng, &cfg, n);
    let cut = rng.random_range(0..n) as f64 + 0.5;
    let mut perturbed = frames.clone();
    for f in perturbed.iter_mut().filter(|f| f.timestamp > cut) {
        for t in &mut f.tokens {
            *t = (*t + 1 + rng.random_range(0..5)) % cfg.vocab_size as u32;
        }
    }
    let questions: Vec<QARequest> = (0..rng.random_range(1..6))
        .map(|i| {
            let t = rng.random_range(-1.0..cut);
            request(i, (0..3).map(|_| rng.random_range(0..32)).collect(), t)
        })
        .collect();
    let mode = [RetrievalMode::Internal, RetrievalMode::External, RetrievalMode::Uniform][seed as usize % 3];
    let answers = |frames: Vec<InputFrame>, workers: usize| {
        let session = start(&cfg, frames, pool(workers, 16, mode, 3));
        let hs: Vec<QaHandle> = questions.iter().map(|q| session.submit(q.clone()).unwrap()).collect();
        let out: Vec<(Vec<u32>, Vec<RetrievalResult>)> = hs
            .into_iter()
            .map(|h| {
                let s = h.wait().unwrap();
                (s.result.answer, s.result.retrieved)
            })
            .collect();
        session.finish().unwrap();
        out
    };
    let a = answers(frames, rng.random_range(1..9));
    let b = answers(perturbed, rng.random_range(1..9));
    assert_eq!(a, b, "seed {seed}");
}

use crate::retrieval::RetrievalResult;

#[test]
fn gating_holds_across_random_schedules() {
    for seed in 0..20 {
        gating_schedule(seed);
    }
}

#[test]
fn randomized_schedules_always_complete() {
    let cfg = tiny();
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(0..6);
        let workers = rng.random_range(1..9);
        let mut config = pool(workers, 4, RetrievalMode::Internal, 2);
        config.options.max_new_tokens = 1;
        if rng.random_bool(0.2) {
            config.faults.crashes.insert(0, rng.random_range(1..3));
        }
        let session = start(&cfg, stream(&mut rng, &cfg, n), config);
        let mut handles = Vec::new();
        for i in 0..rng.random_range(0..6) {
            match session.submit(request(i, vec![1], rng.random_range(-1.0..8.0))) {
                Ok(h) => handles.push(h),
                Err(Error::Backpressure { .. }) => {}
                Err(e) => panic!("seed {seed}: {e}"),
            }
        }
        for h in handles {
            let _ = h.wait();
        }
        let m = session.finish().unwrap();
        assert_eq!(m.frames_encoded, n as u64);
    }
}
