//! Concurrent streaming sessions.
//!
//! One encoder thread ingests frames into the store while a pool of workers
//! answers questions. A question admitted at time `t` is answered from a
//! snapshot ending at the last frame with timestamp `≤ t`, so frames that
//! arrive later never influence it.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use crossbeam_channel::{bounded, Receiver, Sender, TrySendError};
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::config::{KeyPooling, ModelConfig, RunConfig};
use crate::encoder::{InputFrame, StreamEncoder};
use crate::error::{Error, Result};
use crate::model::ToyModel;
use crate::qa::{answer_question, AnswerRecord, QAResult, QaOptions, Sources};
use crate::retrieval::{BagOfTokensEmbedder, ExternalIndex, InternalIndex};
use crate::store::{size_bytes, KvStore, StoreWriter, TierBytes};

/// A question waiting to be answered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QARequest {
    pub question_id: u64,
    pub tokens: Vec<u32>,
    /// Stream time at which the question was asked, in seconds.
    pub admission_timestamp: f64,
    /// Reserved; requests are served in arrival order.
    #[serde(default)]
    pub priority: i32,
    /// Labelled relevant frames, used by oracle retrieval.
    #[serde(default)]
    pub relevant: Option<Vec<u64>>,
}

/// Injected worker failures, by question id: the number of attempts that
/// crash before one is allowed to run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FaultPlan {
    pub crashes: HashMap<u64, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkerPoolConfig {
    pub workers: usize,
    pub queue_capacity: usize,
    pub options: QaOptions,
    pub sink_frames: usize,
    /// Dimension and seed of the external embedder.
    pub embed_dim: usize,
    pub embed_seed: u64,
    pub key_pooling: KeyPooling,
    /// Frames per second of stream time, for per-hour accounting.
    pub fps: f64,
    pub faults: FaultPlan,
}

impl WorkerPoolConfig {
    pub fn from_config(config: &RunConfig) -> Self {
        Self {
            workers: config.workers,
            queue_capacity: config.queue_capacity,
            options: QaOptions::from_config(config),
            sink_frames: config.sink_frames,
            embed_dim: config.retrieval.embed_dim,
            embed_seed: config.seed,
            key_pooling: config.retrieval.key_pooling,
            fps: config.fps,
            faults: FaultPlan::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        if self.queue_capacity == 0 {
            return Err(Error::Config("queue capacity must be at least 1".into()));
        }
        Ok(())
    }
}

/// A finished request.
#[derive(Clone, Debug, PartialEq)]
pub struct Served {
    pub result: QAResult,
    /// Last frame the answer could use.
    pub admission_frame: Option<u64>,
    pub attempts: usize,
}

impl Served {
    pub fn record(&self) -> AnswerRecord {
        AnswerRecord::new(&self.result, self.admission_frame)
    }
}

/// Completion handle of a submitted request.
pub struct QaHandle {
    question_id: u64,
    rx: Receiver<Result<Served>>,
}

impl QaHandle {
    pub fn question_id(&self) -> u64 {
        self.question_id
    }

    /// Blocks until the request completes or errors.
    pub fn wait(self) -> Result<Served> {
        self.rx.recv().unwrap_or(Err(Error::Closed))
    }
}

struct Job {
    request: QARequest,
    attempt: usize,
    submitted: Instant,
    reply: Sender<Result<Served>>,
}

enum Message {
    Job(Job),
    Stop,
}

/// Payload of an injected crash.
struct InjectedFault;

/// One completed or failed question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionMetric {
    pub question_id: u64,
    pub admission_frame: Option<u64>,
    pub attempts: usize,
    /// Submit to completion.
    pub latency_us: u64,
    pub ok: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueSample {
    pub at_us: u64,
    pub depth: usize,
}

#[derive(Default)]
struct Shared {
    questions: Vec<QuestionMetric>,
    queue_depth: Vec<QueueSample>,
    frame_times_us: Vec<u64>,
    encode_us: u64,
    outstanding: usize,
}

struct Tracker {
    state: Mutex<Shared>,
    idle: Condvar,
    started: Instant,
}

impl Tracker {
    fn now_us(&self) -> u64 {
        self.started.elapsed().as_micros() as u64
    }

    fn sample_queue(&self, depth: usize) {
        let at_us = self.now_us();
        self.state.lock().queue_depth.push(QueueSample { at_us, depth });
    }

    fn complete(&self, metric: QuestionMetric) {
        let mut s = self.state.lock();
        s.questions.push(metric);
        s.outstanding -= 1;
        if s.outstanding == 0 {
            self.idle.notify_all();
        }
    }
}

/// A running stream with its worker pool.
pub struct Session {
    store: KvStore,
    model: Arc<ToyModel>,
    tx: Sender<Message>,
    queue_capacity: usize,
    fps: f64,
    encoder: Option<JoinHandle<Result<StoreWriter>>>,
    workers: Vec<JoinHandle<()>>,
    tracker: Arc<Tracker>,
}

/// Starts encoding `source` into the store behind `writer` and spawns the
/// worker pool.
pub fn run_stream<I>(
    source: I,
    model: Arc<ToyModel>,
    writer: StoreWriter,
    config: WorkerPoolConfig,
) -> Result<Session>
where
    I: IntoIterator<Item = InputFrame>,
    I::IntoIter: Send + 'static,
{
    config.validate()?;
    let store = writer.store().clone();
    let internal = InternalIndex::new(&model, config.key_pooling);
    let embedder = BagOfTokensEmbedder::new(model.config().vocab_size, config.embed_dim, config.embed_seed)?;
    let external = ExternalIndex::new(Arc::new(embedder));
    let mut encoder = StreamEncoder::new(model.clone(), writer, config.sink_frames)?;
    encoder.add_observer(Box::new(internal.clone()));
    encoder.add_observer(Box::new(external.clone()));

    let tracker = Arc::new(Tracker {
        state: Mutex::new(Shared::default()),
        idle: Condvar::new(),
        started: Instant::now(),
    });
    let (tx, rx) = bounded::<Message>(config.queue_capacity);

    let source = source.into_iter();
    let enc_tracker = tracker.clone();
    let encoder = std::thread::Builder::new()
        .name("encoder".into())
        .spawn(move || encode_loop(encoder, source, &enc_tracker))
        .map_err(|e| Error::Worker(e.to_string()))?;

    let workers = (0..config.workers)
        .map(|i| {
            let ctx = WorkerContext {
                model: model.clone(),
                store: store.clone(),
                internal: internal.clone(),
                external: external.clone(),
                options: config.options.clone(),
                faults: config.faults.clone(),
                rx: rx.clone(),
                tx: tx.clone(),
                tracker: tracker.clone(),
            };
            std::thread::Builder::new()
                .name(format!("qa-worker-{i}"))
                .spawn(move || ctx.run())
                .map_err(|e| Error::Worker(e.to_string()))
        })
        .collect::<Result<_>>()?;

    Ok(Session {
        store,
        model,
        tx,
        queue_capacity: config.queue_capacity,
        fps: config.fps,
        encoder: Some(encoder),
        workers,
        tracker,
    })
}

fn encode_loop(
    mut encoder: StreamEncoder,
    source: impl Iterator<Item = InputFrame>,
    tracker: &Tracker,
) -> Result<StoreWriter> {
    let result = (|| {
        for frame in source {
            let t = Instant::now();
            encoder.encode_chunk(std::slice::from_ref(&frame))?;
            let spent = t.elapsed().as_micros() as u64;
            let at = tracker.now_us();
            let mut s = tracker.state.lock();
            s.encode_us += spent;
            s.frame_times_us.push(at);
        }
        Ok(())
    })();
    // Close even on failure so that waiting workers wake up.
    let writer = encoder.finish();
    result.and(writer)
}

struct WorkerContext {
    model: Arc<ToyModel>,
    store: KvStore,
    internal: InternalIndex,
    external: ExternalIndex,
    options: QaOptions,
    faults: FaultPlan,
    rx: Receiver<Message>,
    tx: Sender<Message>,
    tracker: Arc<Tracker>,
}

impl WorkerContext {
    fn run(self) {
        while let Ok(Message::Job(job)) = self.rx.recv() {
            self.tracker.sample_queue(self.rx.len());
            self.handle(job);
        }
    }

    /// Waits until every frame with timestamp `≤ t` is stored, and returns
    /// the last of them.
    fn admit(&self, t: f64) -> Option<u64> {
        loop {
            let n = self.store.len();
            let past = n > 0 && self.store.timestamp(n - 1).is_some_and(|ts| ts > t);
            if past || self.store.is_closed() {
                return self.store.last_frame_at_or_before(t);
            }
            self.store.wait_for_frames(n + 1);
        }
    }

    fn attempt(&self, job: &Job) -> Result<(QAResult, Option<u64>)> {
        let admission = self.admit(job.request.admission_timestamp);
        let snapshot = self.store.snapshot_at(admission)?;
        let crashes = self.faults.crashes.get(&job.request.question_id).copied().unwrap_or(0);
        if job.attempt < crashes {
            panic::resume_unwind(Box::new(InjectedFault));
        }
        let sources = Sources {
            snapshot: &snapshot,
            internal: Some(&self.internal),
            external: Some(&self.external),
            relevant: job.request.relevant.as_deref(),
        };
        let result = answer_question(
            &self.model,
            sources,
            job.request.question_id,
            &job.request.tokens,
            &self.options,
        )?;
        Ok((result, admission))
    }

    fn handle(&self, mut job: Job) {
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| self.attempt(&job)));
        let (reply, admission) = match outcome {
            Ok(Ok((result, adm))) => (
                Ok(Served {
                    result,
                    admission_frame: adm,
                    attempts: job.attempt + 1,
                }),
                adm,
            ),
            Ok(Err(e)) => (Err(e), None),
            Err(payload) => {
                let what = if payload.is::<InjectedFault>() {
                    "injected fault".to_string()
                } else if let Some(s) = payload.downcast_ref::<&str>() {
                    (*s).to_string()
                } else if let Some(s) = payload.downcast_ref::<String>() {
                    s.clone()
                } else {
                    "panic".to_string()
                };
                if job.attempt == 0 {
                    warn!(question = job.request.question_id, %what, "worker crashed; requeueing");
                    job.attempt += 1;
                    match self.tx.try_send(Message::Job(job)) {
                        Ok(()) => return,
                        Err(TrySendError::Full(Message::Job(j)) | TrySendError::Disconnected(Message::Job(j))) => {
                            job = j;
                        }
                        Err(_) => unreachable!("only jobs are requeued"),
                    }
                    (Err(Error::Worker(format!("{what}; requeue failed"))), None)
                } else {
                    (Err(Error::Worker(format!("{what} after retry"))), None)
                }
            }
        };
        let metric = QuestionMetric {
            question_id: job.request.question_id,
            admission_frame: admission,
            attempts: job.attempt + 1,
            latency_us: job.submitted.elapsed().as_micros() as u64,
            ok: reply.is_ok(),
        };
        debug!(question = metric.question_id, ok = metric.ok, "question done");
        let _ = job.reply.send(reply);
        self.tracker.complete(metric);
    }
}

/// Session measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub frames_encoded: u64,
    /// Time spent inside the encoder, in microseconds.
    pub encode_us: u64,
    pub frames_per_second: f64,
    /// Completion time of each frame since session start.
    pub frame_times_us: Vec<u64>,
    pub questions: Vec<QuestionMetric>,
    pub queue_depth: Vec<QueueSample>,
    pub peak_bytes: TierBytes,
    pub offloaded_bytes: u64,
    /// KV bytes one hour of stream produces at the session frame rate.
    pub bytes_per_stream_hour: u64,
}

/// KV bytes produced by one hour of stream at `fps`.
pub fn bytes_per_stream_hour(model: &ModelConfig, fps: f64) -> u64 {
    size_bytes(model, (fps * 3600.0).round() as u64)
}

impl SessionMetrics {
    /// Line-delimited report: one record per question, then a summary.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for q in &self.questions {
            let line = serde_json::json!({ "record": "question", "question": q });
            let _ = writeln!(out, "{line}");
        }
        let summary = serde_json::json!({
            "record": "summary",
            "frames_encoded": self.frames_encoded,
            "encode_us": self.encode_us,
            "frames_per_second": self.frames_per_second,
            "questions": self.questions.len(),
            "failed": self.questions.iter().filter(|q| !q.ok).count(),
            "max_queue_depth": self.queue_depth.iter().map(|s| s.depth).max().unwrap_or(0),
            "peak_bytes": self.peak_bytes,
            "offloaded_bytes": self.offloaded_bytes,
            "bytes_per_stream_hour": self.bytes_per_stream_hour,
        });
        let _ = writeln!(out, "{summary}");
        out
    }

    /// Human-readable summary.
    pub fn summary_table(&self) -> String {
        let mut lat: Vec<u64> = self.questions.iter().filter(|q| q.ok).map(|q| q.latency_us).collect();
        lat.sort_unstable();
        let pct = |p: f64| -> u64 {
            if lat.is_empty() {
                0
            } else {
                lat[((lat.len() - 1) as f64 * p).round() as usize]
            }
        };
        let rows = [
            ("frames encoded", self.frames_encoded.to_string()),
            ("encode frames/s", format!("{:.2}", self.frames_per_second)),
            ("questions ok", lat.len().to_string()),
            ("questions failed", self.questions.iter().filter(|q| !q.ok).count().to_string()),
            ("latency p50 (us)", pct(0.5).to_string()),
            ("latency max (us)", pct(1.0).to_string()),
            ("peak hot bytes", self.peak_bytes.hot.to_string()),
            ("peak ram bytes", self.peak_bytes.ram.to_string()),
            ("peak disk bytes", self.peak_bytes.disk.to_string()),
            ("offloaded bytes", self.offloaded_bytes.to_string()),
            ("bytes per stream-hour", self.bytes_per_stream_hour.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<24}{v:>20}");
        }
        out
    }
}

impl Session {
    pub fn store(&self) -> &KvStore {
        &self.store
    }

    /// Queues a request. Fails fast when the queue is full.
    pub fn submit(&self, request: QARequest) -> Result<QaHandle> {
        let (reply, rx) = bounded(1);
        let question_id = request.question_id;
        let job = Job {
            request,
            attempt: 0,
            submitted: Instant::now(),
            reply,
        };
        self.tracker.state.lock().outstanding += 1;
        match self.tx.try_send(Message::Job(job)) {
            Ok(()) => {
                self.tracker.sample_queue(self.tx.len());
                Ok(QaHandle { question_id, rx })
            }
            Err(e) => {
                let mut s = self.tracker.state.lock();
                s.outstanding -= 1;
                if s.outstanding == 0 {
                    self.tracker.idle.notify_all();
                }
                match e {
                    TrySendError::Full(_) => Err(Error::Backpressure {
                        capacity: self.queue_capacity,
                    }),
                    TrySendError::Disconnected(_) => Err(Error::Closed),
                }
            }
        }
    }

    /// Blocks until the encoder has consumed the whole source.
    pub fn wait_for_encoder(&mut self) -> Result<()> {
        match self.encoder.take() {
            Some(h) => h.join().map_err(|_| Error::Worker("encoder panicked".into()))?.map(|_| ()),
            None => Ok(()),
        }
    }

    /// Snapshot of the measurements so far.
    pub fn metrics(&self) -> SessionMetrics {
        let stats = self.store.stats();
        let s = self.tracker.state.lock();
        let frames = s.frame_times_us.len() as u64;
        SessionMetrics {
            frames_encoded: frames,
            encode_us: s.encode_us,
            frames_per_second: if s.encode_us > 0 {
                frames as f64 / (s.encode_us as f64 / 1e6)
            } else {
                0.0
            },
            frame_times_us: s.frame_times_us.clone(),
            questions: s.questions.clone(),
            queue_depth: s.queue_depth.clone(),
            peak_bytes: stats.peak,
            offloaded_bytes: stats.offloaded_bytes,
            bytes_per_stream_hour: bytes_per_stream_hour(self.model.config(), self.fps),
        }
    }

    /// Waits for the encoder and every queued question, stops the workers
    /// and returns the final measurements.
    pub fn finish(mut self) -> Result<SessionMetrics> {
        let encoded = self.wait_for_encoder();
        {
            let mut s = self.tracker.state.lock();
            while s.outstanding > 0 {
                self.tracker.idle.wait(&mut s);
            }
        }
        for _ in &self.workers {
            let _ = self.tx.send(Message::Stop);
        }
        for w in self.workers.drain(..) {
            w.join().map_err(|_| Error::Worker("worker panicked".into()))?;
        }
        encoded?;
        Ok(self.metrics())
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if self.workers.is_empty() {
            return;
        }
        let _ = self.wait_for_encoder();
        for _ in &self.workers {
            let _ = self.tx.send(Message::Stop);
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

#[cfg(test)]
mod tests;
