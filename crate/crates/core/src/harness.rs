//! Experiment plumbing: synthetic traces with planted relevance labels,
//! retrieval sweeps and end-to-end verification against dense references.
//!
//! Recall here is label-based: the fraction of a question's relevant frames
//! that retrieval selects. Answer quality is checked only as exact agreement
//! with the dense full-attention reference.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::config::{ModelConfig, RetrievalMode, RunConfig};
use crate::encoder::{InputFrame, StreamEncoder};
use crate::error::{Error, Result};
use crate::model::{init_model, ToyModel};
use crate::par;
use crate::qa::{answer_question, oracle_answer, QaOptions, Sources, StageLatency};
use crate::retrieval::{self, BagOfTokensEmbedder, ExternalIndex, InternalIndex};
use crate::serving::QARequest;
use crate::store::{FrameKv, KvStore, StoreConfig, StoreStats, TierBytes};

/// Frames `start..=end` repeat the tokens of `pattern`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeedleSpec {
    pub start: u64,
    pub end: u64,
    pub pattern: u32,
}

/// A question asked at `admission_frame` with the tokens of `pattern`.
/// Without explicit `relevant` frames, the needles sharing its pattern are
/// relevant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionSpec {
    pub admission_frame: u64,
    pub pattern: u32,
    #[serde(default)]
    pub relevant: Option<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTraceSpec {
    pub seed: u64,
    pub frames: u64,
    pub tokens_per_frame: usize,
    pub vocab_size: usize,
    /// Distinct tokens per pattern.
    pub pattern_len: usize,
    pub fps: f64,
    pub needles: Vec<NeedleSpec>,
    pub questions: Vec<QuestionSpec>,
}

impl SyntheticTraceSpec {
    /// A trace shaped for `model`: one three-frame needle at 40% of the
    /// stream and one question on the last frame.
    pub fn single_needle(model: &ModelConfig, seed: u64, frames: u64, fps: f64) -> Self {
        let start = frames * 2 / 5;
        Self {
            seed,
            frames,
            tokens_per_frame: model.tokens_per_frame,
            vocab_size: model.vocab_size,
            pattern_len: 4,
            fps,
            needles: vec![NeedleSpec {
                start,
                end: (start + 2).min(frames.saturating_sub(1)),
                pattern: 0,
            }],
            questions: vec![QuestionSpec {
                admission_frame: frames.saturating_sub(1),
                pattern: 0,
                relevant: None,
            }],
        }
    }

    /// Tokens of pattern `p`: `1 + p·P .. 1 + (p+1)·P`, all in the lower
    /// half of the vocabulary. Token 0 is left free for end-of-answer.
    pub fn pattern_tokens(&self, p: u32) -> Vec<u32> {
        let len = self.pattern_len as u32;
        (0..len).map(|j| 1 + p * len + j).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.tokens_per_frame == 0 || self.pattern_len == 0 {
            return Err(Error::Spec("frames and patterns need tokens".into()));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Spec(format!("fps {} must be positive", self.fps)));
        }
        if self.vocab_size < 4 {
            return Err(Error::Spec("vocabulary too small".into()));
        }
        let half = (self.vocab_size / 2) as u32;
        let patterns = self.needles.iter().map(|n| n.pattern).chain(self.questions.iter().map(|q| q.pattern));
        for p in patterns {
            if self.pattern_tokens(p).last().is_some_and(|&t| t >= half) {
                return Err(Error::Spec(format!("pattern {p} does not fit below token {half}")));
            }
        }
        let mut needles = self.needles.clone();
        needles.sort_by_key(|n| n.start);
        for n in &needles {
            if n.start > n.end || n.end >= self.frames {
                return Err(Error::Spec(format!("needle {}..={} outside 0..{}", n.start, n.end, self.frames)));
            }
        }
        for w in needles.windows(2) {
            if w[1].start <= w[0].end {
                return Err(Error::Spec(format!(
                    "needles {}..={} and {}..={} overlap",
                    w[0].start, w[0].end, w[1].start, w[1].end
                )));
            }
        }
        for q in &self.questions {
            if q.admission_frame >= self.frames {
                return Err(Error::Spec(format!("question admitted at missing frame {}", q.admission_frame)));
            }
            if let Some(rel) = &q.relevant {
                if rel.iter().any(|&f| f > q.admission_frame) {
                    return Err(Error::Spec("relevant frame after the admission frame".into()));
                }
            }
        }
        Ok(())
    }
}

/// One frame line of a trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceFrame {
    pub frame_index: u64,
    pub tokens: Vec<u32>,
    /// Ids of questions this frame is relevant to.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
}

/// One question line of a trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceQuestion {
    pub question_id: u64,
    pub admission_frame: u64,
    pub tokens: Vec<u32>,
    #[serde(default)]
    pub relevant: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum TraceRecord {
    Frame(TraceFrame),
    Question(TraceQuestion),
}

/// A replayable stream with its questions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub frames: Vec<TraceFrame>,
    pub questions: Vec<TraceQuestion>,
}

impl Trace {
    pub fn parse(text: &str) -> Result<Self> {
        let mut trace = Trace::default();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord =
                serde_json::from_str(line).map_err(|e| Error::Parse(format!("trace line {}: {e}", n + 1)))?;
            match rec {
                TraceRecord::Frame(f) => {
                    if f.frame_index != trace.frames.len() as u64 {
                        return Err(Error::Parse(format!(
                            "trace line {}: frame {} out of order (expected {})",
                            n + 1,
                            f.frame_index,
                            trace.frames.len()
                        )));
                    }
                    trace.frames.push(f);
                }
                TraceRecord::Question(q) => trace.questions.push(q),
            }
        }
        Ok(trace)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        Self::parse(&text)
    }

    /// Frames first, then questions; one JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for f in &self.frames {
            let _ = writeln!(out, "{}", serde_json::to_string(f).expect("serializable"));
        }
        for q in &self.questions {
            let _ = writeln!(out, "{}", serde_json::to_string(q).expect("serializable"));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::storage(path, e))
    }

    pub fn timestamp(&self, frame: u64, fps: f64) -> f64 {
        self.frames
            .get(frame as usize)
            .and_then(|f| f.timestamp)
            .unwrap_or(frame as f64 / fps)
    }

    pub fn input_frames(&self, fps: f64) -> Vec<InputFrame> {
        self.frames
            .iter()
            .map(|f| InputFrame {
                tokens: f.tokens.clone(),
                timestamp: self.timestamp(f.frame_index, fps),
            })
            .collect()
    }

    /// Questions as serving requests, admitted at their frame's timestamp.
    pub fn requests(&self, fps: f64) -> Vec<QARequest> {
        self.questions
            .iter()
            .map(|q| QARequest {
                question_id: q.question_id,
                tokens: q.tokens.clone(),
                admission_timestamp: self.timestamp(q.admission_frame, fps),
                priority: 0,
                relevant: Some(q.relevant.clone()),
            })
            .collect()
    }

    pub fn all_tokens(&self) -> Vec<u32> {
        self.frames.iter().flat_map(|f| f.tokens.iter().copied()).collect()
    }
}

/// Builds the deterministic trace described by `spec`.
pub fn gen_trace(spec: &SyntheticTraceSpec) -> Result<Trace> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let half = (spec.vocab_size / 2) as u32;
    let vocab = spec.vocab_size as u32;
    let relevant: Vec<Vec<u64>> = spec
        .questions
        .iter()
        .map(|q| {
            q.relevant.clone().unwrap_or_else(|| {
                spec.needles
                    .iter()
                    .filter(|n| n.pattern == q.pattern)
                    .flat_map(|n| n.start..=n.end)
                    .filter(|&f| f <= q.admission_frame)
                    .collect()
            })
        })
        .collect();
    let frames = (0..spec.frames)
        .map(|i| {
            let needle = spec.needles.iter().find(|n| (n.start..=n.end).contains(&i));
            let tokens = match needle {
                Some(n) => spec
                    .pattern_tokens(n.pattern)
                    .into_iter()
                    .cycle()
                    .take(spec.tokens_per_frame)
                    .collect(),
                None => (0..spec.tokens_per_frame).map(|_| rng.random_range(half..vocab)).collect(),
            };
            let labels = relevant
                .iter()
                .enumerate()
                .filter(|(_, r)| r.contains(&i))
                .map(|(q, _)| q as u64)
                .collect();
            TraceFrame {
                frame_index: i,
                tokens,
                labels,
                timestamp: Some(i as f64 / spec.fps),
            }
        })
        .collect();
    let questions = spec
        .questions
        .iter()
        .zip(relevant)
        .enumerate()
        .map(|(id, (q, rel))| TraceQuestion {
            question_id: id as u64,
            admission_frame: q.admission_frame,
            tokens: spec.pattern_tokens(q.pattern),
            relevant: rel,
        })
        .collect();
    Ok(Trace { frames, questions })
}

/// Expected recall of uniform sampling when a needle of `span` frames is
/// placed uniformly at random among `total` frames.
pub fn uniform_expected_recall(total: u64, span: u64, r: usize) -> Result<f64> {
    if span == 0 || span > total {
        return Err(Error::UndefinedMetric(format!("needle span {span} in {total} frames")));
    }
    let placements = total - span + 1;
    let hits: u64 = retrieval::uniform_sample(total, r)
        .into_iter()
        .map(|s| {
            let lo = (s + 1).saturating_sub(span);
            let hi = s.min(total - span);
            if hi >= lo {
                hi - lo + 1
            } else {
                0
            }
        })
        .sum();
    Ok(hits as f64 / (span * placements) as f64)
}

/// A trace encoded into a store, with both retrieval indexes filled.
pub struct Encoded {
    pub model: Arc<ToyModel>,
    pub store: KvStore,
    pub internal: InternalIndex,
    pub external: ExternalIndex,
    pub frames: Vec<Arc<FrameKv>>,
}

impl Encoded {
    pub fn sources<'a>(&'a self, snapshot: &'a crate::store::StoreSnapshot, relevant: Option<&'a [u64]>) -> Sources<'a> {
        Sources {
            snapshot,
            internal: Some(&self.internal),
            external: Some(&self.external),
            relevant,
        }
    }
}

/// Store settings for `config`, spilling to `disk_dir` when given.
pub fn store_config(config: &RunConfig, disk_dir: Option<&Path>) -> StoreConfig {
    let base = StoreConfig::for_model(&config.model, config.sink_frames);
    match disk_dir {
        Some(d) => base.with_disk(d, config.ram_budget_bytes),
        None => base,
    }
}

/// Encodes every frame of `trace` with a model built from `config`.
pub fn encode_trace(trace: &Trace, config: &RunConfig, disk_dir: Option<&Path>) -> Result<Encoded> {
    config.validate()?;
    let model = Arc::new(init_model(&config.model, config.seed)?);
    encode_with(model, trace, config, disk_dir)
}

pub fn encode_with(model: Arc<ToyModel>, trace: &Trace, config: &RunConfig, disk_dir: Option<&Path>) -> Result<Encoded> {
    let (writer, store) = KvStore::create(store_config(config, disk_dir))?;
    let internal = InternalIndex::new(&model, config.retrieval.key_pooling);
    let embedder = BagOfTokensEmbedder::new(config.model.vocab_size, config.retrieval.embed_dim, config.seed)?;
    let external = ExternalIndex::new(Arc::new(embedder));
    let mut enc = StreamEncoder::new(model.clone(), writer, config.sink_frames)?;
    enc.add_observer(Box::new(internal.clone()));
    enc.add_observer(Box::new(external.clone()));
    let frames = enc.encode_all(trace.input_frames(config.fps))?;
    enc.finish()?;
    Ok(Encoded {
        model,
        store,
        internal,
        external,
        frames,
    })
}

/// Axes of a retrieval sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub r: Vec<usize>,
    pub b: Vec<usize>,
    pub modes: Vec<RetrievalMode>,
}

impl Sweep {
    fn points(&self) -> Vec<(RetrievalMode, usize, usize)> {
        let mut out = Vec::new();
        for &m in &self.modes {
            for &r in &self.r {
                for &b in &self.b {
                    out.push((m, r, b));
                }
            }
        }
        out
    }
}

/// One question at one sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: RetrievalMode,
    pub r: usize,
    pub b: usize,
    pub question_id: u64,
    pub admission_frame: u64,
    /// Mean over layers on the internal path; absent without labels.
    pub recall: Option<f64>,
    /// Largest number of blocks any layer retrieved.
    pub blocks: usize,
    /// Retrieved frames per layer (one entry outside the internal path).
    pub retrieved: Vec<Vec<u64>>,
    pub attention_ops: u64,
    pub answer: Vec<u32>,
    pub latency_us: StageLatency,
}

/// Aggregates of one sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub mode: RetrievalMode,
    pub r: usize,
    pub b: usize,
    pub questions: usize,
    pub mean_recall: Option<f64>,
    pub mean_latency_us: f64,
    pub mean_attention_ops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: RunConfig,
    pub sweep: Sweep,
    pub frames: u64,
    pub rows: Vec<BenchRow>,
    pub summary: Vec<BenchSummary>,
    pub peak_bytes: TierBytes,
    pub store: StoreStats,
}

impl BenchReport {
    /// Recomputes the aggregates from the rows.
    pub fn summarize(rows: &[BenchRow], sweep: &Sweep) -> Vec<BenchSummary> {
        sweep
            .points()
            .into_iter()
            .map(|(mode, r, b)| {
                let sel: Vec<&BenchRow> = rows.iter().filter(|x| x.mode == mode && x.r == r && x.b == b).collect();
                let n = sel.len();
                let recalls: Vec<f64> = sel.iter().filter_map(|x| x.recall).collect();
                let mean = |v: f64| if n == 0 { 0.0 } else { v / n as f64 };
                BenchSummary {
                    mode,
                    r,
                    b,
                    questions: n,
                    mean_recall: (!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64),
                    mean_latency_us: mean(sel.iter().map(|x| x.latency_us.total_us() as f64).sum()),
                    mean_attention_ops: mean(sel.iter().map(|x| x.attention_ops as f64).sum()),
                }
            })
            .collect()
    }

    /// Rows with timing fields cleared; equal across runs on equal inputs.
    pub fn without_timings(&self) -> Vec<BenchRow> {
        self.rows
            .iter()
            .map(|r| BenchRow {
                latency_us: StageLatency::default(),
                ..r.clone()
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(out, "{}", serde_json::json!({ "record": "row", "row": r }));
        }
        for s in &self.summary {
            let _ = writeln!(out, "{}", serde_json::json!({ "record": "summary", "summary": s }));
        }
        let footer = serde_json::json!({
            "record": "store",
            "frames": self.frames,
            "peak_bytes": self.peak_bytes,
            "offloaded_bytes": self.store.offloaded_bytes,
        });
        let _ = writeln!(out, "{footer}");
        out
    }

    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10}{:>6}{:>6}{:>6}{:>10}{:>14}{:>14}",
            "mode", "r", "b", "n", "recall", "latency_us", "attn_ops"
        );
        for s in &self.summary {
            let recall = s.mean_recall.map_or("-".to_string(), |r| format!("{r:.3}"));
            let _ = writeln!(
                out,
                "{:<10}{:>6}{:>6}{:>6}{:>10}{:>14.0}{:>14.0}",
                s.mode.to_string(),
                s.r,
                s.b,
                s.questions,
                recall,
                s.mean_latency_us,
                s.mean_attention_ops
            );
        }
        let _ = writeln!(
            out,
            "frames {}  peak bytes hot/ram/disk {}/{}/{}",
            self.frames, self.peak_bytes.hot, self.peak_bytes.ram, self.peak_bytes.disk
        );
        out
    }
}

/// Answers every trace question at every sweep point.
pub fn run_bench(trace: &Trace, config: &RunConfig, sweep: &Sweep) -> Result<BenchReport> {
    let encoded = encode_trace(trace, config, None)?;
    bench_encoded(&encoded, trace, config, sweep)
}

/// [`run_bench`] over an already encoded trace.
pub fn bench_encoded(encoded: &Encoded, trace: &Trace, config: &RunConfig, sweep: &Sweep) -> Result<BenchReport> {
    if sweep.b.contains(&0) {
        return Err(Error::Config("block size must be at least 1".into()));
    }
    let points = sweep.points();
    let per_point: Vec<Result<Vec<BenchRow>>> = par::map_slice(&points, |&(mode, r, b)| {
        let options = QaOptions {
            mode,
            r,
            b,
            ..QaOptions::from_config(config)
        };
        trace
            .questions
            .iter()
            .map(|q| bench_question(encoded, q, &options))
            .collect()
    });
    let mut rows = Vec::new();
    for p in per_point {
        rows.extend(p?);
    }
    let stats = encoded.store.stats();
    info!(points = points.len(), rows = rows.len(), "bench finished");
    Ok(BenchReport {
        summary: BenchReport::summarize(&rows, sweep),
        config: config.clone(),
        sweep: sweep.clone(),
        frames: encoded.store.len(),
        rows,
        peak_bytes: stats.peak,
        store: stats,
    })
}

fn bench_question(encoded: &Encoded, q: &TraceQuestion, options: &QaOptions) -> Result<BenchRow> {
    let snapshot = encoded.store.snapshot_at(Some(q.admission_frame))?;
    let sources = encoded.sources(&snapshot, Some(&q.relevant));
    let result = answer_question(&encoded.model, sources, q.question_id, &q.tokens, options)?;
    let recall = if q.relevant.is_empty() {
        None
    } else {
        Some(retrieval::mean_recall(&result.retrieved, &q.relevant)?)
    };
    let blocks = result
        .retrieved
        .iter()
        .map(|r| r.frame_indices.iter().map(|f| f / options.b as u64).collect::<BTreeSet<_>>().len())
        .max()
        .unwrap_or(0);
    Ok(BenchRow {
        mode: options.mode,
        r: options.r,
        b: options.b,
        question_id: q.question_id,
        admission_frame: q.admission_frame,
        recall,
        blocks,
        retrieved: result.retrieved.iter().map(|r| r.frame_indices.clone()).collect(),
        attention_ops: result.attention_ops,
        answer: result.answer,
        latency_us: result.latency,
    })
}

/// Outcome of one verification check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub max_deviation: Option<f64>,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    /// True when every check passed (vacuously for an empty trace).
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &str, passed: bool, max_deviation: Option<f64>, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            max_deviation,
            detail: detail.into(),
        });
    }

    pub fn to_jsonl(&self) -> String {
        self.checks
            .iter()
            .map(|c| serde_json::to_string(c).expect("serializable") + "\n")
            .collect()
    }

    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let dev = c.max_deviation.map_or("-".to_string(), |d| format!("{d:.3e}"));
            let _ = writeln!(
                out,
                "{:<6}{:<28}{:>12}  {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                dev,
                c.detail
            );
        }
        let _ = writeln!(out, "{}", if self.passed() { "all checks passed" } else { "verification FAILED" });
        out
    }
}

/// Verification knobs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyOptions {
    /// Flip one byte of this frame's block file before reloading it.
    pub corrupt_frame: Option<u64>,
}

/// Deviation tolerated between streamed and dense encodings.
pub const ENCODE_TOLERANCE: f64 = 1e-5;

/// Streamed vs dense encoding, chunking invariance, total-retrieval answers
/// vs the dense oracle, and a disk round trip of the store.
pub fn verify_oracle(trace: &Trace, config: &RunConfig, options: &VerifyOptions) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    if trace.frames.is_empty() {
        return Ok(report);
    }
    config.validate()?;
    let cfg = &config.model;
    let tokens = trace.all_tokens();
    let model = Arc::new(init_model(cfg, config.seed)?);
    let encoded = encode_with(model.clone(), trace, config, None)?;

    // streamed vs dense
    if tokens.len() > cfg.local_window {
        report.push(
            "streamed_vs_dense",
            false,
            None,
            format!("{} tokens exceed the {}-token window", tokens.len(), cfg.local_window),
        );
    } else {
        let dense = model.forward_dense(&tokens)?;
        let mut dev = 0.0f64;
        for f in &encoded.frames {
            let rows = f.encode_positions();
            let rows = rows.start as usize..rows.end as usize;
            for (l, kv) in f.layers.iter().enumerate() {
                let want_k = dense.layer_kv[l].keys.slice_rows(rows.clone());
                let want_v = dense.layer_kv[l].values.slice_rows(rows.clone());
                dev = dev
                    .max(f64::from(kv.keys.max_abs_diff(&want_k).unwrap_or(f32::INFINITY)))
                    .max(f64::from(kv.values.max_abs_diff(&want_v).unwrap_or(f32::INFINITY)));
            }
        }
        report.push("streamed_vs_dense", dev < ENCODE_TOLERANCE, Some(dev), "stored KV vs dense causal pass");
    }

    // chunking invariance
    let reference: Vec<Vec<u32>> = encoded.frames.iter().map(|f| f.bits()).collect();
    let mut same = true;
    for chunk in [1, cfg.tokens_per_frame, cfg.chunk_size] {
        let (writer, _) = KvStore::create(store_config(config, None))?;
        let mut enc = StreamEncoder::new(model.clone(), writer, config.sink_frames)?.with_chunk_size(chunk)?;
        let bits: Vec<Vec<u32>> = enc
            .encode_chunk(&trace.input_frames(config.fps))?
            .iter()
            .map(|f| f.bits())
            .collect();
        same &= bits == reference;
    }
    report.push("chunking_invariance", same, None, "chunk sizes 1, M and l_X");

    // total retrieval vs oracle
    if tokens.len() <= cfg.local_window {
        let options = QaOptions {
            mode: RetrievalMode::All,
            ..QaOptions::from_config(config)
        };
        let mut mismatched = Vec::new();
        let questions: Vec<TraceQuestion> = if trace.questions.is_empty() {
            vec![TraceQuestion {
                question_id: 0,
                admission_frame: trace.frames.len() as u64 - 1,
                tokens: trace.frames[0].tokens.iter().take(4).copied().collect(),
                relevant: Vec::new(),
            }]
        } else {
            trace.questions.clone()
        };
        for q in &questions {
            let snapshot = encoded.store.snapshot_at(Some(q.admission_frame))?;
            let got = answer_question(&model, encoded.sources(&snapshot, None), q.question_id, &q.tokens, &options)?;
            let video: Vec<u32> = trace.frames[..=q.admission_frame as usize]
                .iter()
                .flat_map(|f| f.tokens.iter().copied())
                .collect();
            let want = oracle_answer(
                &model,
                &video,
                &q.tokens,
                options.max_new_tokens,
                options.eos,
                config.oracle_max_tokens,
            )?;
            if got.answer != want.answer {
                mismatched.push(q.question_id);
            }
        }
        report.push(
            "total_retrieval_vs_oracle",
            mismatched.is_empty(),
            None,
            if mismatched.is_empty() {
                format!("{} questions identical", questions.len())
            } else {
                format!("answers differ for questions {mismatched:?}")
            },
        );
    }

    // store round trip through disk
    let dir = tempfile::tempdir().map_err(|e| Error::storage(std::env::temp_dir(), e))?;
    let (mut writer, _) = KvStore::create(store_config(config, Some(dir.path())))?;
    for f in &encoded.frames {
        writer.append(f.clone())?;
    }
    writer.persist_all()?;
    if let Some(victim) = options.corrupt_frame {
        corrupt_block(dir.path(), victim)?;
    }
    report.checks.push(round_trip_check(dir.path(), &encoded.frames));
    Ok(report)
}

/// Flips one byte in the middle of `frame`'s block file.
pub fn corrupt_block(dir: &Path, frame: u64) -> Result<()> {
    let path = dir.join(crate::store::frame_file_name(frame));
    let mut bytes = std::fs::read(&path).map_err(|e| Error::storage(&path, e))?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x5a;
    std::fs::write(&path, bytes).map_err(|e| Error::storage(&path, e))
}

/// Reopens the store in `dir` and compares every frame bit for bit with
/// `expected`. The detail names the first frame that fails.
pub fn round_trip_check(dir: &Path, expected: &[Arc<FrameKv>]) -> Check {
    let outcome = (|| -> Result<Option<u64>> {
        let store = KvStore::open_dir(dir)?;
        let snap = store.snapshot();
        for f in expected {
            let back = snap.load_one(f.frame_index)?;
            if back.bits() != f.bits() || back.timestamp.to_bits() != f.timestamp.to_bits() {
                return Ok(Some(f.frame_index));
            }
        }
        Ok(None)
    })();
    let (passed, detail) = match outcome {
        Ok(None) => (true, format!("{} frames identical after reload", expected.len())),
        Ok(Some(frame)) => (false, format!("frame {frame} differs after reload")),
        Err(e) => (false, e.to_string()),
    };
    Check {
        name: "store_round_trip".into(),
        passed,
        max_deviation: None,
        detail,
    }
}

#[cfg(test)]
mod tests;
