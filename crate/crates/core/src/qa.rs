//! Question answering over retrieved KV.
//!
//! Each layer's context is the retrieved frames' keys and values, in
//! ascending frame order, with keys re-rotated to their context positions.
//! The question is prefilled over that context layer by layer, then the
//! answer is decoded greedily. On the internal path, retrieval for layer
//! `ℓ` uses the question's queries at `ℓ`, which depend on the context
//! already chosen for the layers below.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{KeyPooling, PositionPolicy, RetrievalMode, RunConfig};
use crate::error::{Error, Result};
use crate::model::{LayerKv, ToyModel};
use crate::retrieval::{self, ExternalIndex, InternalIndex, RetrievalResult};
use crate::store::{FrameKv, StoreSnapshot};
use crate::tensor::{self, KeyRange, Matrix};

/// Assigns positions to retrieved video tokens and the question.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PositionAssigner {
    pub policy: PositionPolicy,
}

impl PositionAssigner {
    /// Positions of `n` video tokens and the position of the first question
    /// token.
    pub fn assign(&self, n: usize) -> (Vec<u64>, u64) {
        match self.policy {
            PositionPolicy::Consecutive => ((0..n as u64).collect(), n as u64),
            PositionPolicy::Static => (vec![0; n], u64::from(n > 0)),
        }
    }
}

/// Position assigner for a policy name (`consecutive` or `static`).
pub fn positional_policy(mode: &str) -> Result<PositionAssigner> {
    Ok(PositionAssigner { policy: mode.parse()? })
}

/// Retrieved video context of one layer.
#[derive(Clone, Debug)]
pub struct ContextLayer {
    /// Retrieved frames, ascending.
    pub frames: Vec<u64>,
    /// Keys rotated at `positions`, values as stored.
    pub kv: LayerKv,
    pub positions: Vec<u64>,
    /// Position of the first question token.
    pub question_start: u64,
}

/// Per-layer video context for one question.
#[derive(Clone, Debug, Default)]
pub struct QAContext {
    pub layers: Vec<ContextLayer>,
}

/// Wall time of each answering stage, in microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLatency {
    pub retrieve_us: u64,
    pub load_us: u64,
    pub prefill_us: u64,
    pub decode_us: u64,
}

impl StageLatency {
    pub fn total_us(&self) -> u64 {
        self.retrieve_us + self.load_us + self.prefill_us + self.decode_us
    }
}

/// Outcome of answering one question.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QAResult {
    pub question_id: u64,
    pub answer: Vec<u32>,
    pub latency: StageLatency,
    pub tokens_generated: usize,
    /// One entry per layer on the internal path, otherwise a single entry.
    pub retrieved: Vec<RetrievalResult>,
    /// Query-key pairs scored by attention, summed over heads.
    pub attention_ops: u64,
    /// Video tokens in each layer's context.
    pub context_tokens: Vec<usize>,
}

/// One line of an answers report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question_id: u64,
    pub admission_frame: Option<u64>,
    pub retrieved: Vec<Vec<u64>>,
    pub answer: Vec<u32>,
    pub latency_us: StageLatency,
}

impl AnswerRecord {
    pub fn new(result: &QAResult, admission_frame: Option<u64>) -> Self {
        Self {
            question_id: result.question_id,
            admission_frame,
            retrieved: result.retrieved.iter().map(|r| r.frame_indices.clone()).collect(),
            answer: result.answer.clone(),
            latency_us: result.latency,
        }
    }
}

fn micros(t: Instant) -> u64 {
    t.elapsed().as_micros() as u64
}

/// Re-rotates the keys of `frames` at `layer` from their encode positions to
/// the context positions given by `assigner`.
pub fn context_layer(
    model: &ToyModel,
    layer: usize,
    frames: &[Arc<FrameKv>],
    assigner: PositionAssigner,
) -> Result<ContextLayer> {
    let width = model.width();
    let mut kv = LayerKv::empty(width);
    let mut encoded = Vec::new();
    for w in frames.windows(2) {
        if w[0].frame_index >= w[1].frame_index {
            return Err(Error::Shape("context frames must be strictly ascending".into()));
        }
    }
    for f in frames {
        let lkv = f
            .layers
            .get(layer)
            .ok_or_else(|| Error::Shape(format!("frame {} has no layer {layer}", f.frame_index)))?;
        kv.append(lkv)?;
        encoded.extend(f.encode_positions());
    }
    let (positions, question_start) = assigner.assign(kv.len());
    let delta: Vec<f64> = positions
        .iter()
        .zip(&encoded)
        .map(|(&p, &e)| p as f64 - e as f64)
        .collect();
    model.rope().rotate_rows(&mut kv.keys, &delta)?;
    Ok(ContextLayer {
        frames: frames.iter().map(|f| f.frame_index).collect(),
        kv,
        positions,
        question_start,
    })
}

/// Frames loaded by one QA session, shared across layers.
#[derive(Default)]
struct FrameCache {
    frames: HashMap<u64, Arc<FrameKv>>,
}

impl FrameCache {
    fn get(&mut self, snapshot: &StoreSnapshot, indices: &[u64]) -> Result<Vec<Arc<FrameKv>>> {
        let missing: Vec<u64> = indices
            .iter()
            .copied()
            .filter(|i| !self.frames.contains_key(i))
            .collect();
        for f in snapshot.load(&missing)? {
            self.frames.insert(f.frame_index, f);
        }
        Ok(indices.iter().map(|i| self.frames[i].clone()).collect())
    }
}

/// Loads the selected frames and builds every layer's context. A single
/// selection is shared by all layers; otherwise there must be one per layer.
pub fn build_context(
    snapshot: &StoreSnapshot,
    selections: &[RetrievalResult],
    model: &ToyModel,
    assigner: PositionAssigner,
) -> Result<QAContext> {
    let layers = model.num_layers();
    if selections.len() != 1 && selections.len() != layers {
        return Err(Error::Shape(format!(
            "{} selections for a {layers}-layer model",
            selections.len()
        )));
    }
    let mut cache = FrameCache::default();
    let layers = (0..layers)
        .map(|l| {
            let sel = &selections[l.min(selections.len() - 1)];
            let frames = cache.get(snapshot, &sel.frame_indices)?;
            context_layer(model, l, &frames, assigner)
        })
        .collect::<Result<_>>()?;
    Ok(QAContext { layers })
}

/// Decoding state: every layer's keys/values so far and its next position.
struct Decoder<'m> {
    model: &'m ToyModel,
    kv: Vec<LayerKv>,
    next_position: Vec<u64>,
    ops: u64,
}

impl<'m> Decoder<'m> {
    /// Runs one token through every layer and returns its final hidden row.
    fn feed(&mut self, token: u32) -> Result<Vec<f32>> {
        let model = self.model;
        let heads = model.config().num_heads;
        let mut hidden = model.embed_tokens(&[token])?;
        for layer in 0..model.num_layers() {
            let mut p = model.project(layer, &hidden)?;
            let pos = [self.next_position[layer]];
            model.rotate_at(&mut p.q, &pos)?;
            model.rotate_at(&mut p.k, &pos)?;
            let kv = &mut self.kv[layer];
            kv.append(&LayerKv { keys: p.k, values: p.v })?;
            let mask = [KeyRange::new(0, kv.len())];
            let attn = tensor::multi_head_attention(&p.q, &kv.keys, &kv.values, heads, &mask)?;
            self.ops += (kv.len() * heads) as u64;
            model.finish_layer(layer, &mut hidden, &attn)?;
            self.next_position[layer] += 1;
        }
        Ok(hidden.row(0).to_vec())
    }
}

fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding from the hidden row of the last prefilled token.
fn decode(
    decoder: &mut Decoder<'_>,
    last_hidden: Vec<f32>,
    max_new_tokens: usize,
    eos: Option<u32>,
) -> Result<Vec<u32>> {
    let mut answer = Vec::new();
    let mut hidden = last_hidden;
    for step in 0..max_new_tokens {
        let token = argmax(&decoder.model.logits(&hidden)?);
        if eos == Some(token) {
            break;
        }
        answer.push(token);
        if step + 1 < max_new_tokens {
            hidden = decoder.feed(token)?;
        }
    }
    Ok(answer)
}

/// Prefills `question` layer by layer. `context_for(layer, raw_queries)`
/// supplies each layer's video context just before that layer attends.
fn prefill<'m, F>(model: &'m ToyModel, question: &[u32], mut context_for: F) -> Result<(Decoder<'m>, Vec<f32>, Vec<usize>)>
where
    F: FnMut(usize, &Matrix) -> Result<ContextLayer>,
{
    if question.is_empty() {
        return Err(Error::Degenerate("question has no tokens".into()));
    }
    let heads = model.config().num_heads;
    let n = question.len();
    let mut hidden = model.embed_tokens(question)?;
    let mut decoder = Decoder {
        model,
        kv: Vec::with_capacity(model.num_layers()),
        next_position: Vec::with_capacity(model.num_layers()),
        ops: 0,
    };
    let mut context_tokens = Vec::with_capacity(model.num_layers());
    for layer in 0..model.num_layers() {
        let mut p = model.project(layer, &hidden)?;
        let ctx = context_for(layer, &p.q)?;
        if ctx.kv.keys.cols() != model.width() {
            return Err(Error::Shape(format!(
                "context width {} for model width {}",
                ctx.kv.keys.cols(),
                model.width()
            )));
        }
        let positions: Vec<u64> = (0..n as u64).map(|i| ctx.question_start + i).collect();
        model.rotate_at(&mut p.q, &positions)?;
        model.rotate_at(&mut p.k, &positions)?;
        let c = ctx.kv.len();
        let mut kv = ctx.kv;
        kv.append(&LayerKv { keys: p.k, values: p.v })?;
        let mask = KeyRange::causal(n, c);
        decoder.ops += mask.iter().map(|m| (m.end - m.start) as u64).sum::<u64>() * heads as u64;
        let attn = tensor::multi_head_attention(&p.q, &kv.keys, &kv.values, heads, &mask)?;
        model.finish_layer(layer, &mut hidden, &attn)?;
        decoder.kv.push(kv);
        decoder.next_position.push(ctx.question_start + n as u64);
        context_tokens.push(c);
    }
    let last = hidden.row(n - 1).to_vec();
    Ok((decoder, last, context_tokens))
}

/// Prefills `question` over a prebuilt context and decodes up to
/// `max_new_tokens` tokens, stopping early at `eos`.
pub fn answer(
    model: &ToyModel,
    context: QAContext,
    question: &[u32],
    max_new_tokens: usize,
    eos: Option<u32>,
) -> Result<QAResult> {
    if context.layers.len() != model.num_layers() {
        return Err(Error::Shape(format!(
            "context has {} layers, model has {}",
            context.layers.len(),
            model.num_layers()
        )));
    }
    let retrieved = context
        .layers
        .iter()
        .enumerate()
        .map(|(l, c)| RetrievalResult {
            layer: Some(l),
            frame_indices: c.frames.clone(),
            scores: vec![0.0; c.frames.len()],
            ..RetrievalResult::default()
        })
        .collect();
    let mut layers = context.layers.into_iter();
    let t = Instant::now();
    let (mut decoder, last, context_tokens) =
        prefill(model, question, |_, _| Ok(layers.next().expect("one context per layer")))?;
    let prefill_us = micros(t);
    let t = Instant::now();
    let answer = decode(&mut decoder, last, max_new_tokens, eos)?;
    Ok(QAResult {
        question_id: 0,
        tokens_generated: answer.len(),
        answer,
        latency: StageLatency {
            prefill_us,
            decode_us: micros(t),
            ..StageLatency::default()
        },
        retrieved,
        attention_ops: decoder.ops,
        context_tokens,
    })
}

/// Output-head scores for the last question token after prefill over
/// `context`.
pub fn prefill_logits(model: &ToyModel, context: QAContext, question: &[u32]) -> Result<Vec<f32>> {
    if context.layers.len() != model.num_layers() {
        return Err(Error::Shape(format!(
            "context has {} layers, model has {}",
            context.layers.len(),
            model.num_layers()
        )));
    }
    let mut layers = context.layers.into_iter();
    let (_, last, _) = prefill(model, question, |_, _| Ok(layers.next().expect("one context per layer")))?;
    model.logits(&last)
}

/// Dense full-attention reference: encodes `[video ‖ question]` in one
/// causal pass, then decodes greedily.
pub fn oracle_answer(
    model: &ToyModel,
    video_tokens: &[u32],
    question: &[u32],
    max_new_tokens: usize,
    eos: Option<u32>,
    max_tokens: usize,
) -> Result<QAResult> {
    let total = video_tokens.len() + question.len();
    if total > max_tokens {
        return Err(Error::Capacity {
            tokens: total,
            limit: max_tokens,
        });
    }
    if total == 0 {
        return Err(Error::Degenerate("nothing to condition on".into()));
    }
    let tokens: Vec<u32> = video_tokens.iter().chain(question).copied().collect();
    let t = Instant::now();
    let dense = model.forward_dense(&tokens)?;
    let prefill_us = micros(t);
    let last = dense.final_hidden().expect("at least one layer").row(total - 1).to_vec();
    let heads = model.config().num_heads as u64;
    let n = total as u64;
    let mut decoder = Decoder {
        model,
        kv: dense.layer_kv,
        next_position: vec![n; model.num_layers()],
        ops: n * (n + 1) / 2 * heads * model.num_layers() as u64,
    };
    let t = Instant::now();
    let answer = decode(&mut decoder, last, max_new_tokens, eos)?;
    Ok(QAResult {
        question_id: 0,
        tokens_generated: answer.len(),
        answer,
        latency: StageLatency {
            prefill_us,
            decode_us: micros(t),
            ..StageLatency::default()
        },
        retrieved: Vec::new(),
        attention_ops: decoder.ops,
        context_tokens: vec![video_tokens.len(); model.num_layers()],
    })
}

/// How a question picks its frames and is decoded.
#[derive(Clone, Debug, PartialEq)]
pub struct QaOptions {
    pub mode: RetrievalMode,
    pub r: usize,
    pub b: usize,
    pub tau: f32,
    pub position_policy: PositionPolicy,
    pub max_new_tokens: usize,
    pub eos: Option<u32>,
}

impl QaOptions {
    pub fn from_config(config: &RunConfig) -> Self {
        Self {
            mode: config.retrieval.mode,
            r: config.retrieval.r,
            b: config.retrieval.b,
            tau: config.retrieval.tau,
            position_policy: config.retrieval.position_policy,
            max_new_tokens: config.max_new_tokens,
            eos: config.model.eos_token,
        }
    }
}

/// Where frames come from for one question.
#[derive(Clone, Copy)]
pub struct Sources<'a> {
    pub snapshot: &'a StoreSnapshot,
    pub internal: Option<&'a InternalIndex>,
    pub external: Option<&'a ExternalIndex>,
    /// Labelled relevant frames, for oracle mode.
    pub relevant: Option<&'a [u64]>,
}

impl<'a> Sources<'a> {
    pub fn new(snapshot: &'a StoreSnapshot) -> Self {
        Self {
            snapshot,
            internal: None,
            external: None,
            relevant: None,
        }
    }
}

/// Selects frames for `question` under `options.mode`, loads their KV and
/// answers. Never mutates the store.
pub fn answer_question(
    model: &ToyModel,
    sources: Sources<'_>,
    question_id: u64,
    question: &[u32],
    options: &QaOptions,
) -> Result<QAResult> {
    let assigner = PositionAssigner {
        policy: options.position_policy,
    };
    let snapshot = sources.snapshot;
    let mut result = if options.mode == RetrievalMode::Internal {
        answer_internal(model, sources, question, options, assigner)?
    } else {
        let t = Instant::now();
        let selection = fixed_selection(sources, question, options)?;
        let retrieve_us = micros(t);
        let t = Instant::now();
        let context = build_context(snapshot, std::slice::from_ref(&selection), model, assigner)?;
        let load_us = micros(t);
        let mut r = answer(model, context, question, options.max_new_tokens, options.eos)?;
        r.latency.retrieve_us = retrieve_us;
        r.latency.load_us = load_us;
        r.retrieved = vec![selection];
        r
    };
    result.question_id = question_id;
    Ok(result)
}

fn fixed_selection(sources: Sources<'_>, question: &[u32], o: &QaOptions) -> Result<RetrievalResult> {
    let snapshot = sources.snapshot;
    let total = snapshot.len();
    Ok(match o.mode {
        RetrievalMode::External => {
            let index = sources
                .external
                .ok_or_else(|| Error::Config("external mode needs an embedding index".into()))?;
            retrieval::retrieve_external(index, snapshot.max_frame(), question, o.r, o.b, o.tau)?
        }
        RetrievalMode::Uniform => RetrievalResult::unscored(retrieval::uniform_sample(total, o.r), o.r, o.b),
        RetrievalMode::Oracle => {
            let relevant = sources
                .relevant
                .ok_or_else(|| Error::Config("oracle mode needs relevance labels".into()))?;
            let mut frames: Vec<u64> = relevant.iter().copied().filter(|&f| f < total).collect();
            frames.sort_unstable();
            frames.dedup();
            RetrievalResult::unscored(frames, o.r, o.b)
        }
        RetrievalMode::All => RetrievalResult::unscored((0..total).collect(), o.r, o.b),
        RetrievalMode::Internal => unreachable!("internal retrieval is interleaved with prefill"),
    })
}

fn answer_internal(
    model: &ToyModel,
    sources: Sources<'_>,
    question: &[u32],
    o: &QaOptions,
    assigner: PositionAssigner,
) -> Result<QAResult> {
    let index = sources
        .internal
        .ok_or_else(|| Error::Config("internal mode needs a frame-vector index".into()))?;
    let snapshot = sources.snapshot;
    let stream_end = snapshot.len() * model.config().tokens_per_frame as u64;
    let mut cache = FrameCache::default();
    let mut retrieved = Vec::with_capacity(model.num_layers());
    let mut latency = StageLatency::default();
    let t_all = Instant::now();
    let (mut decoder, last, context_tokens) = prefill(model, question, |layer, queries| {
        let t = Instant::now();
        let start = match index.pooling() {
            KeyPooling::PreRope => 0,
            KeyPooling::PostRope => stream_end,
        };
        let qvec = retrieval::question_vector_internal(queries, layer, index.pooling(), model.rope(), start)?;
        let sel = index.retrieve(snapshot, &qvec, layer, o.r, o.b)?;
        latency.retrieve_us += micros(t);
        let t = Instant::now();
        let frames = cache.get(snapshot, &sel.frame_indices)?;
        let ctx = context_layer(model, layer, &frames, assigner)?;
        latency.load_us += micros(t);
        retrieved.push(sel);
        Ok(ctx)
    })?;
    latency.prefill_us = micros(t_all).saturating_sub(latency.retrieve_us + latency.load_us);
    let t = Instant::now();
    let answer = decode(&mut decoder, last, o.max_new_tokens, o.eos)?;
    latency.decode_us = micros(t);
    Ok(QAResult {
        question_id: 0,
        tokens_generated: answer.len(),
        answer,
        latency,
        retrieved,
        attention_ops: decoder.ops,
        context_tokens,
    })
}
