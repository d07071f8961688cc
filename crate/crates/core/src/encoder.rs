//! Sliding-window streaming encoder.
//!
//! Token `t` attends to the keys at positions `(t - l_L, t]` plus the
//! attention-sink tokens (the first `sink_frames · M` positions). Sink keys
//! that have fallen out of the window are scored as if they sat exactly
//! `l_L` positions behind the query. Because the visible key set depends
//! only on `t`, chunk boundaries never change the result.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{LayerKv, Projections, ToyModel};
use crate::par;
use crate::store::{FrameKv, KvStore, StoreWriter};
use crate::tensor::{attend_row, KeySegment, Matrix, QuerySlot};

/// One frame of input tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct InputFrame {
    pub tokens: Vec<u32>,
    pub timestamp: f64,
}

/// Receives each frame just before it becomes visible to store readers.
pub trait FrameObserver: Send {
    fn on_frame(&mut self, frame: &Arc<FrameKv>, tokens: &[u32]) -> Result<()>;
}

/// Progress counters of a stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StreamState {
    /// Tokens encoded so far (`l_P`).
    pub tokens_encoded: u64,
    /// Index the next completed frame will get.
    pub next_frame: u64,
}

struct LayerWindow {
    /// Position of the first row of `kv`.
    start: u64,
    kv: LayerKv,
    sink_raw_keys: Matrix,
    sink_values: Matrix,
}

pub struct StreamEncoder {
    model: Arc<ToyModel>,
    writer: StoreWriter,
    chunk_size: usize,
    sink_tokens: u64,
    state: StreamState,
    windows: Vec<LayerWindow>,
    pending: Vec<LayerKv>,
    pending_tokens: Vec<u32>,
    pending_timestamps: VecDeque<f64>,
    observers: Vec<Box<dyn FrameObserver>>,
    last_hidden: Option<Matrix>,
    probe: Option<Vec<Vec<usize>>>,
}

impl StreamEncoder {
    pub fn new(model: Arc<ToyModel>, writer: StoreWriter, sink_frames: usize) -> Result<Self> {
        let cfg = model.config().clone();
        let shape = writer.store().config().shape;
        if shape.layers != cfg.num_layers
            || shape.tokens != cfg.tokens_per_frame
            || shape.heads != cfg.num_heads
            || shape.head_dim != cfg.head_dim
        {
            return Err(Error::Config("store shape does not match model".into()));
        }
        let width = cfg.model_dim();
        let windows = (0..cfg.num_layers)
            .map(|_| LayerWindow {
                start: 0,
                kv: LayerKv::empty(width),
                sink_raw_keys: Matrix::empty(width),
                sink_values: Matrix::empty(width),
            })
            .collect();
        Ok(Self {
            chunk_size: cfg.chunk_size,
            sink_tokens: (sink_frames * cfg.tokens_per_frame) as u64,
            state: StreamState::default(),
            windows,
            pending: vec![LayerKv::empty(width); cfg.num_layers],
            pending_tokens: Vec::new(),
            pending_timestamps: VecDeque::new(),
            observers: Vec::new(),
            last_hidden: None,
            probe: None,
            model,
            writer,
        })
    }

    /// Overrides the chunk size (tokens per forward step).
    pub fn with_chunk_size(mut self, tokens: usize) -> Result<Self> {
        if tokens == 0 || tokens > self.config().local_window {
            return Err(Error::Config(format!(
                "chunk size {tokens} must be in 1..={}",
                self.config().local_window
            )));
        }
        self.chunk_size = tokens;
        Ok(self)
    }

    pub fn add_observer(&mut self, observer: Box<dyn FrameObserver>) {
        self.observers.push(observer);
    }

    /// Records per-layer attended-key counts for every token from now on.
    pub fn enable_probe(&mut self) {
        self.probe = Some(vec![Vec::new(); self.config().num_layers]);
    }

    /// Attended-key counts per layer, one entry per encoded token since
    /// [`enable_probe`](Self::enable_probe).
    pub fn probe(&self) -> Option<&[Vec<usize>]> {
        self.probe.as_deref()
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn state(&self) -> StreamState {
        self.state
    }

    pub fn store(&self) -> &KvStore {
        self.writer.store()
    }

    pub fn writer_mut(&mut self) -> &mut StoreWriter {
        &mut self.writer
    }

    /// Final-layer hidden states of the most recent forward step.
    pub fn last_hidden(&self) -> Option<&Matrix> {
        self.last_hidden.as_ref()
    }

    /// Tokens currently held in the attention window (excluding sinks that
    /// also sit inside it).
    pub fn window_tokens(&self) -> usize {
        self.windows.first().map_or(0, |w| w.kv.len())
    }

    pub fn sink_tokens_held(&self) -> usize {
        self.windows.first().map_or(0, |w| w.sink_raw_keys.rows())
    }

    /// Positions for the next `n` tokens: `l_P .. l_P + n`.
    pub fn assign_positions(&self, n: usize) -> Vec<u64> {
        let start = self.state.tokens_encoded;
        (start..start + n as u64).collect()
    }

    /// Encodes whole frames, splitting them into chunks of at most the
    /// configured chunk size, and returns the frames appended to the store.
    pub fn encode_chunk(&mut self, frames: &[InputFrame]) -> Result<Vec<Arc<FrameKv>>> {
        let m = self.config().tokens_per_frame;
        if let Some(bad) = frames.iter().find(|f| f.tokens.len() != m) {
            return Err(Error::Shape(format!(
                "frame has {} tokens, expected {m}",
                bad.tokens.len()
            )));
        }
        let vocab = self.config().vocab_size;
        if let Some(&id) = frames.iter().flat_map(|f| &f.tokens).find(|&&t| t as usize >= vocab) {
            return Err(Error::Vocab { id, vocab });
        }
        let tokens: Vec<u32> = frames.iter().flat_map(|f| f.tokens.iter().copied()).collect();
        self.pending_timestamps.extend(frames.iter().map(|f| f.timestamp));
        let mut appended = Vec::with_capacity(frames.len());
        for piece in tokens.chunks(self.chunk_size) {
            appended.extend(self.step(piece)?);
        }
        Ok(appended)
    }

    /// Encodes frames one chunk (`chunk_size / M` frames, at least one) at
    /// a time.
    pub fn encode_all(&mut self, frames: impl IntoIterator<Item = InputFrame>) -> Result<Vec<Arc<FrameKv>>> {
        let per_chunk = (self.chunk_size / self.config().tokens_per_frame).max(1);
        let mut out = Vec::new();
        let mut batch = Vec::with_capacity(per_chunk);
        for f in frames {
            batch.push(f);
            if batch.len() == per_chunk {
                out.extend(self.encode_chunk(&batch)?);
                batch.clear();
            }
        }
        if !batch.is_empty() {
            out.extend(self.encode_chunk(&batch)?);
        }
        Ok(out)
    }

    fn step(&mut self, tokens: &[u32]) -> Result<Vec<Arc<FrameKv>>> {
        let model = Arc::clone(&self.model);
        let cfg = model.config();
        let window = cfg.local_window as u64;
        let heads = cfg.num_heads;
        let width = cfg.model_dim();
        let positions = self.assign_positions(tokens.len());
        let first = self.state.tokens_encoded;
        let n = tokens.len();
        let mut hidden = model.embed_tokens(tokens)?;

        for layer in 0..cfg.num_layers {
            let Projections { q: q_raw, k: k_raw, v } = model.project(layer, &hidden)?;
            let mut q = q_raw.clone();
            let mut k = k_raw.clone();
            model.rotate_at(&mut q, &positions)?;
            model.rotate_at(&mut k, &positions)?;

            let win = &self.windows[layer];
            let any_clamped = self.sink_tokens > 0 && first + n as u64 > window;
            let q_ceiling = if any_clamped {
                let mut qc = q_raw.clone();
                let ceil = vec![window as f64; n];
                model.rope().rotate_rows(&mut qc, &ceil)?;
                Some(qc)
            } else {
                None
            };
            let plans: Vec<RowPlan> = (0..n)
                .map(|i| RowPlan::new(first + i as u64, first, win.start, window, self.sink_tokens))
                .collect();
            let mut attn = Matrix::zeros(n, width);
            par::for_each_chunk_mut(attn.data_mut(), width, |i, out_row| {
                let plan = &plans[i];
                let mut segments = Vec::with_capacity(3);
                if plan.clamped_sinks > 0 {
                    segments.push(KeySegment {
                        keys: &win.sink_raw_keys,
                        values: &win.sink_values,
                        rows: 0..plan.clamped_sinks,
                        query: QuerySlot::Alternate,
                    });
                }
                if !plan.window_rows.is_empty() {
                    segments.push(KeySegment {
                        keys: &win.kv.keys,
                        values: &win.kv.values,
                        rows: plan.window_rows.clone(),
                        query: QuerySlot::Primary,
                    });
                }
                segments.push(KeySegment {
                    keys: &k,
                    values: &v,
                    rows: plan.new_from..i + 1,
                    query: QuerySlot::Primary,
                });
                let alt = q_ceiling.as_ref().map(|qc| qc.row(i));
                attend_row(q.row(i), alt, &segments, heads, out_row);
            });
            let counts = plans.iter().enumerate().map(|(i, p)| p.keys(i));
            if let Some(probe) = self.probe.as_mut() {
                probe[layer].extend(counts);
            }

            model.finish_layer(layer, &mut hidden, &attn)?;

            let win = &mut self.windows[layer];
            let new_kv = LayerKv { keys: k, values: v };
            win.kv.append(&new_kv)?;
            let end = first + n as u64;
            let keep_from = end.saturating_sub(window);
            if keep_from > win.start {
                win.kv.keys.drop_front((keep_from - win.start) as usize);
                win.kv.values.drop_front((keep_from - win.start) as usize);
                win.start = keep_from;
            }
            for (i, &p) in positions.iter().enumerate() {
                if p < self.sink_tokens {
                    win.sink_raw_keys.push_row(k_raw.row(i))?;
                    win.sink_values.push_row(new_kv.values.row(i))?;
                }
            }
            self.pending[layer].append(&new_kv)?;
        }

        self.state.tokens_encoded += n as u64;
        self.pending_tokens.extend_from_slice(tokens);
        self.last_hidden = Some(hidden);
        self.flush_frames()
    }

    fn flush_frames(&mut self) -> Result<Vec<Arc<FrameKv>>> {
        let m = self.config().tokens_per_frame;
        let mut out = Vec::new();
        while self.pending_tokens.len() >= m {
            let index = self.state.next_frame;
            let layers = self
                .pending
                .iter_mut()
                .map(|kv| {
                    let frame = LayerKv {
                        keys: kv.keys.slice_rows(0..m),
                        values: kv.values.slice_rows(0..m),
                    };
                    kv.keys.drop_front(m);
                    kv.values.drop_front(m);
                    frame
                })
                .collect();
            let tokens: Vec<u32> = self.pending_tokens.drain(..m).collect();
            let timestamp = self.pending_timestamps.pop_front().unwrap_or(f64::NAN);
            let frame = Arc::new(FrameKv {
                frame_index: index,
                timestamp,
                encode_position_start: index * m as u64,
                layers,
            });
            for obs in &mut self.observers {
                obs.on_frame(&frame, &tokens)?;
            }
            self.writer.append(Arc::clone(&frame))?;
            self.state.next_frame += 1;
            out.push(frame);
        }
        Ok(out)
    }

    /// Ends the stream, handing back the writer.
    pub fn finish(mut self) -> Result<StoreWriter> {
        self.writer.close()?;
        Ok(self.writer)
    }
}

/// Which cached keys query position `t` sees.
struct RowPlan {
    /// Leading sink rows scored at the distance ceiling.
    clamped_sinks: usize,
    /// Rows of the window buffer inside `(t - l_L, t]`.
    window_rows: std::ops::Range<usize>,
    /// First row of the current chunk inside the window.
    new_from: usize,
}

impl RowPlan {
    fn new(t: u64, chunk_start: u64, window_start: u64, window: u64, sink_tokens: u64) -> Self {
        let lo = (t + 1).saturating_sub(window);
        let from = lo.max(window_start);
        let window_rows = if from < chunk_start {
            (from - window_start) as usize..(chunk_start - window_start) as usize
        } else {
            0..0
        };
        Self {
            clamped_sinks: sink_tokens.min(lo) as usize,
            window_rows,
            new_from: lo.saturating_sub(chunk_start) as usize,
        }
    }

    fn keys(&self, row_in_chunk: usize) -> usize {
        self.clamped_sinks + self.window_rows.len() + row_in_chunk + 1 - self.new_from
    }
}

/// Selects frames from a source running at `source_fps` so that the output
/// runs at `target_fps`, renumbering them and stamping `index / target_fps`.
pub fn ingest_rate_control<I>(source: I, source_fps: f64, target_fps: f64) -> Result<RateControl<I::IntoIter>>
where
    I: IntoIterator<Item = Vec<u32>>,
{
    if !(source_fps > 0.0 && target_fps > 0.0) {
        return Err(Error::Config("frame rates must be positive".into()));
    }
    Ok(RateControl {
        source: source.into_iter(),
        source_fps,
        target_fps,
        seen: 0,
        emitted: 0,
    })
}

pub struct RateControl<I> {
    source: I,
    source_fps: f64,
    target_fps: f64,
    seen: u64,
    emitted: u64,
}

impl<I: Iterator<Item = Vec<u32>>> Iterator for RateControl<I> {
    type Item = InputFrame;

    fn next(&mut self) -> Option<InputFrame> {
        loop {
            let tokens = self.source.next()?;
            let i = self.seen;
            self.seen += 1;
            // emit when the source clock reaches the next output slot
            let due = self.emitted as f64 / self.target_fps;
            let now = i as f64 / self.source_fps;
            if now + 1e-9 >= due {
                let frame = InputFrame {
                    tokens,
                    timestamp: due,
                };
                self.emitted += 1;
                return Some(frame);
            }
        }
    }
}

/// Sleeps until each frame's timestamp has elapsed since `start`.
pub struct Paced<I> {
    inner: I,
    start: Instant,
}

pub fn paced<I: Iterator<Item = InputFrame>>(inner: I) -> Paced<I> {
    Paced {
        inner,
        start: Instant::now(),
    }
}

impl<I: Iterator<Item = InputFrame>> Iterator for Paced<I> {
    type Item = InputFrame;

    fn next(&mut self) -> Option<InputFrame> {
        let f = self.inner.next()?;
        let due = self.start + Duration::from_secs_f64(f.timestamp.max(0.0));
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
        Some(f)
    }
}

#[cfg(test)]
mod tests;
