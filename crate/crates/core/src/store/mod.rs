//! Tiered storage for per-frame KV caches.
//!
//! Frames live in one of three tiers. The hot tier mirrors the encoder's
//! sliding window: the first `sink_frames` frames plus the most recent
//! `window_frames`. Frames leaving the window drop to the RAM tier in FIFO
//! order, and once RAM holds more than its byte budget the oldest RAM frames
//! are written to disk as one block file each.
//!
//! There is exactly one [`StoreWriter`]; any number of [`KvStore`] handles
//! read through [`StoreSnapshot`]s. Frames are immutable once appended, so a
//! snapshot only has to pin the highest frame index it may see.

pub mod block;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::LayerKv;

pub use block::BlockShape;

/// KV cache of one frame: `tokens_per_frame` rows per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameKv {
    pub frame_index: u64,
    pub timestamp: f64,
    /// Position of the frame's first token at encode time; token `j` was
    /// rotated at `encode_position_start + j`.
    pub encode_position_start: u64,
    pub layers: Vec<LayerKv>,
}

impl FrameKv {
    pub fn encode_positions(&self) -> std::ops::Range<u64> {
        let n = self.layers.first().map_or(0, LayerKv::len) as u64;
        self.encode_position_start..self.encode_position_start + n
    }

    pub(crate) fn check_shape(&self, shape: &BlockShape) -> Result<()> {
        if self.layers.len() != shape.layers {
            return Err(Error::Shape(format!(
                "frame {} has {} layers, expected {}",
                self.frame_index,
                self.layers.len(),
                shape.layers
            )));
        }
        for kv in &self.layers {
            for m in [&kv.keys, &kv.values] {
                if m.rows() != shape.tokens || m.cols() != shape.width() {
                    return Err(Error::Shape(format!(
                        "frame {} layer is {}x{}, expected {}x{}",
                        self.frame_index,
                        m.rows(),
                        m.cols(),
                        shape.tokens,
                        shape.width()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Bit patterns of every stored float, for exact comparisons.
    pub fn bits(&self) -> Vec<u32> {
        self.layers
            .iter()
            .flat_map(|l| l.keys.data().iter().chain(l.values.data()))
            .map(|x| x.to_bits())
            .collect()
    }
}

/// Bytes of K and V for `frames` frames: `2 · L · T · M · H · D · bytes`.
pub fn size_bytes(config: &ModelConfig, frames: u64) -> u64 {
    2 * config.num_layers as u64
        * frames
        * config.tokens_per_frame as u64
        * config.num_heads as u64
        * config.head_dim as u64
        * config.bytes_per_scalar as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Hot,
    Ram,
    Disk,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierPlacement {
    pub frame_index: u64,
    pub tier: Tier,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disk_path: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct StoreConfig {
    pub shape: BlockShape,
    /// Non-sink frames kept hot.
    pub window_frames: usize,
    pub sink_frames: usize,
    pub ram_budget_bytes: Option<u64>,
    pub disk_dir: Option<PathBuf>,
}

impl StoreConfig {
    pub fn for_model(model: &ModelConfig, sink_frames: usize) -> Self {
        Self {
            shape: BlockShape {
                layers: model.num_layers,
                tokens: model.tokens_per_frame,
                heads: model.num_heads,
                head_dim: model.head_dim,
            },
            window_frames: model.window_frames(),
            sink_frames,
            ram_budget_bytes: None,
            disk_dir: None,
        }
    }

    pub fn with_disk(mut self, dir: impl Into<PathBuf>, ram_budget_bytes: Option<u64>) -> Self {
        self.disk_dir = Some(dir.into());
        self.ram_budget_bytes = ram_budget_bytes;
        self
    }
}

#[derive(Clone, Debug)]
enum Slot {
    Memory(Arc<FrameKv>, Tier),
    Disk(PathBuf),
}

impl Slot {
    fn tier(&self) -> Tier {
        match self {
            Slot::Memory(_, t) => *t,
            Slot::Disk(_) => Tier::Disk,
        }
    }
}

/// Resident bytes per tier, current and peak.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierBytes {
    pub hot: u64,
    pub ram: u64,
    pub disk: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub frames: u64,
    pub current: TierBytes,
    pub peak: TierBytes,
    pub offloaded_bytes: u64,
    pub disk_reads: u64,
}

#[derive(Default)]
struct State {
    slots: Vec<Slot>,
    timestamps: Vec<f64>,
    stats: StoreStats,
}

impl State {
    fn account(&mut self, tier: Tier, bytes: u64, add: bool) {
        let cur = &mut self.stats.current;
        let slot = match tier {
            Tier::Hot => &mut cur.hot,
            Tier::Ram => &mut cur.ram,
            Tier::Disk => &mut cur.disk,
        };
        if add {
            *slot += bytes;
        } else {
            *slot -= bytes;
        }
        let peak = &mut self.stats.peak;
        peak.hot = peak.hot.max(cur.hot);
        peak.ram = peak.ram.max(cur.ram);
        peak.disk = peak.disk.max(cur.disk);
    }
}

#[derive(Default)]
struct Progress {
    frames: u64,
    closed: bool,
}

struct Shared {
    config: StoreConfig,
    state: RwLock<State>,
    progress: Mutex<Progress>,
    progressed: Condvar,
}

/// Read handle to a store. Cheap to clone.
#[derive(Clone)]
pub struct KvStore {
    shared: Arc<Shared>,
}

/// The store's single writer.
pub struct StoreWriter {
    store: KvStore,
    /// Oldest non-sink frame still in the hot tier.
    hot_start: u64,
}

/// An immutable view of the frames appended before it was taken.
#[derive(Clone)]
pub struct StoreSnapshot {
    store: KvStore,
    max_frame: Option<u64>,
}

impl KvStore {
    pub fn create(config: StoreConfig) -> Result<(StoreWriter, KvStore)> {
        if let Some(dir) = &config.disk_dir {
            fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
        }
        if config.ram_budget_bytes.is_some() && config.disk_dir.is_none() {
            return Err(Error::Config("a RAM budget needs a disk directory".into()));
        }
        let store = KvStore {
            shared: Arc::new(Shared {
                config,
                state: RwLock::new(State::default()),
                progress: Mutex::new(Progress::default()),
                progressed: Condvar::new(),
            }),
        };
        let writer = StoreWriter {
            store: store.clone(),
            hot_start: 0,
        };
        Ok((writer, store))
    }

    /// Reopens a directory written by [`StoreWriter::persist_all`]. Every
    /// frame is placed on disk.
    pub fn open_dir(dir: &Path) -> Result<KvStore> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::storage(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let mut state = State::default();
        for (i, entry) in manifest.frames.iter().enumerate() {
            if entry.frame_index != i as u64 {
                return Err(Error::Parse(format!("manifest entry {i} names frame {}", entry.frame_index)));
            }
            let file = entry
                .disk_path
                .as_ref()
                .ok_or_else(|| Error::Parse(format!("frame {i} was not persisted to disk")))?;
            state.slots.push(Slot::Disk(dir.join(file)));
            state.timestamps.push(entry.timestamp);
            state.account(Tier::Disk, manifest.shape.payload_bytes() as u64, true);
        }
        state.stats.frames = state.slots.len() as u64;
        let config = StoreConfig {
            shape: manifest.shape,
            window_frames: manifest.window_frames,
            sink_frames: manifest.sink_frames,
            ram_budget_bytes: None,
            disk_dir: Some(dir.to_path_buf()),
        };
        let frames = state.stats.frames;
        Ok(KvStore {
            shared: Arc::new(Shared {
                config,
                state: RwLock::new(state),
                progress: Mutex::new(Progress { frames, closed: true }),
                progressed: Condvar::new(),
            }),
        })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.shared.config
    }

    pub fn len(&self) -> u64 {
        self.shared.state.read().slots.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> StoreStats {
        self.shared.state.read().stats
    }

    /// Pins a view at the current highest frame.
    pub fn snapshot(&self) -> StoreSnapshot {
        let n = self.len();
        StoreSnapshot {
            store: self.clone(),
            max_frame: n.checked_sub(1),
        }
    }

    /// Pins a view at `max_frame` (or an empty view for `None`).
    pub fn snapshot_at(&self, max_frame: Option<u64>) -> Result<StoreSnapshot> {
        if let Some(m) = max_frame {
            if m >= self.len() {
                return Err(Error::NotFound(m));
            }
        }
        Ok(StoreSnapshot {
            store: self.clone(),
            max_frame,
        })
    }

    /// Highest appended frame whose timestamp is at most `t`.
    pub fn last_frame_at_or_before(&self, t: f64) -> Option<u64> {
        let state = self.shared.state.read();
        let n = state.timestamps.partition_point(|&ts| ts <= t);
        (n as u64).checked_sub(1)
    }

    pub fn timestamp(&self, frame: u64) -> Option<f64> {
        self.shared.state.read().timestamps.get(frame as usize).copied()
    }

    pub fn placement(&self, frame: u64) -> Option<TierPlacement> {
        let state = self.shared.state.read();
        state.slots.get(frame as usize).map(|s| placement_of(frame, s))
    }

    pub fn placements(&self) -> Vec<TierPlacement> {
        let state = self.shared.state.read();
        state
            .slots
            .iter()
            .enumerate()
            .map(|(i, s)| placement_of(i as u64, s))
            .collect()
    }

    /// Blocks until at least `frames` frames exist or the writer closed.
    /// Returns the frame count at wake-up.
    pub fn wait_for_frames(&self, frames: u64) -> u64 {
        let mut p = self.shared.progress.lock();
        while p.frames < frames && !p.closed {
            self.shared.progressed.wait(&mut p);
        }
        p.frames
    }

    pub fn is_closed(&self) -> bool {
        self.shared.progress.lock().closed
    }

    fn read_frame(&self, index: u64) -> Result<Arc<FrameKv>> {
        let slot = {
            let state = self.shared.state.read();
            state
                .slots
                .get(index as usize)
                .cloned()
                .ok_or(Error::NotFound(index))?
        };
        match slot {
            Slot::Memory(frame, _) => Ok(frame),
            Slot::Disk(path) => {
                let bytes = fs::read(&path).map_err(|e| Error::storage(&path, e))?;
                self.shared.state.write().stats.disk_reads += 1;
                Ok(Arc::new(block::decode(&bytes, index, &self.shared.config.shape)?))
            }
        }
    }
}

fn placement_of(frame: u64, slot: &Slot) -> TierPlacement {
    TierPlacement {
        frame_index: frame,
        tier: slot.tier(),
        disk_path: match slot {
            Slot::Disk(p) => Some(p.clone()),
            Slot::Memory(..) => None,
        },
    }
}

impl StoreSnapshot {
    pub fn max_frame(&self) -> Option<u64> {
        self.max_frame
    }

    /// Number of frames visible through this snapshot.
    pub fn len(&self) -> u64 {
        self.max_frame.map_or(0, |m| m + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.max_frame.is_none()
    }

    pub fn store(&self) -> &KvStore {
        &self.store
    }

    pub fn timestamp(&self, frame: u64) -> Option<f64> {
        if self.contains(frame) {
            self.store.timestamp(frame)
        } else {
            None
        }
    }

    pub fn contains(&self, frame: u64) -> bool {
        self.max_frame.is_some_and(|m| frame <= m)
    }

    /// Loads frames in ascending index order, whatever their tier.
    pub fn load(&self, indices: &[u64]) -> Result<Vec<Arc<FrameKv>>> {
        let wanted: BTreeSet<u64> = indices.iter().copied().collect();
        wanted
            .into_iter()
            .map(|i| {
                if !self.contains(i) {
                    return Err(Error::NotFound(i));
                }
                self.store.read_frame(i)
            })
            .collect()
    }

    pub fn load_one(&self, index: u64) -> Result<Arc<FrameKv>> {
        if !self.contains(index) {
            return Err(Error::NotFound(index));
        }
        self.store.read_frame(index)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    shape: BlockShape,
    window_frames: usize,
    sink_frames: usize,
    frames: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    frame_index: u64,
    tier: Tier,
    timestamp: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    disk_path: Option<PathBuf>,
}

pub fn frame_file_name(index: u64) -> String {
    format!("frame_{index}.rkv")
}

fn demote_hot(state: &mut State, index: usize, bytes: u64) {
    if let Slot::Memory(_, tier) = &mut state.slots[index] {
        if *tier == Tier::Hot {
            *tier = Tier::Ram;
            state.account(Tier::Hot, bytes, false);
            state.account(Tier::Ram, bytes, true);
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::storage(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::storage(&tmp, e))?;
    f.sync_all().map_err(|e| Error::storage(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::storage(path, e))
}

impl StoreWriter {
    pub fn store(&self) -> &KvStore {
        &self.store
    }

    fn shared(&self) -> &Shared {
        &self.store.shared
    }

    fn frame_bytes(&self) -> u64 {
        self.shared().config.shape.payload_bytes() as u64
    }

    /// Appends the next frame. It enters the hot tier; frames that fall out
    /// of the window move to RAM, and RAM overflow moves to disk.
    pub fn append(&mut self, frame: impl Into<Arc<FrameKv>>) -> Result<TierPlacement> {
        let frame: Arc<FrameKv> = frame.into();
        let config = &self.store.shared.config;
        frame.check_shape(&config.shape)?;
        let expected = self.store.len();
        if frame.frame_index != expected {
            return Err(Error::Ordering {
                expected,
                got: frame.frame_index,
            });
        }
        let index = frame.frame_index;
        let bytes = self.frame_bytes();
        let sinks = config.sink_frames as u64;
        let window = config.window_frames as u64;
        {
            let mut state = self.store.shared.state.write();
            state.timestamps.push(frame.timestamp);
            state.slots.push(Slot::Memory(frame, Tier::Hot));
            state.account(Tier::Hot, bytes, true);
            state.stats.frames += 1;
            self.hot_start = self.hot_start.max(sinks);
            while (index + 1).saturating_sub(self.hot_start) > window {
                demote_hot(&mut state, self.hot_start as usize, bytes);
                self.hot_start += 1;
            }
        }
        {
            let mut p = self.shared().progress.lock();
            p.frames = index + 1;
        }
        self.shared().progressed.notify_all();
        self.enforce_ram_budget()?;
        Ok(self.store.placement(index).expect("just appended"))
    }

    fn enforce_ram_budget(&mut self) -> Result<()> {
        let Some(budget) = self.shared().config.ram_budget_bytes else {
            return Ok(());
        };
        let bytes = self.frame_bytes();
        let victims: Vec<u64> = {
            let state = self.shared().state.read();
            let excess = state.stats.current.ram.saturating_sub(budget);
            let count = excess.div_ceil(bytes) as usize;
            state
                .slots
                .iter()
                .enumerate()
                .filter(|(_, s)| s.tier() == Tier::Ram)
                .take(count)
                .map(|(i, _)| i as u64)
                .collect()
        };
        if victims.is_empty() {
            return Ok(());
        }
        self.offload_frames(victims)?;
        Ok(())
    }

    /// Writes RAM-tier frames in `range` to disk and drops their RAM copies.
    /// Frames already on disk are left alone. On I/O failure the frame stays
    /// in RAM.
    pub fn offload_to_disk(&mut self, range: std::ops::Range<u64>) -> Result<Vec<PathBuf>> {
        self.offload_frames(range)
    }

    fn offload_frames(&mut self, frames: impl IntoIterator<Item = u64>) -> Result<Vec<PathBuf>> {
        let dir = self
            .shared()
            .config
            .disk_dir
            .clone()
            .ok_or_else(|| Error::Config("store has no disk directory".into()))?;
        let mut paths = Vec::new();
        let mut moved = false;
        for index in frames {
            let slot = {
                let state = self.shared().state.read();
                state.slots.get(index as usize).cloned().ok_or(Error::NotFound(index))?
            };
            let frame = match slot {
                Slot::Disk(path) => {
                    paths.push(path);
                    continue;
                }
                Slot::Memory(_, Tier::Hot) => {
                    return Err(Error::Config(format!("frame {index} is in the hot tier")));
                }
                Slot::Memory(frame, _) => frame,
            };
            let path = self.write_block(&dir, &frame)?;
            {
                let bytes = self.frame_bytes();
                let mut state = self.shared().state.write();
                state.slots[index as usize] = Slot::Disk(path.clone());
                state.account(Tier::Ram, bytes, false);
                state.account(Tier::Disk, bytes, true);
                state.stats.offloaded_bytes += bytes;
            }
            debug!(frame = index, path = %path.display(), "offloaded frame");
            moved = true;
            paths.push(path);
        }
        if moved {
            self.write_manifest()?;
        }
        Ok(paths)
    }

    fn write_block(&self, dir: &Path, frame: &FrameKv) -> Result<PathBuf> {
        let bytes = block::encode(frame, &self.shared().config.shape)?;
        let path = dir.join(frame_file_name(frame.frame_index));
        write_atomic(&path, &bytes)?;
        Ok(path)
    }

    /// Moves every frame, hot ones included, to disk and writes the
    /// manifest. Used when a stream ends and its cache should be kept.
    pub fn persist_all(&mut self) -> Result<Vec<PathBuf>> {
        let n = self.store.len();
        {
            let bytes = self.frame_bytes();
            let mut state = self.shared().state.write();
            for i in 0..n as usize {
                demote_hot(&mut state, i, bytes);
            }
        }
        self.hot_start = n;
        self.offload_to_disk(0..n)
    }

    fn write_manifest(&self) -> Result<()> {
        let Some(dir) = &self.shared().config.disk_dir else {
            return Ok(());
        };
        let config = &self.shared().config;
        let frames = {
            let state = self.shared().state.read();
            state
                .slots
                .iter()
                .enumerate()
                .map(|(i, s)| ManifestEntry {
                    frame_index: i as u64,
                    tier: s.tier(),
                    timestamp: state.timestamps[i],
                    disk_path: match s {
                        Slot::Disk(p) => p.file_name().map(PathBuf::from),
                        Slot::Memory(..) => None,
                    },
                })
                .collect()
        };
        let manifest = Manifest {
            version: block::VERSION,
            shape: config.shape,
            window_frames: config.window_frames,
            sink_frames: config.sink_frames,
            frames,
        };
        let text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST_FILE), &text)
    }

    /// Marks the stream finished and wakes every waiter.
    pub fn close(&mut self) -> Result<()> {
        self.write_manifest()?;
        self.shared().progress.lock().closed = true;
        self.shared().progressed.notify_all();
        Ok(())
    }
}

impl Drop for StoreWriter {
    fn drop(&mut self) {
        self.shared().progress.lock().closed = true;
        self.shared().progressed.notify_all();
    }
}
