//! Frame selection for question answering.
//!
//! Frames are represented by the mean of their key vectors (heads
//! concatenated) for the internal path, or by an embedder's vector for the
//! external path. Questions are represented by the mean of their query
//! vectors or their text embedding. Blocks of `b` consecutive frames are
//! scored by cosine similarity and the best `⌈r/b⌉` blocks are kept.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use parking_lot::RwLock;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::KeyPooling;
use crate::encoder::FrameObserver;
use crate::error::{Error, Result};
use crate::model::ToyModel;
use crate::par;
use crate::store::{FrameKv, StoreSnapshot};
use crate::tensor::{cosine_sim, Matrix, Rope};

/// Representative vector of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameVector {
    pub frame_index: u64,
    /// Attention layer for internal vectors, `None` for external ones.
    pub layer: Option<usize>,
    pub vector: Vec<f32>,
}

/// Representative vector of a question.
#[derive(Clone, Debug, PartialEq)]
pub struct QuestionVector {
    pub layer: Option<usize>,
    pub vector: Vec<f32>,
}

/// `b` consecutive frames scored as one unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub frames: Vec<u64>,
    pub vector: Vec<f32>,
}

/// Frames chosen for one question (and one layer, on the internal path).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub layer: Option<usize>,
    /// Ascending.
    pub frame_indices: Vec<u64>,
    /// Score of the block each frame was retrieved with.
    pub scores: Vec<f32>,
    pub r: usize,
    pub b: usize,
    pub tau: f32,
}

impl RetrievalResult {
    fn empty(layer: Option<usize>, r: usize, b: usize, tau: f32) -> Self {
        Self {
            layer,
            r,
            b,
            tau,
            ..Self::default()
        }
    }

    /// A fixed selection that was not scored (uniform, labelled or total).
    pub fn unscored(frames: Vec<u64>, r: usize, b: usize) -> Self {
        let scores = vec![0.0; frames.len()];
        Self {
            layer: None,
            frame_indices: frames,
            scores,
            r,
            b,
            tau: 1.0,
        }
    }
}

fn mean_rows<'a>(rows: impl Iterator<Item = &'a [f32]>, width: usize) -> Option<Vec<f32>> {
    let mut acc = vec![0.0f64; width];
    let mut n = 0usize;
    for row in rows {
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += f64::from(x);
        }
        n += 1;
    }
    (n > 0).then(|| acc.iter().map(|a| (a / n as f64) as f32).collect())
}

/// Mean of a frame's key rows at `layer`, heads concatenated. With
/// [`KeyPooling::PreRope`] each stored key is first rotated back from its
/// encode position.
pub fn frame_vector_internal(
    frame: &FrameKv,
    layer: usize,
    pooling: KeyPooling,
    rope: &Rope,
) -> Result<FrameVector> {
    let kv = frame
        .layers
        .get(layer)
        .ok_or_else(|| Error::Shape(format!("frame has no layer {layer}")))?;
    let keys = &kv.keys;
    if keys.rows() == 0 {
        return Err(Error::Shape(format!("frame {} has no keys", frame.frame_index)));
    }
    let vector = match pooling {
        KeyPooling::PostRope => mean_rows(keys.row_iter(), keys.cols()),
        KeyPooling::PreRope => {
            let mut raw = keys.clone();
            let pos: Vec<f64> = frame.encode_positions().map(|p| -(p as f64)).collect();
            rope.rotate_rows(&mut raw, &pos)?;
            mean_rows(raw.row_iter(), raw.cols())
        }
    }
    .expect("non-empty");
    Ok(FrameVector {
        frame_index: frame.frame_index,
        layer: Some(layer),
        vector,
    })
}

/// Mean of the question's query rows at `layer`. `queries` are unrotated
/// projections; with [`KeyPooling::PostRope`] they are rotated at
/// `start_position, start_position + 1, …` before averaging.
pub fn question_vector_internal(
    queries: &Matrix,
    layer: usize,
    pooling: KeyPooling,
    rope: &Rope,
    start_position: u64,
) -> Result<QuestionVector> {
    if queries.rows() == 0 {
        return Err(Error::Degenerate("question has no tokens".into()));
    }
    let vector = match pooling {
        KeyPooling::PreRope => mean_rows(queries.row_iter(), queries.cols()),
        KeyPooling::PostRope => {
            let mut q = queries.clone();
            let pos: Vec<f64> = (0..q.rows()).map(|i| (start_position + i as u64) as f64).collect();
            rope.rotate_rows(&mut q, &pos)?;
            mean_rows(q.row_iter(), q.cols())
        }
    }
    .expect("non-empty");
    Ok(QuestionVector {
        layer: Some(layer),
        vector,
    })
}

/// Groups consecutive frame vectors into blocks of `b` (the last one may be
/// shorter) and averages each group.
pub fn block_vectors(vectors: &[FrameVector], b: usize) -> Result<Vec<Block>> {
    if b == 0 {
        return Err(Error::Config("block size must be at least 1".into()));
    }
    Ok(vectors
        .chunks(b)
        .map(|group| Block {
            frames: group.iter().map(|v| v.frame_index).collect(),
            vector: mean_rows(group.iter().map(|v| v.vector.as_slice()), group[0].vector.len())
                .expect("non-empty chunk"),
        })
        .collect())
}

/// Number of blocks kept for `r` frames in blocks of `b`.
pub fn blocks_for(r: usize, b: usize) -> usize {
    r.div_ceil(b)
}

fn select(
    layer: Option<usize>,
    ids: &[u64],
    vectors: &[&[f32]],
    qvec: &[f32],
    r: usize,
    b: usize,
    tau: f32,
) -> Result<RetrievalResult> {
    if b == 0 {
        return Err(Error::Config("block size must be at least 1".into()));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    if ids.is_empty() || r == 0 {
        return Ok(RetrievalResult::empty(layer, r, b, tau));
    }
    let starts: Vec<usize> = (0..ids.len()).step_by(b).collect();
    let scored: Vec<Result<f32>> = par::map_slice(&starts, |&s| {
        let end = (s + b).min(ids.len());
        let v = if end - s == 1 {
            vectors[s].to_vec()
        } else {
            mean_rows(vectors[s..end].iter().copied(), qvec.len()).expect("non-empty")
        };
        cosine_sim(&v, qvec, tau)
    });
    let mut order: Vec<(f32, usize)> = scored
        .into_iter()
        .zip(&starts)
        .map(|(s, &start)| s.map(|s| (s, start)))
        .collect::<Result<_>>()?;
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(ids[a.1].cmp(&ids[b.1])));
    order.truncate(blocks_for(r, b));
    let mut picked: Vec<(u64, f32)> = order
        .iter()
        .flat_map(|&(score, s)| ids[s..(s + b).min(ids.len())].iter().map(move |&f| (f, score)))
        .collect();
    picked.sort_by_key(|p| p.0);
    Ok(RetrievalResult {
        layer,
        frame_indices: picked.iter().map(|p| p.0).collect(),
        scores: picked.iter().map(|p| p.1).collect(),
        r,
        b,
        tau,
    })
}

/// Scores every block against `qvec` and keeps the best `⌈r/b⌉`, breaking
/// ties toward the lower frame index. `vectors` must be in ascending frame
/// order. The result lists frames ascending.
pub fn retrieve(vectors: &[FrameVector], qvec: &QuestionVector, r: usize, b: usize, tau: f32) -> Result<RetrievalResult> {
    if vectors.windows(2).any(|w| w[0].frame_index >= w[1].frame_index) {
        return Err(Error::Shape("candidate frames must be strictly ascending".into()));
    }
    let ids: Vec<u64> = vectors.iter().map(|v| v.frame_index).collect();
    let refs: Vec<&[f32]> = vectors.iter().map(|v| v.vector.as_slice()).collect();
    select(qvec.layer, &ids, &refs, &qvec.vector, r, b, tau)
}

/// `|retrieved ∩ relevant| / |relevant|`.
pub fn recall(retrieved: &[u64], relevant: &[u64]) -> Result<f64> {
    let relevant: BTreeSet<u64> = relevant.iter().copied().collect();
    if relevant.is_empty() {
        return Err(Error::UndefinedMetric("recall with no relevant frames".into()));
    }
    let retrieved: BTreeSet<u64> = retrieved.iter().copied().collect();
    Ok(retrieved.intersection(&relevant).count() as f64 / relevant.len() as f64)
}

/// Recall averaged over per-layer results.
pub fn mean_recall(results: &[RetrievalResult], relevant: &[u64]) -> Result<f64> {
    if results.is_empty() {
        return recall(&[], relevant);
    }
    let sum = results
        .iter()
        .map(|r| recall(&r.frame_indices, relevant))
        .sum::<Result<f64>>()?;
    Ok(sum / results.len() as f64)
}

/// `r` evenly spaced frames out of `total`: `⌊(i + 0.5)·total/r⌋`.
pub fn uniform_sample(total: u64, r: usize) -> Vec<u64> {
    if r as u64 >= total {
        return (0..total).collect();
    }
    (0..r as u64)
        .map(|i| ((2 * i + 1) * total) / (2 * r as u64))
        .collect()
}

/// Memoized internal frame vectors, one per `(frame, layer)`.
///
/// Once published a frame's vectors never change. The index can observe an
/// encoder to compute vectors as frames arrive, or fill itself lazily from a
/// snapshot.
#[derive(Clone)]
pub struct InternalIndex {
    inner: Arc<IndexInner>,
}

struct IndexInner {
    pooling: KeyPooling,
    rope: Rope,
    layers: usize,
    vectors: RwLock<HashMap<u64, Arc<Vec<Vec<f32>>>>>,
}

impl InternalIndex {
    pub fn new(model: &ToyModel, pooling: KeyPooling) -> Self {
        Self {
            inner: Arc::new(IndexInner {
                pooling,
                rope: model.rope().clone(),
                layers: model.num_layers(),
                vectors: RwLock::new(HashMap::new()),
            }),
        }
    }

    pub fn pooling(&self) -> KeyPooling {
        self.inner.pooling
    }

    pub fn len(&self) -> usize {
        self.inner.vectors.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn compute(&self, frame: &FrameKv) -> Result<Vec<Vec<f32>>> {
        (0..self.inner.layers)
            .map(|l| frame_vector_internal(frame, l, self.inner.pooling, &self.inner.rope).map(|v| v.vector))
            .collect()
    }

    /// Publishes the vectors of `frame` unless already present.
    pub fn insert(&self, frame: &FrameKv) -> Result<()> {
        if self.inner.vectors.read().contains_key(&frame.frame_index) {
            return Ok(());
        }
        let v = Arc::new(self.compute(frame)?);
        self.inner.vectors.write().entry(frame.frame_index).or_insert(v);
        Ok(())
    }

    /// Vectors of every frame visible in `snapshot`, ascending.
    fn gather(&self, snapshot: &StoreSnapshot) -> Result<Vec<Arc<Vec<Vec<f32>>>>> {
        let n = snapshot.len();
        let missing: Vec<u64> = {
            let map = self.inner.vectors.read();
            (0..n).filter(|i| !map.contains_key(i)).collect()
        };
        if !missing.is_empty() {
            for frame in snapshot.load(&missing)? {
                self.insert(&frame)?;
            }
        }
        let map = self.inner.vectors.read();
        Ok((0..n).map(|i| map[&i].clone()).collect())
    }

    /// Frame vectors at `layer` for every frame in `snapshot`.
    pub fn frame_vectors(&self, snapshot: &StoreSnapshot, layer: usize) -> Result<Vec<FrameVector>> {
        self.check_layer(layer)?;
        Ok(self
            .gather(snapshot)?
            .iter()
            .enumerate()
            .map(|(i, v)| FrameVector {
                frame_index: i as u64,
                layer: Some(layer),
                vector: v[layer].clone(),
            })
            .collect())
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.inner.layers {
            return Err(Error::Shape(format!("layer {layer} out of range")));
        }
        Ok(())
    }

    /// Retrieval at one layer over every frame of `snapshot`. The internal
    /// path always uses temperature 1.
    pub fn retrieve(
        &self,
        snapshot: &StoreSnapshot,
        qvec: &QuestionVector,
        layer: usize,
        r: usize,
        b: usize,
    ) -> Result<RetrievalResult> {
        self.check_layer(layer)?;
        let all = self.gather(snapshot)?;
        let ids: Vec<u64> = (0..all.len() as u64).collect();
        let refs: Vec<&[f32]> = all.iter().map(|v| v[layer].as_slice()).collect();
        select(Some(layer), &ids, &refs, &qvec.vector, r, b, 1.0)
    }
}

impl FrameObserver for InternalIndex {
    fn on_frame(&mut self, frame: &Arc<FrameKv>, _tokens: &[u32]) -> Result<()> {
        self.insert(frame)
    }
}

/// Separate embedding model for frames and question text.
pub trait FrameEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_frame(&self, tokens: &[u32]) -> Result<Vec<f32>>;
    fn embed_text(&self, tokens: &[u32]) -> Result<Vec<f32>>;
}

/// Sum of fixed random vectors over the distinct tokens of the input.
/// Inputs with the same token set embed identically.
#[derive(Clone, Debug)]
pub struct BagOfTokensEmbedder {
    table: Matrix,
}

impl BagOfTokensEmbedder {
    pub fn new(vocab_size: usize, dim: usize, seed: u64) -> Result<Self> {
        if vocab_size == 0 || dim == 0 {
            return Err(Error::Config("embedder needs a vocabulary and a dimension".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..vocab_size * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(Self {
            table: Matrix::new(vocab_size, dim, data)?,
        })
    }

    fn embed(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        let bag: BTreeSet<u32> = tokens.iter().copied().collect();
        let mut acc = vec![0.0f64; self.table.cols()];
        for id in bag {
            if id as usize >= self.table.rows() {
                return Err(Error::Vocab {
                    id,
                    vocab: self.table.rows(),
                });
            }
            for (a, &x) in acc.iter_mut().zip(self.table.row(id as usize)) {
                *a += f64::from(x);
            }
        }
        Ok(acc.into_iter().map(|a| a as f32).collect())
    }
}

impl FrameEmbedder for BagOfTokensEmbedder {
    fn dim(&self) -> usize {
        self.table.cols()
    }

    fn embed_frame(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        self.embed(tokens)
    }

    fn embed_text(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        self.embed(tokens)
    }
}

/// Frame embeddings produced at encode time.
#[derive(Clone)]
pub struct ExternalIndex {
    embedder: Arc<dyn FrameEmbedder>,
    embeddings: Arc<RwLock<BTreeMap<u64, Arc<[f32]>>>>,
}

impl ExternalIndex {
    pub fn new(embedder: Arc<dyn FrameEmbedder>) -> Self {
        Self {
            embedder,
            embeddings: Arc::default(),
        }
    }

    pub fn embedder(&self) -> &dyn FrameEmbedder {
        self.embedder.as_ref()
    }

    /// Embeds and publishes a frame. A frame already present is kept.
    pub fn insert(&self, frame_index: u64, tokens: &[u32]) -> Result<()> {
        if self.embeddings.read().contains_key(&frame_index) {
            return Ok(());
        }
        let v: Arc<[f32]> = self.embedder.embed_frame(tokens)?.into();
        self.embeddings.write().entry(frame_index).or_insert(v);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.embeddings.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Embeddings of frames `0..=max_frame`, ascending.
    pub fn frame_vectors(&self, max_frame: Option<u64>) -> Result<Vec<FrameVector>> {
        let Some(max) = max_frame else {
            return Ok(Vec::new());
        };
        let map = self.embeddings.read();
        (0..=max)
            .map(|i| {
                map.get(&i)
                    .map(|v| FrameVector {
                        frame_index: i,
                        layer: None,
                        vector: v.to_vec(),
                    })
                    .ok_or(Error::MissingEmbedding(i))
            })
            .collect()
    }
}

impl FrameObserver for ExternalIndex {
    fn on_frame(&mut self, frame: &Arc<FrameKv>, tokens: &[u32]) -> Result<()> {
        self.insert(frame.frame_index, tokens)
    }
}

/// Layer-agnostic retrieval over frames `0..=max_frame` by cosine similarity
/// of frame and question embeddings.
pub fn retrieve_external(
    index: &ExternalIndex,
    max_frame: Option<u64>,
    question: &[u32],
    r: usize,
    b: usize,
    tau: f32,
) -> Result<RetrievalResult> {
    let vectors = index.frame_vectors(max_frame)?;
    if vectors.is_empty() {
        return Ok(RetrievalResult::empty(None, r, b, tau));
    }
    let q = QuestionVector {
        layer: None,
        vector: index.embedder.embed_text(question)?,
    };
    retrieve(&vectors, &q, r, b, tau)
}
