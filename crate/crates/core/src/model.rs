//! Deterministic, untrained attention-only causal decoder.
//!
//! Layer `ℓ` maps hidden states `h` to `h + Attn(h)·W_O` (plus an optional
//! fixed ReLU MLP). Queries and keys are rotated with RoPE at their absolute
//! positions before attention; keys are kept rotated in every cache.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{ModelConfig, ProjectionMode};
use crate::error::{Error, Result};
use crate::tensor::{self, KeyRange, Matrix, Rope};

/// Key/value rows of one layer. Keys are post-RoPE.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv {
    pub keys: Matrix,
    pub values: Matrix,
}

impl LayerKv {
    pub fn empty(width: usize) -> Self {
        Self {
            keys: Matrix::empty(width),
            values: Matrix::empty(width),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn append(&mut self, other: &LayerKv) -> Result<()> {
        self.keys.append(&other.keys)?;
        self.values.append(&other.values)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub mlp: Option<(Matrix, Matrix)>,
}

/// Raw (unrotated) projections of a block of hidden states.
pub(crate) struct Projections {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

/// Number of keys each query row attended to in a forward call.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttentionProbe {
    pub keys_per_query: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    config: ModelConfig,
    seed: u64,
    embedding: Matrix,
    head: Matrix,
    layers: Vec<LayerWeights>,
    rope: Rope,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Matrix::new(rows, cols, data).expect("generated shape")
}

/// Builds the model. Weights come from a ChaCha8 stream seeded with `seed`,
/// drawn in a fixed order: embedding table, then per layer `W_Q, W_K, W_V,
/// W_O` (and the MLP pair when enabled), then the output head. Projection
/// entries are standard normal scaled by `1/√model_dim`; embeddings are
/// unscaled.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ToyModel> {
    config.validate()?;
    let dim = config.model_dim();
    let scale = 1.0 / (dim as f32).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embedding = gaussian(&mut rng, config.vocab_size, dim, 1.0);
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        let mut w_q = gaussian(&mut rng, dim, dim, scale);
        let mut w_k = gaussian(&mut rng, dim, dim, scale);
        let w_v = gaussian(&mut rng, dim, dim, scale);
        let w_o = gaussian(&mut rng, dim, dim, scale);
        let mlp = config.mlp.then(|| {
            let w1 = gaussian(&mut rng, dim, 2 * dim, scale);
            let w2 = gaussian(&mut rng, 2 * dim, dim, 1.0 / (2.0 * dim as f32).sqrt());
            (w1, w2)
        });
        if config.projection_mode == ProjectionMode::DiagnosticIdentity {
            w_q = Matrix::identity(dim);
            w_k = Matrix::identity(dim);
        }
        layers.push(LayerWeights {
            w_q,
            w_k,
            w_v,
            w_o,
            mlp,
        });
    }
    let head = gaussian(&mut rng, dim, config.vocab_size, scale);
    let rope = Rope::new(config.head_dim, config.rope_base)?;
    Ok(ToyModel {
        config: config.clone(),
        seed,
        embedding,
        head,
        layers,
        rope,
    })
}

impl ToyModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rope(&self) -> &Rope {
        &self.rope
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn width(&self) -> usize {
        self.config.model_dim()
    }

    #[cfg(test)]
    pub(crate) fn weights(&self, layer: usize) -> &LayerWeights {
        &self.layers[layer]
    }

    /// Flattened view of every weight, in draw order.
    pub fn weight_fingerprint(&self) -> Vec<u32> {
        let mut out: Vec<u32> = self.embedding.data().iter().map(|x| x.to_bits()).collect();
        for l in &self.layers {
            for m in [&l.w_q, &l.w_k, &l.w_v, &l.w_o] {
                out.extend(m.data().iter().map(|x| x.to_bits()));
            }
        }
        out.extend(self.head.data().iter().map(|x| x.to_bits()));
        out
    }

    pub fn query_projection(&self, layer: usize) -> &Matrix {
        &self.layers[layer].w_q
    }

    pub fn key_projection(&self, layer: usize) -> &Matrix {
        &self.layers[layer].w_k
    }

    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Matrix> {
        let dim = self.width();
        let mut out = Matrix::empty(dim);
        for &id in ids {
            if id as usize >= self.config.vocab_size {
                return Err(Error::Vocab {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
            out.push_row(self.embedding.row(id as usize))?;
        }
        Ok(out)
    }

    pub(crate) fn project(&self, layer: usize, x: &Matrix) -> Result<Projections> {
        let w = &self.layers[layer];
        Ok(Projections {
            q: tensor::matmul(x, &w.w_q)?,
            k: tensor::matmul(x, &w.w_k)?,
            v: tensor::matmul(x, &w.w_v)?,
        })
    }

    pub(crate) fn rotate_at(&self, m: &mut Matrix, positions: &[u64]) -> Result<()> {
        let pos: Vec<f64> = positions.iter().map(|&p| p as f64).collect();
        self.rope.rotate_rows(m, &pos)
    }

    /// Residual update after attention: `h + attn·W_O`, then the optional
    /// MLP. `attn` is the raw attention output (before `W_O`).
    pub(crate) fn finish_layer(&self, layer: usize, hidden: &mut Matrix, attn: &Matrix) -> Result<()> {
        let w = &self.layers[layer];
        let out = tensor::matmul(attn, &w.w_o)?;
        hidden.add_assign(&out)?;
        if let Some((w1, w2)) = &w.mlp {
            let mut mid = tensor::matmul(hidden, w1)?;
            let mid_data: Vec<f32> = mid.data().iter().map(|&x| x.max(0.0)).collect();
            mid = Matrix::new(mid.rows(), mid.cols(), mid_data)?;
            hidden.add_assign(&tensor::matmul(&mid, w2)?)?;
        }
        Ok(())
    }

    /// One attention sublayer over `[past ‖ new]` with causal masking.
    /// Returns the output after `W_O` and the rotated K/V rows of `x`.
    pub fn layer_forward(
        &self,
        layer: usize,
        x: &Matrix,
        past: &LayerKv,
        positions: &[u64],
    ) -> Result<(Matrix, LayerKv)> {
        let (out, kv, _) = self.layer_forward_probe(layer, x, past, positions)?;
        Ok((out, kv))
    }

    /// [`layer_forward`](Self::layer_forward) that also reports how many
    /// keys each query saw.
    pub fn layer_forward_probe(
        &self,
        layer: usize,
        x: &Matrix,
        past: &LayerKv,
        positions: &[u64],
    ) -> Result<(Matrix, LayerKv, AttentionProbe)> {
        if layer >= self.layers.len() {
            return Err(Error::Shape(format!("layer {layer} out of range")));
        }
        if positions.len() != x.rows() {
            return Err(Error::Shape(format!(
                "{} positions for {} tokens",
                positions.len(),
                x.rows()
            )));
        }
        if x.cols() != self.width() || past.keys.cols() != self.width() {
            return Err(Error::Shape("hidden width differs from model width".into()));
        }
        let Projections { mut q, mut k, v } = self.project(layer, x)?;
        self.rotate_at(&mut q, positions)?;
        self.rotate_at(&mut k, positions)?;
        let new_kv = LayerKv { keys: k, values: v };
        let mut all = past.clone();
        all.append(&new_kv)?;
        let mask = KeyRange::causal(x.rows(), past.len());
        let attn = tensor::multi_head_attention(&q, &all.keys, &all.values, self.config.num_heads, &mask)?;
        let out = tensor::matmul(&attn, &self.layers[layer].w_o)?;
        let probe = AttentionProbe {
            keys_per_query: mask.iter().map(|m| m.end - m.start).collect(),
        };
        Ok((out, new_kv, probe))
    }

    /// Output-head scores for one hidden vector.
    pub fn logits(&self, hidden: &[f32]) -> Result<Vec<f32>> {
        if hidden.len() != self.width() {
            return Err(Error::Shape(format!(
                "hidden of width {} for model width {}",
                hidden.len(),
                self.width()
            )));
        }
        tensor::vec_mat(hidden, &self.head)
    }

    /// Dense single-pass causal forward over `tokens` at positions
    /// `0..n`, with no window. The reference every cached path is checked
    /// against.
    pub fn forward_dense(&self, tokens: &[u32]) -> Result<DenseForward> {
        let mut hidden = self.embed_tokens(tokens)?;
        let positions: Vec<u64> = (0..tokens.len() as u64).collect();
        let mut layer_kv = Vec::with_capacity(self.num_layers());
        let mut layer_outputs = Vec::with_capacity(self.num_layers());
        for layer in 0..self.num_layers() {
            let Projections { mut q, mut k, v } = self.project(layer, &hidden)?;
            self.rotate_at(&mut q, &positions)?;
            self.rotate_at(&mut k, &positions)?;
            let attn = if tokens.is_empty() {
                Matrix::empty(self.width())
            } else {
                tensor::multi_head_attention(
                    &q,
                    &k,
                    &v,
                    self.config.num_heads,
                    &KeyRange::causal(tokens.len(), 0),
                )?
            };
            self.finish_layer(layer, &mut hidden, &attn)?;
            layer_kv.push(LayerKv { keys: k, values: v });
            layer_outputs.push(hidden.clone());
        }
        Ok(DenseForward {
            layer_kv,
            layer_outputs,
        })
    }
}

/// Result of [`ToyModel::forward_dense`].
#[derive(Clone, Debug)]
pub struct DenseForward {
    /// Rotated K/V of every token, per layer.
    pub layer_kv: Vec<LayerKv>,
    /// Hidden states after each layer.
    pub layer_outputs: Vec<Matrix>,
}

impl DenseForward {
    pub fn final_hidden(&self) -> Option<&Matrix> {
        self.layer_outputs.last()
    }
}
