//! Model and run configuration, loadable from flat `key = value` files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionMode {
    /// Every projection drawn from the seeded generator.
    #[default]
    RandomSeeded,
    /// Query and key projections fixed to the identity, so key space equals
    /// query space. Value/output projections stay random.
    DiagnosticIdentity,
}

/// Shape and window parameters of the toy decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub tokens_per_frame: usize,
    pub vocab_size: usize,
    /// Sliding-window length in tokens.
    pub local_window: usize,
    /// Maximum tokens encoded per chunk.
    pub chunk_size: usize,
    /// Scalar width used by size accounting (2 for FP16-shaped reports).
    pub bytes_per_scalar: usize,
    pub rope_base: f64,
    pub projection_mode: ProjectionMode,
    /// Adds a fixed two-layer ReLU MLP after each attention sublayer.
    pub mlp: bool,
    /// Reserved end-of-answer token; `None` forces fixed-length decoding.
    pub eos_token: Option<u32>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 2,
            head_dim: 16,
            tokens_per_frame: 16,
            vocab_size: 256,
            local_window: 512,
            chunk_size: 64,
            bytes_per_scalar: 4,
            rope_base: 10000.0,
            projection_mode: ProjectionMode::RandomSeeded,
            mlp: false,
            eos_token: Some(0),
        }
    }
}

impl ModelConfig {
    pub fn model_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    /// Number of whole frames that fit in the sliding window.
    pub fn window_frames(&self) -> usize {
        self.local_window / self.tokens_per_frame
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("tokens_per_frame", self.tokens_per_frame),
            ("vocab_size", self.vocab_size),
            ("local_window", self.local_window),
            ("chunk_size", self.chunk_size),
            ("bytes_per_scalar", self.bytes_per_scalar),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config("head_dim must be even for rotary embedding".into()));
        }
        if self.chunk_size > self.local_window {
            return Err(Error::Config(format!(
                "chunk_size {} exceeds local_window {}",
                self.chunk_size, self.local_window
            )));
        }
        if !self.local_window.is_multiple_of(self.tokens_per_frame) {
            return Err(Error::Config(
                "local_window must be a whole number of frames".into(),
            ));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::Config("rope_base must exceed 1".into()));
        }
        if let Some(eos) = self.eos_token {
            if eos as usize >= self.vocab_size {
                return Err(Error::Config(format!("eos_token {eos} outside vocabulary")));
            }
        }
        Ok(())
    }
}

/// Which frames a question is answered from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    /// Per-layer retrieval with the model's own keys and queries.
    #[default]
    Internal,
    /// One layer-agnostic retrieval with the external embedder.
    External,
    /// Evenly spaced frames, ignoring the question.
    Uniform,
    /// The labelled relevant frames.
    Oracle,
    /// Every admitted frame.
    All,
}

impl std::str::FromStr for RetrievalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "internal" => Ok(Self::Internal),
            "external" => Ok(Self::External),
            "uniform" => Ok(Self::Uniform),
            "oracle" => Ok(Self::Oracle),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!("unknown retrieval mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Internal => "internal",
            Self::External => "external",
            Self::Uniform => "uniform",
            Self::Oracle => "oracle",
            Self::All => "all",
        };
        f.write_str(s)
    }
}

/// Positions given to retrieved video tokens at answer time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionPolicy {
    /// Retrieved tokens take positions `0, 1, 2, …` in context order.
    #[default]
    Consecutive,
    /// All retrieved tokens share position 0; the question starts at 1.
    Static,
}

impl std::str::FromStr for PositionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "consecutive" => Ok(Self::Consecutive),
            "static" => Ok(Self::Static),
            other => Err(Error::Config(format!("unknown position policy {other:?}"))),
        }
    }
}

/// Whether frame and question vectors are pooled before or after rotary
/// rotation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyPooling {
    /// Average unrotated projections (rotation undone on stored keys).
    #[default]
    PreRope,
    /// Average the keys as stored; question queries rotated at the
    /// positions they would occupy at the end of the stream.
    PostRope,
}

/// Retrieval parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub mode: RetrievalMode,
    /// Frames to retrieve.
    pub r: usize,
    /// Frames per block.
    pub b: usize,
    /// Temperature of the external path; the internal path always uses 1.
    pub tau: f32,
    pub key_pooling: KeyPooling,
    pub position_policy: PositionPolicy,
    pub embed_dim: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            mode: RetrievalMode::Internal,
            r: 64,
            b: 1,
            tau: 1.0,
            key_pooling: KeyPooling::PreRope,
            position_policy: PositionPolicy::Consecutive,
            embed_dim: 64,
        }
    }
}

/// Everything a run needs, as read from a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub fps: f64,
    /// Frames permanently kept in the hot window.
    pub sink_frames: usize,
    /// Resident-byte budget of the RAM tier before frames move to disk.
    pub ram_budget_bytes: Option<u64>,
    pub max_new_tokens: usize,
    /// Largest sequence the dense reference will encode.
    pub oracle_max_tokens: usize,
    pub workers: usize,
    pub queue_capacity: usize,
    pub model: ModelConfig,
    pub retrieval: RetrievalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fps: 0.5,
            sink_frames: 1,
            ram_budget_bytes: None,
            max_new_tokens: 8,
            oracle_max_tokens: 4096,
            workers: 2,
            queue_capacity: 64,
            model: ModelConfig::default(),
            retrieval: RetrievalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Config(format!("fps must be positive, got {}", self.fps)));
        }
        if self.workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        if self.queue_capacity == 0 {
            return Err(Error::Config("queue capacity must be at least 1".into()));
        }
        if self.retrieval.b == 0 {
            return Err(Error::Config("block size b must be at least 1".into()));
        }
        if !(self.retrieval.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults() {
        let c = ModelConfig::default();
        assert_eq!((c.num_layers, c.num_heads, c.head_dim, c.tokens_per_frame), (4, 2, 16, 16));
        assert_eq!((c.vocab_size, c.local_window, c.chunk_size), (256, 512, 64));
        assert_eq!(c.window_frames(), 32);
        c.validate().unwrap();
    }

    #[test]
    fn parses_flat_keys() {
        let cfg = RunConfig::from_toml_str(
            "seed = 9\nfps = 1.0\n[model]\nnum_layers = 2\nprojection_mode = \"diagnostic-identity\"\n[retrieval]\nmode = \"external\"\nr = 8\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.num_layers, 2);
        assert_eq!(cfg.model.projection_mode, ProjectionMode::DiagnosticIdentity);
        assert_eq!(cfg.retrieval.mode, RetrievalMode::External);
        assert_eq!(cfg.retrieval.r, 8);
        let again = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = ModelConfig::default();
        c.chunk_size = 1024;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(RunConfig::from_toml_str("workers = 0").is_err());
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
        assert!("sideways".parse::<RetrievalMode>().is_err());
    }
}
