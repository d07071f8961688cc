//! On-disk block format for one frame.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "RKV1"
//! 4       4     version (u32, currently 1)
//! 8       4     layers L (u32)
//! 12      4     tokens per frame M (u32)
//! 16      4     heads H (u32)
//! 20      4     head dim D (u32)
//! 24      8     frame index (u64)
//! 32      8     timestamp seconds (f64)
//! 40      8     first encode position (u64)
//! 48      …     per layer: M·H·D key floats, then M·H·D value floats (f32)
//! end-8   8     CRC-64/XZ of every preceding byte (u64)
//! ```
//!
//! All integers and floats are little-endian.

use crc::{Crc, CRC_64_XZ};

use crate::error::{Error, Result};
use crate::model::LayerKv;
use crate::tensor::Matrix;

use super::FrameKv;

pub const MAGIC: &[u8; 4] = b"RKV1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 48;
pub const CHECKSUM_LEN: usize = 8;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

/// Tensor geometry shared by every frame of a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlockShape {
    pub layers: usize,
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl BlockShape {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Bytes of K and V floats in one frame.
    pub fn payload_bytes(&self) -> usize {
        2 * self.layers * self.tokens * self.heads * self.head_dim * 4
    }

    pub fn file_bytes(&self) -> usize {
        HEADER_LEN + self.payload_bytes() + CHECKSUM_LEN
    }
}

pub fn checksum(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

pub fn encode(frame: &FrameKv, shape: &BlockShape) -> Result<Vec<u8>> {
    frame.check_shape(shape)?;
    let mut out = Vec::with_capacity(shape.file_bytes());
    out.extend_from_slice(MAGIC);
    for v in [VERSION, shape.layers as u32, shape.tokens as u32, shape.heads as u32, shape.head_dim as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&frame.frame_index.to_le_bytes());
    out.extend_from_slice(&frame.timestamp.to_le_bytes());
    out.extend_from_slice(&frame.encode_position_start.to_le_bytes());
    for layer in &frame.layers {
        for m in [&layer.keys, &layer.values] {
            for x in m.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

/// Decodes a block that should hold frame `expected`. Any mismatch is
/// reported as corruption of that frame.
pub fn decode(bytes: &[u8], expected: u64, shape: &BlockShape) -> Result<FrameKv> {
    let corrupt = |reason: String| Error::Corruption {
        frame: expected,
        reason,
    };
    if bytes.len() != shape.file_bytes() {
        return Err(corrupt(format!(
            "block is {} bytes, expected {}",
            bytes.len(),
            shape.file_bytes()
        )));
    }
    let body = &bytes[..bytes.len() - CHECKSUM_LEN];
    let stored = u64_at(bytes, bytes.len() - CHECKSUM_LEN);
    let actual = checksum(body);
    if stored != actual {
        return Err(corrupt(format!(
            "checksum mismatch (stored {stored:#018x}, computed {actual:#018x})"
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let dims = [u32_at(bytes, 8), u32_at(bytes, 12), u32_at(bytes, 16), u32_at(bytes, 20)];
    let want = [shape.layers, shape.tokens, shape.heads, shape.head_dim].map(|v| v as u32);
    if dims != want {
        return Err(corrupt(format!("shape {dims:?} does not match {want:?}")));
    }
    let frame_index = u64_at(bytes, 24);
    if frame_index != expected {
        return Err(corrupt(format!("header names frame {frame_index}")));
    }
    let timestamp = f64::from_le_bytes(bytes[32..40].try_into().expect("8 bytes"));
    let encode_position_start = u64_at(bytes, 40);

    let per = shape.tokens * shape.width();
    let mut floats = body[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut layers = Vec::with_capacity(shape.layers);
    for _ in 0..shape.layers {
        let keys: Vec<f32> = floats.by_ref().take(per).collect();
        let values: Vec<f32> = floats.by_ref().take(per).collect();
        layers.push(LayerKv {
            keys: Matrix::new(shape.tokens, shape.width(), keys).map_err(|e| corrupt(e.to_string()))?,
            values: Matrix::new(shape.tokens, shape.width(), values).map_err(|e| corrupt(e.to_string()))?,
        });
    }
    Ok(FrameKv {
        frame_index,
        timestamp,
        encode_position_start,
        layers,
    })
}
