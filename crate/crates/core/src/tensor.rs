//! Dense kernels over flat row-major `f32` storage.
//!
//! Storage is 32-bit; every reduction (dot products, softmax, weighted sums)
//! accumulates in 64-bit. Each output row is computed from its own inputs
//! only, in a fixed key order, so a row's value never depends on which other
//! rows were computed in the same call.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::par;

/// Row-major matrix of finite `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Degenerate(format!("non-finite entry at {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// An empty matrix with a fixed column count, for growing row by row.
    pub fn empty(cols: usize) -> Self {
        Self::zeros(0, cols)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::Shape(format!(
                "row of length {} pushed into {}-column matrix",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn append(&mut self, other: &Matrix) -> Result<()> {
        if other.cols != self.cols {
            return Err(Error::Shape(format!(
                "cannot append {}-column rows to {}-column matrix",
                other.cols, self.cols
            )));
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    /// Drops the first `n` rows.
    pub fn drop_front(&mut self, n: usize) {
        let n = n.min(self.rows);
        self.data.drain(..n * self.cols);
        self.rows -= n;
    }

    /// Copy of rows `range`.
    pub fn slice_rows(&self, range: Range<usize>) -> Matrix {
        Matrix {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Option<f32> {
        if self.rows != other.rows || self.cols != other.cols {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max),
        )
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot add {}x{} to {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Row-major matrix product with 64-bit accumulation.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    if b.cols == 0 {
        return Ok(out);
    }
    par::for_each_chunk_mut(&mut out.data, b.cols, |i, out_row| {
        let mut acc = vec![0.0f64; b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            let aik = f64::from(aik);
            for (slot, &bkj) in acc.iter_mut().zip(b.row(k)) {
                *slot += aik * f64::from(bkj);
            }
        }
        for (o, s) in out_row.iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    });
    Ok(out)
}

/// `x · m` for a single row vector.
pub fn vec_mat(x: &[f32], m: &Matrix) -> Result<Vec<f32>> {
    let xm = Matrix::new(1, x.len(), x.to_vec())?;
    Ok(matmul(&xm, m)?.data)
}

pub(crate) fn dot_f64(u: &[f32], v: &[f32]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum()
}

/// Numerically stable softmax of one row.
pub fn softmax_row(x: &[f32]) -> Result<Vec<f32>> {
    if x.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("softmax of non-finite input".into()));
    }
    let mut buf: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
    softmax_in_place(&mut buf);
    Ok(buf.into_iter().map(|v| v as f32).collect())
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Temperature-scaled cosine similarity `(u·v) / (tau |u| |v|)`.
pub fn cosine_sim(u: &[f32], v: &[f32], tau: f32) -> Result<f32> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine of {}-dim and {}-dim vectors",
            u.len(),
            v.len()
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let nu = dot_f64(u, u).sqrt();
    let nv = dot_f64(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok((dot_f64(u, v) / (f64::from(tau) * nu * nv)) as f32)
}

/// Rotary position embedding over consecutive pairs `(2i, 2i+1)` of each
/// head, with frequency `base^(-2i/head_dim)`.
#[derive(Clone, Debug)]
pub struct Rope {
    head_dim: usize,
    inv_freq: Vec<f64>,
}

impl Rope {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rotary head dimension must be even and positive, got {head_dim}"
            )));
        }
        if !(base > 1.0) {
            return Err(Error::Config(format!("rotary base must exceed 1, got {base}")));
        }
        let inv_freq = (0..head_dim / 2)
            .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
            .collect();
        Ok(Self { head_dim, inv_freq })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Rotates `x` in place by `position` (which may be negative or
    /// fractional). A zero position leaves `x` bit-for-bit unchanged.
    pub fn rotate(&self, x: &mut [f32], position: f64) -> Result<()> {
        if !x.len().is_multiple_of(self.head_dim) {
            return Err(Error::Shape(format!(
                "vector of length {} is not a whole number of {}-dim heads",
                x.len(),
                self.head_dim
            )));
        }
        if position == 0.0 {
            return Ok(());
        }
        let (sin, cos): (Vec<f64>, Vec<f64>) = self
            .inv_freq
            .iter()
            .map(|f| (position * f).sin_cos())
            .unzip();
        for head in x.chunks_exact_mut(self.head_dim) {
            for (i, pair) in head.chunks_exact_mut(2).enumerate() {
                let (a, b) = (f64::from(pair[0]), f64::from(pair[1]));
                pair[0] = (a * cos[i] - b * sin[i]) as f32;
                pair[1] = (a * sin[i] + b * cos[i]) as f32;
            }
        }
        Ok(())
    }

    /// Rotates every row `i` of `m` by `positions[i]`.
    pub fn rotate_rows(&self, m: &mut Matrix, positions: &[f64]) -> Result<()> {
        if positions.len() != m.rows() {
            return Err(Error::Shape(format!(
                "{} positions for {} rows",
                positions.len(),
                m.rows()
            )));
        }
        for (i, &p) in positions.iter().enumerate() {
            self.rotate(m.row_mut(i), p)?;
        }
        Ok(())
    }
}

/// Applies rotary embedding to `x` at `position`.
pub fn rope_apply(x: &[f32], position: u64, head_dim: usize, base: f64) -> Result<Vec<f32>> {
    let rope = Rope::new(head_dim, base)?;
    let mut out = x.to_vec();
    rope.rotate(&mut out, position as f64)?;
    Ok(out)
}

/// Keys a query row may attend to: rows `start..end` of the key matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeyRange {
    pub start: usize,
    pub end: usize,
}

impl KeyRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    /// Causal mask for `n` queries appended after `offset` earlier keys.
    pub fn causal(n: usize, offset: usize) -> Vec<KeyRange> {
        (0..n).map(|i| KeyRange::new(0, offset + i + 1)).collect()
    }
}

/// Which query vector scores a segment's keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum QuerySlot {
    Primary,
    Alternate,
}

/// A contiguous run of keys/values seen by one query row.
#[derive(Clone, Debug)]
pub(crate) struct KeySegment<'a> {
    pub keys: &'a Matrix,
    pub values: &'a Matrix,
    pub rows: Range<usize>,
    pub query: QuerySlot,
}

/// Multi-head attention for one query row over `segments`, in segment
/// order. Writes `num_heads * head_dim` values into `out` and returns the
/// number of keys attended.
pub(crate) fn attend_row(
    query: &[f32],
    alternate: Option<&[f32]>,
    segments: &[KeySegment<'_>],
    num_heads: usize,
    out: &mut [f32],
) -> usize {
    let width = query.len();
    let head_dim = width / num_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let n_keys: usize = segments.iter().map(|s| s.rows.len()).sum();
    let mut weights = vec![0.0f64; n_keys];
    let mut acc = vec![0.0f64; head_dim];
    for h in 0..num_heads {
        let cols = h * head_dim..(h + 1) * head_dim;
        let mut j = 0;
        for seg in segments {
            let q = match seg.query {
                QuerySlot::Primary => query,
                QuerySlot::Alternate => alternate.unwrap_or(query),
            };
            let q = &q[cols.clone()];
            for r in seg.rows.clone() {
                weights[j] = dot_f64(q, &seg.keys.row(r)[cols.clone()]) * scale;
                j += 1;
            }
        }
        softmax_in_place(&mut weights);
        acc.iter_mut().for_each(|a| *a = 0.0);
        let mut j = 0;
        for seg in segments {
            for r in seg.rows.clone() {
                let w = weights[j];
                for (a, &v) in acc.iter_mut().zip(&seg.values.row(r)[cols.clone()]) {
                    *a += w * f64::from(v);
                }
                j += 1;
            }
        }
        for (o, a) in out[cols].iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    n_keys
}

/// Multi-head scaled dot-product attention where query row `i` sees keys
/// `mask[i]`.
pub fn multi_head_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    num_heads: usize,
    mask: &[KeyRange],
) -> Result<Matrix> {
    if k.rows != v.rows {
        return Err(Error::Shape(format!(
            "{} keys but {} values",
            k.rows, v.rows
        )));
    }
    if q.cols != k.cols {
        return Err(Error::Shape(format!(
            "query width {} differs from key width {}",
            q.cols, k.cols
        )));
    }
    if num_heads == 0 || !q.cols.is_multiple_of(num_heads) || v.cols != q.cols {
        return Err(Error::Shape(format!(
            "width {} (values {}) does not split into {num_heads} heads",
            q.cols, v.cols
        )));
    }
    if mask.len() != q.rows {
        return Err(Error::Shape(format!(
            "{} mask rows for {} queries",
            mask.len(),
            q.rows
        )));
    }
    for (row, m) in mask.iter().enumerate() {
        if m.start >= m.end || m.end > k.rows {
            return Err(Error::Masking { row });
        }
    }
    let mut out = Matrix::zeros(q.rows, v.cols);
    if q.rows == 0 {
        return Ok(out);
    }
    par::for_each_chunk_mut(&mut out.data, v.cols, |i, out_row| {
        let seg = [KeySegment {
            keys: k,
            values: v,
            rows: mask[i].start..mask[i].end,
            query: QuerySlot::Primary,
        }];
        attend_row(q.row(i), None, &seg, num_heads, out_row);
    });
    Ok(out)
}

/// Single-head `softmax(QKᵀ/√d + mask)·V`.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix, mask: &[KeyRange]) -> Result<Matrix> {
    multi_head_attention(q, k, v, 1, mask)
}
