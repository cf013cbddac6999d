//! Embedding containers, projection heads and the toy text mixer.
//!
//! All arithmetic is `f64`. Matrices are row-major and immutable once built;
//! every operation returns a fresh matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Rows with a norm below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;
/// Tolerance on `|row| == 1` for matrices flagged as normalized.
pub const UNIT_TOL: f64 = 1e-6;

/// A sequence of `rows` vectors of width `dim`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMatrix("dim must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidMatrix(format!(
                "{} values is not a multiple of dim {dim}",
                data.len()
            )));
        }
        Ok(Self {
            rows: data.len() / dim,
            dim,
            data,
            normalized: false,
        })
    }

    pub fn zeros(rows: usize, dim: usize) -> Result<Self> {
        Self::new(dim, vec![0.0; rows * dim])
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new())
    }

    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let row = row.as_ref();
            check_dim(dim, row.len())?;
            data.extend_from_slice(row);
        }
        Self::new(dim, data)
    }

    /// Marks the matrix as normalized after checking every row has unit norm.
    pub fn assume_normalized(mut self) -> Result<Self> {
        for (i, row) in self.iter_rows().enumerate() {
            let n = norm(row);
            if n < ZERO_NORM {
                return Err(Error::ZeroRow(i));
            }
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::NotNormalized(n));
            }
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    /// Rows `start..end` as a new matrix; keeps the normalized flag.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            dim: self.dim,
            data: self.data[start * self.dim..end * self.dim].to_vec(),
            normalized: self.normalized,
        }
    }

    /// Rows at the given indices, in order; keeps the normalized flag.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            dim: self.dim,
            data,
            normalized: self.normalized,
        }
    }

    /// Stacks `first` on top of `self`.
    pub fn prepend_row(&self, first: &[f64]) -> Result<Self> {
        check_dim(self.dim, first.len())?;
        let mut data = Vec::with_capacity(self.data.len() + self.dim);
        data.extend_from_slice(first);
        data.extend_from_slice(&self.data);
        Self::new(self.dim, data)
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self {
            rows: self.rows,
            dim: self.dim,
            data: self.data.iter().map(|v| v * alpha).collect(),
            normalized: false,
        }
    }
}

/// Inner product with four independent accumulators so the loop vectorizes.
/// The summation order depends only on the length, so `dot(a, b)` and
/// `dot(b, a)` are bit-identical.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let (a4, a_tail) = a.split_at(a.len() / 4 * 4);
    let (b4, b_tail) = b.split_at(a4.len());
    for (x, y) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in a_tail.iter().zip(b_tail) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize_rows(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(m.data.len());
    for (i, row) in m.iter_rows().enumerate() {
        let n = norm(row);
        if n < ZERO_NORM {
            return Err(Error::ZeroRow(i));
        }
        data.extend(row.iter().map(|v| v / n));
    }
    Ok(EmbeddingMatrix {
        rows: m.rows,
        dim: m.dim,
        data,
        normalized: true,
    })
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n < ZERO_NORM {
        return Err(Error::ZeroRow(0));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Dense `dim_in x dim_out` weight, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMap {
    dim_in: usize,
    dim_out: usize,
    weight: Vec<f64>,
}

impl LinearMap {
    pub fn new(dim_in: usize, dim_out: usize, weight: Vec<f64>) -> Result<Self> {
        if dim_in == 0 || dim_out == 0 {
            return Err(Error::InvalidMatrix("weight dims must be positive".into()));
        }
        check_dim(dim_in * dim_out, weight.len())?;
        if weight.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidMatrix("non-finite weight".into()));
        }
        Ok(Self {
            dim_in,
            dim_out,
            weight,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self {
            dim_in: dim,
            dim_out: dim,
            weight,
        }
    }

    /// Gaussian entries with variance `1 / dim_in`.
    pub fn random(dim_in: usize, dim_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim_in as f64).sqrt();
        let weight = (0..dim_in * dim_out)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self {
            dim_in,
            dim_out,
            weight,
        }
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    /// `out = x · W` for a single row.
    pub fn apply_row(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (xi, wrow) in x.iter().zip(self.weight.chunks_exact(self.dim_out)) {
            if *xi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(wrow) {
                *o += xi * w;
            }
        }
    }

    fn apply(&self, m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        check_dim(self.dim_in, m.dim())?;
        let mut data = vec![0.0; m.rows() * self.dim_out];
        for (row, out) in m.iter_rows().zip(data.chunks_exact_mut(self.dim_out)) {
            self.apply_row(row, out);
        }
        EmbeddingMatrix::new(self.dim_out, data)
    }
}

/// Bias-free linear projection into the joint image/text space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProjectionHead(LinearMap);

impl ProjectionHead {
    pub fn new(map: LinearMap) -> Self {
        Self(map)
    }

    pub fn identity(dim: usize) -> Self {
        Self(LinearMap::identity(dim))
    }

    pub fn random(dim_in: usize, dim_out: usize, seed: u64) -> Self {
        Self(LinearMap::random(dim_in, dim_out, seed))
    }

    pub fn map(&self) -> &LinearMap {
        &self.0
    }

    pub fn map_mut(&mut self) -> &mut LinearMap {
        &mut self.0
    }

    pub fn dim_in(&self) -> usize {
        self.0.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.0.dim_out
    }
}

/// Projects every row; the result is not normalized.
pub fn project(m: &EmbeddingMatrix, head: &ProjectionHead) -> Result<EmbeddingMatrix> {
    head.0.apply(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
}

/// Frozen stand-in for a text encoder: `act(x · W)` applied row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyMixer {
    map: LinearMap,
    activation: Activation,
    seed: Option<u64>,
}

impl ToyMixer {
    /// The exact identity map.
    pub fn identity(dim: usize) -> Self {
        Self {
            map: LinearMap::identity(dim),
            activation: Activation::Identity,
            seed: None,
        }
    }

    /// Random Gaussian weight followed by `tanh`, fully determined by `seed`.
    pub fn seeded(dim: usize, seed: u64) -> Self {
        Self {
            map: LinearMap::random(dim, dim, seed),
            activation: Activation::Tanh,
            seed: Some(seed),
        }
    }

    pub fn dim(&self) -> usize {
        self.map.dim_in
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }
}

pub fn mix(m: &EmbeddingMatrix, mixer: &ToyMixer) -> Result<EmbeddingMatrix> {
    if mixer.activation == Activation::Identity && mixer.seed.is_none() {
        check_dim(mixer.dim(), m.dim())?;
        let mut out = m.clone();
        out.normalized = false;
        return Ok(out);
    }
    let mut out = mixer.map.apply(m)?;
    if mixer.activation == Activation::Tanh {
        out.data.iter_mut().for_each(|v| *v = v.tanh());
    }
    Ok(out)
}
