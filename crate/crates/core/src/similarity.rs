//! Scoring kernels: global CLS similarity, token-wise and bag-wise MaxSim,
//! dense batch scoring, and word-patch heat maps.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, norm, EmbeddingMatrix, UNIT_TOL};
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMode {
    Global,
    TokenWise,
    BagWise,
}

impl ScoringMode {
    pub const ALL: [ScoringMode; 3] = [Self::Global, Self::TokenWise, Self::BagWise];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Global => "global",
            Self::TokenWise => "tokenwise",
            Self::BagWise => "bagwise",
        }
    }

    pub fn is_late(self) -> bool {
        !matches!(self, Self::Global)
    }
}

impl fmt::Display for ScoringMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnsupportedMode(s.to_string()))
    }
}

/// Which side is the query: image-to-text or text-to-image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    I2t,
    T2i,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::I2t => "i2t",
            Self::T2i => "t2i",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i2t" => Ok(Self::I2t),
            "t2i" => Ok(Self::T2i),
            other => Err(Error::InvalidConfig(format!("unknown direction {other:?}"))),
        }
    }
}

/// Per-row validity flags; padded rows never take part in a max.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaddingMask(Vec<bool>);

impl PaddingMask {
    pub fn new(valid: Vec<bool>) -> Self {
        Self(valid)
    }

    pub fn all_valid(rows: usize) -> Self {
        Self(vec![true; rows])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_valid(&self, row: usize) -> bool {
        self.0[row]
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    pub fn valid_count(&self) -> usize {
        self.0.iter().filter(|v| **v).count()
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.then_some(i))
            .collect()
    }
}

/// Queries x candidates score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    queries: usize,
    candidates: usize,
    scores: Vec<f64>,
    mode: ScoringMode,
}

impl SimilarityMatrix {
    pub fn new(queries: usize, candidates: usize, scores: Vec<f64>, mode: ScoringMode) -> Result<Self> {
        check_dim(queries * candidates, scores.len())?;
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidMatrix("non-finite score".into()));
        }
        Ok(Self {
            queries,
            candidates,
            scores,
            mode,
        })
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn candidates(&self) -> usize {
        self.candidates
    }

    pub fn mode(&self) -> ScoringMode {
        self.mode
    }

    pub fn get(&self, q: usize, c: usize) -> f64 {
        self.scores[q * self.candidates + c]
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.scores[q * self.candidates..(q + 1) * self.candidates]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn is_square(&self) -> bool {
        self.queries == self.candidates
    }
}

/// Late-interaction rows of one item (patches, tokens or bags) with padding.
#[derive(Debug, Clone, PartialEq)]
pub struct LateMatrix {
    pub rows: EmbeddingMatrix,
    pub mask: PaddingMask,
}

impl LateMatrix {
    pub fn new(rows: EmbeddingMatrix, mask: PaddingMask) -> Result<Self> {
        check_dim(rows.rows(), mask.len())?;
        Ok(Self { rows, mask })
    }

    pub fn unpadded(rows: EmbeddingMatrix) -> Self {
        let mask = PaddingMask::all_valid(rows.rows());
        Self { rows, mask }
    }

    /// Only the valid rows, for use on the query side of MaxSim.
    pub fn compact(&self) -> EmbeddingMatrix {
        if self.mask.valid_count() == self.mask.len() {
            self.rows.clone()
        } else {
            self.rows.select_rows(&self.mask.valid_indices())
        }
    }
}

/// A scored item: global CLS vector plus optional late-interaction rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbedding {
    pub id: String,
    pub cls: Vec<f64>,
    pub late: Option<LateMatrix>,
}

fn check_unit(v: &[f64]) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_TOL {
        Err(Error::NotNormalized(n))
    } else {
        Ok(())
    }
}

/// Global similarity of two L2-normalized CLS vectors.
pub fn global_similarity(img_cls: &[f64], txt_cls: &[f64]) -> Result<f64> {
    check_dim(img_cls.len(), txt_cls.len())?;
    check_unit(img_cls)?;
    check_unit(txt_cls)?;
    Ok(dot(img_cls, txt_cls))
}

/// Mean over `query` rows of the best inner product with any valid
/// `cand` row. Shared body of every MaxSim variant.
pub(crate) fn maxsim(query: &EmbeddingMatrix, cand: &EmbeddingMatrix, mask: &PaddingMask) -> Result<f64> {
    check_dim(query.dim(), cand.dim())?;
    check_dim(cand.rows(), mask.len())?;
    if query.is_empty() || mask.valid_count() == 0 {
        return Err(Error::EmptyMask);
    }
    let valid = mask.flags();
    let mut total = 0.0;
    for q in query.iter_rows() {
        let mut best = f64::NEG_INFINITY;
        for (c, ok) in cand.iter_rows().zip(valid) {
            if *ok {
                let s = dot(q, c);
                if s > best {
                    best = s;
                }
            }
        }
        total += best;
    }
    Ok(total / query.rows() as f64)
}

/// Image-to-text bag-wise similarity: each visual token (CLS excluded) takes
/// its best valid bag, averaged over visual tokens.
pub fn maxsim_i2t(visual: &EmbeddingMatrix, bags: &EmbeddingMatrix, mask: &PaddingMask) -> Result<f64> {
    maxsim(visual, bags, mask)
}

/// Text-to-image bag-wise similarity: each bag takes its best valid visual
/// token, averaged over bags.
pub fn maxsim_t2i(bags: &EmbeddingMatrix, visual: &EmbeddingMatrix, mask: &PaddingMask) -> Result<f64> {
    maxsim(bags, visual, mask)
}

/// MaxSim over raw token rows (no bagging layer).
pub fn tokenwise_maxsim(a: &EmbeddingMatrix, b: &EmbeddingMatrix, mask: &PaddingMask) -> Result<f64> {
    maxsim(a, b, mask)
}

/// Scores a prepared query against one candidate. `query_late` must
/// already be compacted to valid rows.
pub(crate) fn score_pair(
    query_cls: &[f64],
    query_late: Option<&EmbeddingMatrix>,
    cand: &ItemEmbedding,
    mode: ScoringMode,
    direction: Direction,
) -> Result<f64> {
    match mode {
        ScoringMode::Global => {
            check_dim(query_cls.len(), cand.cls.len())?;
            Ok(dot(query_cls, &cand.cls))
        }
        ScoringMode::TokenWise | ScoringMode::BagWise => {
            let q = query_late.ok_or_else(|| Error::MissingLateMatrix("<query>".into()))?;
            let c = cand
                .late
                .as_ref()
                .ok_or_else(|| Error::MissingLateMatrix(cand.id.clone()))?;
            match (mode, direction) {
                (ScoringMode::TokenWise, _) => tokenwise_maxsim(q, &c.rows, &c.mask),
                (_, Direction::I2t) => maxsim_i2t(q, &c.rows, &c.mask),
                (_, Direction::T2i) => maxsim_t2i(q, &c.rows, &c.mask),
            }
        }
    }
}

/// Dense queries x candidates scores. Cells are independent, so the
/// parallel evaluation is bit-identical to a sequential loop.
pub fn score_batch(
    queries: &[ItemEmbedding],
    cands: &[ItemEmbedding],
    mode: ScoringMode,
    direction: Direction,
) -> Result<SimilarityMatrix> {
    let rows: Vec<Vec<f64>> = queries
        .par_iter()
        .map(|q| {
            let late = if mode.is_late() {
                let l = q
                    .late
                    .as_ref()
                    .ok_or_else(|| Error::MissingLateMatrix(q.id.clone()))?;
                Some(l.compact())
            } else {
                None
            };
            cands
                .iter()
                .map(|c| score_pair(&q.cls, late.as_ref(), c, mode, direction))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    SimilarityMatrix::new(queries.len(), cands.len(), rows.concat(), mode)
}

/// Per-patch activation of one bag over a `grid_h x grid_w` patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.grid_w + c]
    }

    /// Plain (P2) PGM, min-max scaled to 0..=255. A constant map is all zeros.
    pub fn to_pgm(&self) -> String {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let mut out = format!("P2\n{} {}\n255\n", self.grid_w, self.grid_h);
        for r in 0..self.grid_h {
            let line: Vec<String> = (0..self.grid_w)
                .map(|c| {
                    let v = if range > 0.0 {
                        ((self.get(r, c) - lo) / range * 255.0).round() as u8
                    } else {
                        0
                    };
                    v.to_string()
                })
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// Raw values, one grid row per line.
    pub fn to_raw_text(&self) -> String {
        let mut out = String::new();
        for r in 0..self.grid_h {
            let line: Vec<String> = (0..self.grid_w).map(|c| self.get(r, c).to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

pub fn heatmap(visual: &EmbeddingMatrix, bag: &[f64], grid_h: usize, grid_w: usize) -> Result<Heatmap> {
    if grid_h * grid_w != visual.rows() {
        return Err(Error::GridMismatch {
            grid_h,
            grid_w,
            rows: visual.rows(),
        });
    }
    check_dim(visual.dim(), bag.len())?;
    Ok(Heatmap {
        grid_h,
        grid_w,
        values: visual.iter_rows().map(|p| dot(p, bag)).collect(),
    })
}
