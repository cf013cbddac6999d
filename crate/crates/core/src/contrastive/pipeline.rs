//! Text encoding with the bagging layer placed before (early) or after
//! (late) the text mixer.
//!
//! The toy encoder has no CLS token of its own: the CLS input row is the
//! mean of the content token embeddings, passed through the same mixer and
//! projection as every other row and then L2-normalized. Bag rows are
//! normalized only when `renormalize` is set.

use serde::{Deserialize, Serialize};

use crate::bagging::{bag_cls_passthrough, segment, BaggingHelper, TokenId};
use crate::embedding::{l2_normalize, l2_normalize_rows, mix, project, EmbeddingMatrix, ProjectionHead, ToyMixer};
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaggingPlacement {
    /// Bag token embeddings, then run the mixer on bags.
    Early,
    /// Run the mixer on tokens, then bag the outputs.
    Late,
}

/// Looks up `tokens` in `table` and prepends the pooled CLS row.
pub fn lookup_tokens(tokens: &[TokenId], table: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if tokens.is_empty() {
        return Err(Error::InvalidConfig("empty token sequence".into()));
    }
    let dim = table.dim();
    let mut data = vec![0.0; (tokens.len() + 1) * dim];
    for (i, &t) in tokens.iter().enumerate() {
        let idx = t as usize;
        if idx >= table.rows() {
            return Err(Error::UnknownToken(t));
        }
        data[(i + 1) * dim..(i + 2) * dim].copy_from_slice(table.row(idx));
    }
    let n = tokens.len() as f64;
    let (cls, rest) = data.split_at_mut(dim);
    for row in rest.chunks_exact(dim) {
        for (c, v) in cls.iter_mut().zip(row) {
            *c += v;
        }
    }
    cls.iter_mut().for_each(|c| *c /= n);
    EmbeddingMatrix::new(dim, data)
}

fn finish(cls: &[f64], bags: EmbeddingMatrix, renormalize: bool) -> Result<(Vec<f64>, EmbeddingMatrix)> {
    let cls = l2_normalize(cls)?;
    let bags = if renormalize { l2_normalize_rows(&bags)? } else { bags };
    Ok((cls, bags))
}

/// Encodes one token sequence into a normalized CLS vector and bag rows in
/// the joint space.
///
/// Early: lookup, bag, mix, project. Late: lookup, mix, project, bag.
pub fn encode_text_pipeline(
    tokens: &[TokenId],
    table: &EmbeddingMatrix,
    mixer: &ToyMixer,
    helper: &BaggingHelper,
    head: &ProjectionHead,
    placement: BaggingPlacement,
    renormalize: bool,
) -> Result<(Vec<f64>, EmbeddingMatrix)> {
    check_dim(table.dim(), mixer.dim())?;
    check_dim(mixer.dim(), head.dim_in())?;
    let looked_up = lookup_tokens(tokens, table)?;
    let seg = segment(tokens, helper);
    match placement {
        BaggingPlacement::Early => {
            let (cls, bags) = bag_cls_passthrough(&looked_up, &seg)?;
            let stacked = bags.prepend_row(&cls)?;
            let projected = project(&mix(&stacked, mixer)?, head)?;
            let bags = projected.slice_rows(1, projected.rows());
            finish(projected.row(0), bags, renormalize)
        }
        BaggingPlacement::Late => {
            let projected = project(&mix(&looked_up, mixer)?, head)?;
            let (cls, bags) = bag_cls_passthrough(&projected, &seg)?;
            finish(&cls, bags, renormalize)
        }
    }
}

/// Frozen text features before projection: the mixed CLS row and one
/// summed row per bag. Projection is linear, so projecting these equals
/// projecting before summation.
pub fn text_features(
    tokens: &[TokenId],
    table: &EmbeddingMatrix,
    mixer: &ToyMixer,
    helper: &BaggingHelper,
    placement: BaggingPlacement,
) -> Result<(Vec<f64>, EmbeddingMatrix)> {
    check_dim(table.dim(), mixer.dim())?;
    let looked_up = lookup_tokens(tokens, table)?;
    let seg = segment(tokens, helper);
    match placement {
        BaggingPlacement::Early => {
            let (cls, bags) = bag_cls_passthrough(&looked_up, &seg)?;
            let mixed = mix(&bags.prepend_row(&cls)?, mixer)?;
            Ok((mixed.row(0).to_vec(), mixed.slice_rows(1, mixed.rows())))
        }
        BaggingPlacement::Late => bag_cls_passthrough(&mix(&looked_up, mixer)?, &seg),
    }
}
