//! Gradient-descent training of the two projection heads and the
//! temperature against `L_itc + lambda * L_bwc`, with frozen encoders.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{bwc_loss, itc_loss, LossReport, Temperature};
use super::pipeline::{text_features, BaggingPlacement};
use crate::bagging::{BaggingHelper, TokenId};
use crate::embedding::{dot, l2_normalize, l2_normalize_rows, norm, project, EmbeddingMatrix, LinearMap, ProjectionHead, ToyMixer, ZERO_NORM};
use crate::error::{check_dim, Error, Result};
use crate::similarity::{ItemEmbedding, LateMatrix, ScoringMode, SimilarityMatrix};

/// Frozen image encoder output: CLS row plus patch rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub cls: Vec<f64>,
    pub patches: EmbeddingMatrix,
}

impl ImageFeatures {
    /// Splits an encoder output whose row 0 is the CLS token.
    pub fn from_rows(rows: &EmbeddingMatrix) -> Result<Self> {
        if rows.rows() < 2 {
            return Err(Error::InvalidConfig("image needs a CLS row and at least one patch".into()));
        }
        Ok(Self {
            cls: rows.row(0).to_vec(),
            patches: rows.slice_rows(1, rows.rows()),
        })
    }
}

/// Frozen text encoder output before projection: CLS row plus one summed
/// row per bag.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    pub cls: Vec<f64>,
    pub bags: EmbeddingMatrix,
}

/// The frozen text side: token table, mixer, bagging helper and placement.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub table: EmbeddingMatrix,
    pub mixer: ToyMixer,
    pub helper: BaggingHelper,
    pub placement: BaggingPlacement,
}

impl TextEncoder {
    pub fn features(&self, tokens: &[TokenId]) -> Result<TextFeatures> {
        let (cls, bags) = text_features(tokens, &self.table, &self.mixer, &self.helper, self.placement)?;
        if bags.is_empty() {
            return Err(Error::InvalidConfig("text has no bags".into()));
        }
        Ok(TextFeatures { cls, bags })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub id: String,
    pub image: ImageFeatures,
    pub text: TextFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Pairs per batch; `0` means one batch with every pair.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `0` keeps the temperature fixed at `init_tau`.
    pub tau_learning_rate: f64,
    /// Weight of the bag-wise loss; `0` trains on ITC alone.
    pub lambda: f64,
    pub init_tau: f64,
    pub joint_dim: usize,
    pub seed: u64,
    pub renormalize_bags: bool,
    /// Learn a second temperature for the bag-wise loss.
    pub separate_bwc_tau: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 0,
            learning_rate: 2.0,
            tau_learning_rate: 0.0,
            lambda: 1.0,
            init_tau: 0.1,
            joint_dim: 64,
            seed: 0,
            renormalize_bags: true,
            separate_bwc_tau: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_itc: f64,
    pub l_bwc: f64,
    pub tau: f64,
}

impl EpochLoss {
    pub fn total(&self, lambda: f64) -> f64 {
        self.l_itc + lambda * self.l_bwc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub visual_head: ProjectionHead,
    pub text_head: ProjectionHead,
    pub tau: Temperature,
    pub tau_bwc: Option<Temperature>,
    pub renormalize_bags: bool,
    pub lambda: f64,
    pub history: Vec<EpochLoss>,
}

impl TrainedModel {
    pub fn embed_image(&self, id: &str, image: &ImageFeatures) -> Result<ItemEmbedding> {
        let cls = project_vec(&image.cls, self.visual_head.map())?;
        let patches = l2_normalize_rows(&project(&image.patches, &self.visual_head)?)?;
        Ok(ItemEmbedding {
            id: id.to_string(),
            cls: l2_normalize(&cls)?,
            late: Some(LateMatrix::unpadded(patches)),
        })
    }

    pub fn embed_text(&self, id: &str, text: &TextFeatures) -> Result<ItemEmbedding> {
        let cls = project_vec(&text.cls, self.text_head.map())?;
        let bags = project(&text.bags, &self.text_head)?;
        let bags = if self.renormalize_bags { l2_normalize_rows(&bags)? } else { bags };
        Ok(ItemEmbedding {
            id: id.to_string(),
            cls: l2_normalize(&cls)?,
            late: Some(LateMatrix::unpadded(bags)),
        })
    }

    /// Loss curve as `epoch,l_itc,l_bwc,tau` CSV.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,l_itc,l_bwc,tau\n");
        for e in &self.history {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.l_itc, e.l_bwc, e.tau));
        }
        out
    }
}

fn project_vec(x: &[f64], map: &LinearMap) -> Result<Vec<f64>> {
    check_dim(map.dim_in(), x.len())?;
    let mut out = vec![0.0; map.dim_out()];
    map.apply_row(x, &mut out);
    Ok(out)
}

/// A projected row, optionally normalized, remembering what backprop needs.
struct Node {
    unit: Vec<f64>,
    norm: Option<f64>,
}

impl Node {
    fn forward(x: &[f64], map: &LinearMap, normalize: bool) -> Result<Self> {
        let y = project_vec(x, map)?;
        if !normalize {
            return Ok(Self { unit: y, norm: None });
        }
        let n = norm(&y);
        if n < ZERO_NORM {
            return Err(Error::ZeroRow(0));
        }
        Ok(Self {
            unit: y.iter().map(|v| v / n).collect(),
            norm: Some(n),
        })
    }

    /// Maps the gradient w.r.t. the output to the gradient w.r.t. `x · W`.
    fn backward(&self, g: &[f64]) -> Vec<f64> {
        match self.norm {
            None => g.to_vec(),
            Some(n) => {
                let gu = dot(g, &self.unit);
                g.iter().zip(&self.unit).map(|(gi, ui)| (gi - gu * ui) / n).collect()
            }
        }
    }
}

fn accumulate_outer(grad_w: &mut [f64], x: &[f64], dy: &[f64]) {
    let d_out = dy.len();
    for (xa, row) in x.iter().zip(grad_w.chunks_exact_mut(d_out)) {
        if *xa == 0.0 {
            continue;
        }
        for (w, d) in row.iter_mut().zip(dy) {
            *w += xa * d;
        }
    }
}

struct Forward {
    img_cls: Vec<Node>,
    img_patches: Vec<Vec<Node>>,
    txt_cls: Vec<Node>,
    txt_bags: Vec<Vec<Node>>,
}

/// Loss and parameter gradients for one batch.
pub(crate) struct BatchObjective {
    pub itc: LossReport,
    pub bwc: LossReport,
    pub grad_visual: Vec<f64>,
    pub grad_text: Vec<f64>,
    pub grad_tau: f64,
    pub grad_tau_bwc: f64,
}

pub(crate) struct Params<'a> {
    pub visual: &'a LinearMap,
    pub text: &'a LinearMap,
    pub tau: Temperature,
    pub tau_bwc: Temperature,
    pub lambda: f64,
    pub renormalize_bags: bool,
}

pub(crate) fn batch_objective(batch: &[&TrainingPair], p: &Params<'_>) -> Result<BatchObjective> {
    let bs = batch.len();
    let fwd = Forward {
        img_cls: batch
            .iter()
            .map(|x| Node::forward(&x.image.cls, p.visual, true))
            .collect::<Result<_>>()?,
        img_patches: batch
            .iter()
            .map(|x| x.image.patches.iter_rows().map(|r| Node::forward(r, p.visual, true)).collect())
            .collect::<Result<_>>()?,
        txt_cls: batch
            .iter()
            .map(|x| Node::forward(&x.text.cls, p.text, true))
            .collect::<Result<_>>()?,
        txt_bags: batch
            .iter()
            .map(|x| {
                x.text
                    .bags
                    .iter_rows()
                    .map(|r| Node::forward(r, p.text, p.renormalize_bags))
                    .collect()
            })
            .collect::<Result<_>>()?,
    };

    let mut global = vec![0.0; bs * bs];
    let mut bagwise = vec![0.0; bs * bs];
    // argmax bag index for every (image, text, patch)
    let mut best_bag: Vec<Vec<usize>> = Vec::with_capacity(bs * bs);
    for i in 0..bs {
        for t in 0..bs {
            global[i * bs + t] = dot(&fwd.img_cls[i].unit, &fwd.txt_cls[t].unit);
            let mut total = 0.0;
            let mut picks = Vec::with_capacity(fwd.img_patches[i].len());
            for patch in &fwd.img_patches[i] {
                let (j, s) = fwd.txt_bags[t]
                    .iter()
                    .enumerate()
                    .map(|(j, b)| (j, dot(&patch.unit, &b.unit)))
                    .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
                total += s;
                picks.push(j);
            }
            bagwise[i * bs + t] = total / picks.len() as f64;
            best_bag.push(picks);
        }
    }
    let itc = itc_loss(&SimilarityMatrix::new(bs, bs, global, ScoringMode::Global)?, p.tau)?;
    let bwc = bwc_loss(&SimilarityMatrix::new(bs, bs, bagwise, ScoringMode::BagWise)?, p.tau_bwc)?;

    let d_out = p.visual.dim_out();
    let zeros = |n: usize| vec![vec![0.0; d_out]; n];
    let mut g_img_cls = zeros(bs);
    let mut g_txt_cls = zeros(bs);
    let mut g_patches: Vec<Vec<Vec<f64>>> = fwd.img_patches.iter().map(|v| zeros(v.len())).collect();
    let mut g_bags: Vec<Vec<Vec<f64>>> = fwd.txt_bags.iter().map(|v| zeros(v.len())).collect();

    for i in 0..bs {
        for t in 0..bs {
            let g = itc.grad_scores[i * bs + t];
            for d in 0..d_out {
                g_img_cls[i][d] += g * fwd.txt_cls[t].unit[d];
                g_txt_cls[t][d] += g * fwd.img_cls[i].unit[d];
            }
            let gb = p.lambda * bwc.grad_scores[i * bs + t];
            if gb == 0.0 {
                continue;
            }
            let picks = &best_bag[i * bs + t];
            let w = gb / picks.len() as f64;
            for (pi, &j) in picks.iter().enumerate() {
                let patch = &fwd.img_patches[i][pi].unit;
                let bag = &fwd.txt_bags[t][j].unit;
                for d in 0..d_out {
                    g_patches[i][pi][d] += w * bag[d];
                    g_bags[t][j][d] += w * patch[d];
                }
            }
        }
    }

    let mut grad_visual = vec![0.0; p.visual.weight().len()];
    let mut grad_text = vec![0.0; p.text.weight().len()];
    for (k, pair) in batch.iter().enumerate() {
        accumulate_outer(&mut grad_visual, &pair.image.cls, &fwd.img_cls[k].backward(&g_img_cls[k]));
        for (pi, row) in pair.image.patches.iter_rows().enumerate() {
            accumulate_outer(&mut grad_visual, row, &fwd.img_patches[k][pi].backward(&g_patches[k][pi]));
        }
        accumulate_outer(&mut grad_text, &pair.text.cls, &fwd.txt_cls[k].backward(&g_txt_cls[k]));
        for (j, row) in pair.text.bags.iter_rows().enumerate() {
            accumulate_outer(&mut grad_text, row, &fwd.txt_bags[k][j].backward(&g_bags[k][j]));
        }
    }

    Ok(BatchObjective {
        grad_tau: itc.grad_tau,
        grad_tau_bwc: p.lambda * bwc.grad_tau,
        itc,
        bwc,
        grad_visual,
        grad_text,
    })
}

fn check_pairs(pairs: &[TrainingPair]) -> Result<(usize, usize)> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::InvalidConfig("need at least two pairs".into()))?;
    let (dv, dt) = (first.image.patches.dim(), first.text.bags.dim());
    for p in pairs {
        check_dim(dv, p.image.cls.len())?;
        check_dim(dv, p.image.patches.dim())?;
        check_dim(dt, p.text.cls.len())?;
        check_dim(dt, p.text.bags.dim())?;
        if p.image.patches.is_empty() || p.text.bags.is_empty() {
            return Err(Error::InvalidConfig(format!("pair {} has no patches or bags", p.id)));
        }
    }
    Ok((dv, dt))
}

/// Trains both heads and the temperature by plain gradient descent.
///
/// Batches are a fixed seeded partition of the pairs, visited in the same
/// order every epoch. The recorded loss of an epoch is the batch-mean loss
/// evaluated before each batch's update.
pub fn train_heads(pairs: &[TrainingPair], config: &TrainConfig) -> Result<TrainedModel> {
    if pairs.len() < 2 {
        return Err(Error::InvalidConfig("need at least two pairs".into()));
    }
    let batch_size = if config.batch_size == 0 { pairs.len() } else { config.batch_size };
    if batch_size < 2 {
        return Err(Error::InvalidConfig("batch size must be at least 2".into()));
    }
    if config.joint_dim == 0 || !config.learning_rate.is_finite() || config.learning_rate < 0.0 {
        return Err(Error::InvalidConfig("joint_dim must be positive and learning rate finite, >= 0".into()));
    }
    let (dv, dt) = check_pairs(pairs)?;

    let mut visual = LinearMap::random(dv, config.joint_dim, config.seed);
    let mut text = LinearMap::random(dt, config.joint_dim, config.seed.wrapping_add(1));
    let mut tau = Temperature::new(config.init_tau)?;
    let mut tau_bwc = tau;

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2)));
    let batches: Vec<Vec<&TrainingPair>> = order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.iter().map(|&i| &pairs[i]).collect())
        .collect();

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let tau_at_start = tau.value();
        let (mut l_itc, mut l_bwc) = (0.0, 0.0);
        for batch in &batches {
            let params = Params {
                visual: &visual,
                text: &text,
                tau,
                tau_bwc: if config.separate_bwc_tau { tau_bwc } else { tau },
                lambda: config.lambda,
                renormalize_bags: config.renormalize_bags,
            };
            let obj = match batch_objective(batch, &params) {
                // non-finite scores
                Err(Error::InvalidMatrix(_)) => return Err(Error::DivergenceDetected(epoch)),
                other => other?,
            };
            if !(obj.itc.loss.is_finite() && obj.bwc.loss.is_finite()) {
                return Err(Error::DivergenceDetected(epoch));
            }
            l_itc += obj.itc.loss;
            l_bwc += obj.bwc.loss;

            let lr = config.learning_rate;
            for (w, g) in visual.weight_mut().iter_mut().zip(&obj.grad_visual) {
                *w -= lr * g;
            }
            for (w, g) in text.weight_mut().iter_mut().zip(&obj.grad_text) {
                *w -= lr * g;
            }
            if config.separate_bwc_tau {
                tau = tau.step(obj.grad_tau, config.tau_learning_rate);
                tau_bwc = tau_bwc.step(obj.grad_tau_bwc, config.tau_learning_rate);
            } else {
                tau = tau.step(obj.grad_tau + obj.grad_tau_bwc, config.tau_learning_rate);
            }
            if visual.weight().iter().chain(text.weight()).any(|w| !w.is_finite()) {
                return Err(Error::DivergenceDetected(epoch));
            }
        }
        let n = batches.len() as f64;
        history.push(EpochLoss {
            epoch,
            l_itc: l_itc / n,
            l_bwc: l_bwc / n,
            tau: tau_at_start,
        });
    }

    Ok(TrainedModel {
        visual_head: ProjectionHead::new(visual),
        text_head: ProjectionHead::new(text),
        tau,
        tau_bwc: config.separate_bwc_tau.then_some(tau_bwc),
        renormalize_bags: config.renormalize_bags,
        lambda: config.lambda,
        history,
    })
}

/// In-batch Recall@1 of the global score over `pairs`, image-to-text and
/// text-to-image. Ties rank the lower index first.
pub fn in_batch_recall_at_1(model: &TrainedModel, pairs: &[TrainingPair]) -> Result<(f64, f64)> {
    let images = pairs
        .iter()
        .map(|p| model.embed_image(&p.id, &p.image))
        .collect::<Result<Vec<_>>>()?;
    let texts = pairs
        .iter()
        .map(|p| model.embed_text(&p.id, &p.text))
        .collect::<Result<Vec<_>>>()?;
    let n = pairs.len();
    let s = |i: usize, t: usize| dot(&images[i].cls, &texts[t].cls);
    let wins = |score: &dyn Fn(usize) -> f64, target: usize| {
        let own = score(target);
        (0..n).all(|o| o == target || score(o) < own || (score(o) == own && o > target))
    };
    let i2t = (0..n).filter(|&i| wins(&|t| s(i, t), i)).count();
    let t2i = (0..n).filter(|&t| wins(&|i| s(i, t), t)).count();
    Ok((i2t as f64 / n as f64, t2i as f64 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_rows(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> EmbeddingMatrix {
        EmbeddingMatrix::new(dim, (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_pairs(n: usize, seed: u64) -> Vec<TrainingPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| TrainingPair {
                id: format!("p{i}"),
                image: ImageFeatures::from_rows(&random_rows(5, 4, &mut rng)).unwrap(),
                text: TextFeatures {
                    cls: random_rows(1, 3, &mut rng).into_vec(),
                    bags: random_rows(3, 3, &mut rng),
                },
            })
            .collect()
    }

    fn total(obj: &BatchObjective, lambda: f64) -> f64 {
        obj.itc.loss + lambda * obj.bwc.loss
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let pairs = random_pairs(4, 1);
        let batch: Vec<&TrainingPair> = pairs.iter().collect();
        for renormalize_bags in [true, false] {
            let visual = LinearMap::random(4, 5, 2);
            let text = LinearMap::random(3, 5, 3);
            let tau = Temperature::new(0.3).unwrap();
            fn params<'a>(v: &'a LinearMap, t: &'a LinearMap, tau: Temperature, renormalize_bags: bool) -> Params<'a> {
                Params { visual: v, text: t, tau, tau_bwc: tau, lambda: 0.7, renormalize_bags }
            }
            let obj = batch_objective(&batch, &params(&visual, &text, tau, renormalize_bags)).unwrap();
            let eps = 1e-6;
            for k in 0..visual.weight().len() {
                let mut plus = visual.clone();
                plus.weight_mut()[k] += eps;
                let mut minus = visual.clone();
                minus.weight_mut()[k] -= eps;
                let fp = total(&batch_objective(&batch, &params(&plus, &text, tau, renormalize_bags)).unwrap(), 0.7);
                let fm = total(&batch_objective(&batch, &params(&minus, &text, tau, renormalize_bags)).unwrap(), 0.7);
                let numeric = (fp - fm) / (2.0 * eps);
                assert!((numeric - obj.grad_visual[k]).abs() < 1e-6 * numeric.abs().max(1.0), "visual {k}");
            }
            for k in 0..text.weight().len() {
                let mut plus = text.clone();
                plus.weight_mut()[k] += eps;
                let mut minus = text.clone();
                minus.weight_mut()[k] -= eps;
                let fp = total(&batch_objective(&batch, &params(&visual, &plus, tau, renormalize_bags)).unwrap(), 0.7);
                let fm = total(&batch_objective(&batch, &params(&visual, &minus, tau, renormalize_bags)).unwrap(), 0.7);
                let numeric = (fp - fm) / (2.0 * eps);
                assert!((numeric - obj.grad_text[k]).abs() < 1e-6 * numeric.abs().max(1.0), "text {k}");
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let pairs = random_pairs(6, 4);
        let config = TrainConfig {
            epochs: 5,
            learning_rate: 0.0,
            tau_learning_rate: 0.0,
            joint_dim: 8,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let model = train_heads(&pairs, &config).unwrap();
        let first = model.history[0];
        assert!(model.history.iter().all(|e| e.l_itc == first.l_itc && e.l_bwc == first.l_bwc));
    }

    #[test]
    fn loss_decreases_and_is_deterministic() {
        let pairs = random_pairs(8, 5);
        let config = TrainConfig {
            epochs: 30,
            joint_dim: 8,
            ..TrainConfig::default()
        };
        let a = train_heads(&pairs, &config).unwrap();
        let b = train_heads(&pairs, &config).unwrap();
        assert_eq!(a, b);
        let (first, last) = (a.history[0], *a.history.last().unwrap());
        assert!(last.total(1.0) <= first.total(1.0));
        assert!(a.loss_csv().starts_with("epoch,l_itc,l_bwc,tau\n0,"));
        assert_eq!(a.loss_csv().lines().count(), 31);
    }

    #[test]
    fn lambda_zero_ignores_bag_loss() {
        let pairs = random_pairs(5, 6);
        let batch: Vec<&TrainingPair> = pairs.iter().collect();
        let visual = LinearMap::random(4, 6, 7);
        let text = LinearMap::random(3, 6, 8);
        let tau = Temperature::new(0.2).unwrap();
        let with = |lambda| {
            batch_objective(
                &batch,
                &Params { visual: &visual, text: &text, tau, tau_bwc: tau, lambda, renormalize_bags: true },
            )
            .unwrap()
        };
        let (zero, one) = (with(0.0), with(1.0));
        assert_eq!(zero.grad_tau_bwc, 0.0);
        assert_ne!(zero.grad_visual, one.grad_visual);
        assert_eq!(zero.itc, one.itc);
    }

    #[test]
    fn rejects_bad_inputs() {
        let pairs = random_pairs(3, 9);
        assert!(train_heads(&pairs[..1], &TrainConfig::default()).is_err());
        let config = TrainConfig { batch_size: 1, ..TrainConfig::default() };
        assert!(train_heads(&pairs, &config).is_err());
        let config = TrainConfig { init_tau: 0.0, ..TrainConfig::default() };
        assert!(matches!(train_heads(&pairs, &config), Err(Error::NonPositiveTau(_))));
    }

    #[test]
    fn non_finite_loss_reports_divergence() {
        let mut pairs = random_pairs(4, 10);
        pairs[2].image.cls[0] = f64::NAN;
        let config = TrainConfig { epochs: 3, joint_dim: 4, ..TrainConfig::default() };
        assert!(matches!(train_heads(&pairs, &config), Err(Error::DivergenceDetected(0))));
    }
}
