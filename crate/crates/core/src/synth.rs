//! Synthetic image/text pairs with planted concept alignment.
//!
//! A world holds a pool of unit concept vectors in a latent space. Each
//! concept has a multi-token phrase in the lexicon whose token vectors sum
//! to the concept (individual tokens carry large zero-sum noise, so only the
//! bag is informative). An image shows its concepts as a few noisy patches
//! each plus background patches.
//!
//! The latent view is already aligned across modalities. The raw view,
//! which training sees, passes image rows through one random linear map and
//! the token table through another.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bagging::{build_helper, BaggingHelper, TokenId, Vocabulary};
use crate::contrastive::{encode_text_pipeline, BaggingPlacement, ImageFeatures, TextEncoder, TrainingPair};
use crate::embedding::{l2_normalize, l2_normalize_rows, project, EmbeddingMatrix, LinearMap, ProjectionHead, ToyMixer};
use crate::error::{Error, Result};
use crate::similarity::{ItemEmbedding, LateMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub dim: usize,
    pub concepts: usize,
    pub concepts_per_pair: usize,
    pub phrase_len: usize,
    pub fillers: usize,
    pub fillers_per_text: usize,
    pub patches_per_concept: usize,
    pub background_patches: usize,
    /// Norm of the noise added to each concept patch.
    pub patch_noise: f64,
    /// Norm of the noise added to the image CLS row.
    pub cls_noise: f64,
    /// Norm of the zero-sum noise on individual phrase tokens.
    pub token_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 32,
            concepts: 48,
            concepts_per_pair: 3,
            phrase_len: 3,
            fillers: 40,
            fillers_per_text: 3,
            patches_per_concept: 4,
            background_patches: 4,
            patch_noise: 0.4,
            cls_noise: 0.5,
            token_noise: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn patches_per_image(&self) -> usize {
        self.concepts_per_pair * self.patches_per_concept + self.background_patches
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.phrase_len == 0 || self.patches_per_image() == 0 {
            return Err(Error::InvalidConfig("dim, phrase_len and patch counts must be positive".into()));
        }
        if self.concepts_per_pair == 0 || self.concepts_per_pair > self.concepts {
            return Err(Error::InvalidConfig("concepts_per_pair must be in 1..=concepts".into()));
        }
        if self.fillers_per_text > 0 && self.fillers == 0 {
            return Err(Error::InvalidConfig("fillers_per_text needs fillers".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPair {
    pub id: String,
    pub concepts: Vec<usize>,
    /// Latent image rows: CLS then patches.
    pub image: Vec<Vec<f64>>,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    config: SynthConfig,
    concepts: Vec<Vec<f64>>,
    latent_table: EmbeddingMatrix,
    vocab: Vocabulary,
    image_map: LinearMap,
    text_map: LinearMap,
}

fn gaussian(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = scale / (dim as f64).sqrt();
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * s
        })
        .collect()
}

fn unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        if let Ok(v) = l2_normalize(&gaussian(dim, 1.0, rng)) {
            return v;
        }
    }
}

/// Token id layout: 0 is reserved, then fillers, then phrase tokens.
impl SyntheticWorld {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dim = config.dim;
        let concepts: Vec<Vec<f64>> = (0..config.concepts).map(|_| unit(dim, &mut rng)).collect();

        let mut rows: Vec<Vec<f64>> = vec![vec![0.0; dim]];
        rows.extend((0..config.fillers).map(|_| unit(dim, &mut rng)));
        let mut entries = Vec::with_capacity(config.concepts);
        let l = config.phrase_len;
        for c in &concepts {
            let noise: Vec<Vec<f64>> = (0..l).map(|_| gaussian(dim, config.token_noise, &mut rng)).collect();
            let mut mean = vec![0.0; dim];
            for n in &noise {
                for (m, v) in mean.iter_mut().zip(n) {
                    *m += v / l as f64;
                }
            }
            let start = rows.len() as TokenId;
            for n in &noise {
                rows.push((0..dim).map(|d| c[d] / l as f64 + n[d] - mean[d]).collect());
            }
            entries.push((start..start + l as TokenId).collect());
        }
        let latent_table = EmbeddingMatrix::from_rows(dim, &rows)?;
        let vocab = Vocabulary::new(entries)?;
        let image_map = LinearMap::random(dim, dim, rng.gen());
        let text_map = LinearMap::random(dim, dim, rng.gen());
        Ok(Self {
            config,
            concepts,
            latent_table,
            vocab,
            image_map,
            text_map,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn helper(&self) -> Result<BaggingHelper> {
        build_helper(&self.vocab)
    }

    /// Aligned token table.
    pub fn latent_table(&self) -> &EmbeddingMatrix {
        &self.latent_table
    }

    /// Token table as the text encoder sees it.
    pub fn raw_table(&self) -> Result<EmbeddingMatrix> {
        project(&self.latent_table, &ProjectionHead::new(self.text_map.clone()))
    }

    /// Patch grid `(h, w)` with `h * w` equal to the patches per image, as
    /// square as possible.
    pub fn patch_grid(&self) -> (usize, usize) {
        let n = self.config.patches_per_image();
        let mut h = (n as f64).sqrt() as usize;
        while h > 1 && !n.is_multiple_of(h) {
            h -= 1;
        }
        (h.max(1), n / h.max(1))
    }

    pub fn sample_pairs(&self, count: usize, seed: u64, id_prefix: &str) -> Result<Vec<SyntheticPair>> {
        let cfg = &self.config;
        let dim = cfg.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ self.config.seed.rotate_left(32));
        let pool: Vec<usize> = (0..cfg.concepts).collect();
        (0..count)
            .map(|i| {
                let chosen: Vec<usize> = pool.choose_multiple(&mut rng, cfg.concepts_per_pair).copied().collect();

                let mut patches = Vec::with_capacity(cfg.patches_per_image());
                for &c in &chosen {
                    for _ in 0..cfg.patches_per_concept {
                        let n = gaussian(dim, cfg.patch_noise, &mut rng);
                        patches.push(self.concepts[c].iter().zip(&n).map(|(a, b)| a + b).collect::<Vec<f64>>());
                    }
                }
                for _ in 0..cfg.background_patches {
                    patches.push(gaussian(dim, 1.0, &mut rng));
                }
                patches.shuffle(&mut rng);
                let scale = 1.0 / (chosen.len() as f64).sqrt();
                let noise = gaussian(dim, cfg.cls_noise, &mut rng);
                let cls: Vec<f64> = (0..dim)
                    .map(|d| chosen.iter().map(|&c| self.concepts[c][d]).sum::<f64>() * scale + noise[d])
                    .collect();
                let mut image = vec![cls];
                image.extend(patches);

                let mut units: Vec<Vec<TokenId>> = chosen.iter().map(|&c| self.vocab.entries()[c].clone()).collect();
                for _ in 0..cfg.fillers_per_text {
                    units.push(vec![rng.gen_range(1..=cfg.fillers) as TokenId]);
                }
                units.shuffle(&mut rng);

                Ok(SyntheticPair {
                    id: format!("{id_prefix}{i:04}"),
                    concepts: chosen,
                    image,
                    tokens: units.concat(),
                })
            })
            .collect()
    }

    /// Raw (mapped) image rows, CLS first.
    pub fn raw_image(&self, pair: &SyntheticPair) -> Result<EmbeddingMatrix> {
        let latent = EmbeddingMatrix::from_rows(self.config.dim, &pair.image)?;
        project(&latent, &ProjectionHead::new(self.image_map.clone()))
    }

    /// Training pairs over the raw view, with the text side run through
    /// `mixer` and the lexicon helper at `placement`.
    pub fn training_pairs(&self, pairs: &[SyntheticPair], mixer: ToyMixer, placement: BaggingPlacement) -> Result<Vec<TrainingPair>> {
        let encoder = TextEncoder {
            table: self.raw_table()?,
            mixer,
            helper: self.helper()?,
            placement,
        };
        pairs
            .iter()
            .map(|p| {
                Ok(TrainingPair {
                    id: p.id.clone(),
                    image: ImageFeatures::from_rows(&self.raw_image(p)?)?,
                    text: encoder.features(&p.tokens)?,
                })
            })
            .collect()
    }

    /// Aligned image embedding: normalized CLS and patch rows.
    pub fn latent_image_item(&self, pair: &SyntheticPair) -> Result<ItemEmbedding> {
        let rows = EmbeddingMatrix::from_rows(self.config.dim, &pair.image)?;
        let normalized = l2_normalize_rows(&rows)?;
        Ok(ItemEmbedding {
            id: pair.id.clone(),
            cls: normalized.row(0).to_vec(),
            late: Some(LateMatrix::unpadded(normalized.slice_rows(1, normalized.rows()))),
        })
    }

    /// Aligned text embedding through the lexicon helper (or `helper`).
    pub fn latent_text_item(&self, pair: &SyntheticPair, helper: &BaggingHelper, renormalize: bool) -> Result<ItemEmbedding> {
        let dim = self.config.dim;
        let (cls, bags) = encode_text_pipeline(
            &pair.tokens,
            &self.latent_table,
            &ToyMixer::identity(dim),
            helper,
            &ProjectionHead::identity(dim),
            BaggingPlacement::Late,
            renormalize,
        )?;
        Ok(ItemEmbedding {
            id: pair.id.clone(),
            cls,
            late: Some(LateMatrix::unpadded(bags)),
        })
    }
}

/// Serializable training corpus: raw token table, lexicon and raw pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusFile {
    pub dim: usize,
    pub grid: (usize, usize),
    pub table: Vec<Vec<f64>>,
    pub vocabulary: Vec<Vec<TokenId>>,
    pub pairs: Vec<CorpusPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusPair {
    pub id: String,
    /// Raw image rows, CLS first.
    pub image: Vec<Vec<f64>>,
    pub tokens: Vec<TokenId>,
}

impl CorpusFile {
    pub fn from_world(world: &SyntheticWorld, pairs: &[SyntheticPair]) -> Result<Self> {
        let table = world.raw_table()?;
        Ok(Self {
            dim: world.config.dim,
            grid: world.patch_grid(),
            table: table.iter_rows().map(|r| r.to_vec()).collect(),
            vocabulary: world.vocab.entries().to_vec(),
            pairs: pairs
                .iter()
                .map(|p| {
                    let raw = world.raw_image(p)?;
                    Ok(CorpusPair {
                        id: p.id.clone(),
                        image: raw.iter_rows().map(|r| r.to_vec()).collect(),
                        tokens: p.tokens.clone(),
                    })
                })
                .collect::<Result<_>>()?,
        })
    }

    pub fn text_encoder(&self, mixer: ToyMixer, placement: BaggingPlacement) -> Result<TextEncoder> {
        let vocab = Vocabulary::new(self.vocabulary.clone())?;
        Ok(TextEncoder {
            table: EmbeddingMatrix::from_rows(self.dim, &self.table)?,
            mixer,
            helper: if vocab.is_empty() { BaggingHelper::singletons() } else { build_helper(&vocab)? },
            placement,
        })
    }

    pub fn training_pairs(&self, encoder: &TextEncoder) -> Result<Vec<TrainingPair>> {
        self.pairs
            .iter()
            .map(|p| {
                Ok(TrainingPair {
                    id: p.id.clone(),
                    image: ImageFeatures::from_rows(&EmbeddingMatrix::from_rows(self.dim, &p.image)?)?,
                    text: encoder.features(&p.tokens)?,
                })
            })
            .collect()
    }
}
