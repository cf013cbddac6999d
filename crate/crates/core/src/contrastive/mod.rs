//! Contrastive objectives, the early/late bagging text pipeline, and
//! desk-scale training of the projection heads.

mod loss;
mod pipeline;
mod train;

pub use loss::{bwc_loss, grad_check, itc_loss, LossReport, Temperature, TAU_MAX, TAU_MIN};
pub use pipeline::{encode_text_pipeline, lookup_tokens, text_features, BaggingPlacement};
pub use train::{
    in_batch_recall_at_1, train_heads, EpochLoss, ImageFeatures, TextEncoder, TextFeatures, TrainConfig,
    TrainedModel, TrainingPair,
};
