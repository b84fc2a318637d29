//! Audio-visual alignment: a cross-attention fusion model over precomputed
//! visual and audio features, similarity heads that score fused samples
//! against class embeddings, and the contrastive training loop.

mod checkpoint;
mod contrastive;
mod fusion;
mod head;
mod layers;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::EmbeddingSource;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use contrastive::contrastive_loss;
pub use fusion::{FusionArch, FusionCache, FusionModel};
pub use head::{ClassPrep, HeadKind, SampleCache, SimilarityHead};
pub(crate) use train::restricted_argmax;
pub use train::{
    adam_config, batch_gradient, fuse_audio_visual, predict, score_samples, similarity_scores, train_alignment,
    BatchGradient, LabelSpace, TrainedModel,
};

/// Alignment training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub head_kind: HeadKind,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Which class embeddings to align against; `initial` is the no-CEO ablation.
    pub embeddings: EmbeddingSource,
    /// Count each batch class once in the loss denominator.
    pub dedup_denominator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 50,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-5,
            seed: 0,
            head_kind: HeadKind::CrossAttention,
            layers: 1,
            heads: 8,
            head_dim: 64,
            embeddings: EmbeddingSource::Optimized,
            dedup_denominator: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("heads and head_dim must be ≥ 1".into()));
        }
        adam_config(self).validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }
}
