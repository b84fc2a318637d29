use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{par, AdamConfig, AdamState, Tensor2};
use crate::store::{ClassSplit, EmbeddingBank, FeatureDataset, Partition};

use super::contrastive::contrastive_loss;
use super::fusion::{FusionArch, FusionModel};
use super::head::SimilarityHead;
use super::TrainConfig;

/// Samples per gradient-accumulation chunk. Fixed so the reduction order does
/// not depend on the worker count.
const GRAD_CHUNK: usize = 4;

/// Candidate classes at prediction time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSpace {
    #[default]
    All,
    UnseenOnly,
    SeenOnly,
}

impl LabelSpace {
    pub fn classes(self, split: &ClassSplit) -> Vec<usize> {
        match self {
            LabelSpace::All => (0..split.n_classes()).collect(),
            LabelSpace::UnseenOnly => split.unseen().to_vec(),
            LabelSpace::SeenOnly => split.seen().to_vec(),
        }
    }
}

/// Fusion model and head after alignment, with the settings that produced them.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub fusion: FusionModel,
    pub head: SimilarityHead,
    pub config: TrainConfig,
    /// Mean batch loss of each epoch.
    pub loss_curve: Vec<f64>,
}

impl TrainedModel {
    /// Fresh, untrained parameters for the given feature and embedding widths.
    pub fn initialize(config: &TrainConfig, visual_dim: usize, audio_dim: usize, embed_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let arch = FusionArch {
            visual_dim,
            audio_dim,
            heads: config.heads,
            head_dim: config.head_dim,
            layers: config.layers,
        };
        let fusion = FusionModel::new(arch, &mut rng)?;
        let head = SimilarityHead::new(config.head_kind, embed_dim, arch.d_model(), config.heads, &mut rng)?;
        Ok(Self {
            fusion,
            head,
            config: config.clone(),
            loss_curve: Vec::new(),
        })
    }

    /// Scores of one sample against each row of `class_embeddings`.
    pub fn scores(&self, visual: &[f64], audio: &[f64], class_embeddings: &Tensor2) -> Result<Vec<f64>> {
        let tokens = self.fusion.fuse(visual, audio)?;
        self.head.scores(&tokens, class_embeddings)
    }

    pub fn loss_curve_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::json!({ "epoch_mean_loss": self.loss_curve }))?)
    }
}

pub fn adam_config(cfg: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    }
}

pub fn fuse_audio_visual(model: &FusionModel, visual: &[f64], audio: &[f64]) -> Result<Tensor2> {
    model.fuse(visual, audio)
}

pub fn similarity_scores(head: &SimilarityHead, tokens: &Tensor2, class_embeddings: &Tensor2) -> Result<Vec<f64>> {
    head.scores(tokens, class_embeddings)
}

/// Loss and parameter gradients of one batch.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub loss: f64,
    pub fusion: Vec<f64>,
    pub head: Vec<f64>,
}

/// Contrastive loss of the samples `batch` of `ds` and its gradient with
/// respect to the fusion and head parameters. Class embeddings are inputs only.
pub fn batch_gradient(
    fusion: &FusionModel,
    head: &SimilarityHead,
    class_embeddings: &Tensor2,
    ds: &FeatureDataset,
    batch: &[usize],
    dedup: bool,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let labels: Vec<usize> = batch.iter().map(|&i| ds.labels[i]).collect();
    // Distinct batch classes in order of first appearance.
    let mut classes: Vec<usize> = Vec::new();
    let column: Vec<usize> = labels
        .iter()
        .map(|&y| match classes.iter().position(|&c| c == y) {
            Some(p) => p,
            None => {
                classes.push(y);
                classes.len() - 1
            }
        })
        .collect();
    let subset = Tensor2::from_rows(&classes.iter().map(|&c| class_embeddings.row(c)).collect::<Vec<_>>())?;
    let prep = head.prepare_classes(&subset)?;

    let forward = par::map_slice(batch, |&i| -> Result<_> {
        let (tokens, fcache) = fusion.forward(ds.visual.row(i), ds.audio.row(i))?;
        let (scores, hcache) = head.forward_sample(&tokens, &prep)?;
        Ok((tokens, fcache, scores, hcache))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let b = batch.len();
    let mut matrix = Tensor2::zeros(b, b);
    for (i, f) in forward.iter().enumerate() {
        for k in 0..b {
            matrix.set(i, k, f.2[column[k]]);
        }
    }
    let (loss, d_matrix) = contrastive_loss(&matrix, &labels, dedup)?;

    let partials = par::map_slice(&par::chunks(b, GRAD_CHUNK), |range| -> Result<_> {
        let mut gf = vec![0.0; fusion.num_params()];
        let mut gh = vec![0.0; head.num_params()];
        let mut dp = prep.zero_grad();
        for i in range.clone() {
            let (tokens, fcache, _, hcache) = &forward[i];
            let mut d_scores = vec![0.0; classes.len()];
            for k in 0..b {
                d_scores[column[k]] += d_matrix.get(i, k);
            }
            let mut d_tokens = Tensor2::zeros(2, fusion.d_model());
            head.backward_sample(tokens, &prep, hcache, &d_scores, &mut gh, &mut d_tokens, &mut dp)?;
            fusion.backward(fcache, &d_tokens, &mut gf)?;
        }
        Ok((gf, gh, dp))
    });
    let mut gf = vec![0.0; fusion.num_params()];
    let mut gh = vec![0.0; head.num_params()];
    let mut dp = prep.zero_grad();
    for part in partials {
        let (a, h, p) = part?;
        add(&mut gf, &a);
        add(&mut gh, &h);
        add(dp.data_mut(), p.data());
    }
    head.backward_classes(&subset, &prep, &dp, &mut gh)?;
    Ok(BatchGradient {
        loss,
        fusion: gf,
        head: gh,
    })
}

fn add(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Trains the fusion model and head on the train partition with Adam over
/// seeded shuffles. The bank is read-only; its embeddings stay frozen.
pub fn train_alignment(ds: &FeatureDataset, bank: &EmbeddingBank, config: &TrainConfig) -> Result<TrainedModel> {
    let class_embeddings = bank.embeddings(config.embeddings)?;
    if ds.labels.iter().any(|&y| y >= bank.len()) {
        return Err(Error::UnknownClass("label outside the embedding bank".into()));
    }
    let mut order = ds.indices(Partition::Train);
    if order.is_empty() {
        return Err(Error::Empty("train partition"));
    }
    let mut model = TrainedModel::initialize(config, ds.visual_dim(), ds.audio_dim(), bank.dim())?;
    let adam = adam_config(config);
    let mut fusion_state = AdamState::new(model.fusion.num_params(), adam)?;
    let mut head_state = AdamState::new(model.head.num_params(), adam)?;
    let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546_464c_4521);
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let g = batch_gradient(
                &model.fusion,
                &model.head,
                class_embeddings,
                ds,
                batch,
                config.dedup_denominator,
            )?;
            if !g.loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss in epoch {}", epoch + 1)));
            }
            fusion_state.update(model.fusion.params_mut(), &g.fusion)?;
            head_state.update(model.head.params_mut(), &g.head)?;
            total += g.loss;
            batches += 1;
        }
        model.loss_curve.push(total / batches as f64);
    }
    Ok(model)
}

/// Index of the largest score among `allowed`; ties go to the smallest index.
pub(crate) fn restricted_argmax(scores: &[f64], allowed: &[usize]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for &c in allowed {
        let s = *scores
            .get(c)
            .ok_or_else(|| Error::UnknownClass(format!("#{c}")))?;
        match best {
            Some(b) if s < scores[b] || (s == scores[b] && c > b) => {}
            _ => best = Some(c),
        }
    }
    best.ok_or(Error::Empty("label space"))
}

/// Class with the highest similarity within `space`.
pub fn predict(
    model: &TrainedModel,
    bank: &EmbeddingBank,
    split: &ClassSplit,
    visual: &[f64],
    audio: &[f64],
    space: LabelSpace,
) -> Result<usize> {
    let classes = bank.embeddings(model.config.embeddings)?;
    let scores = model.scores(visual, audio, classes)?;
    restricted_argmax(&scores, &space.classes(split))
}

/// Scores of the samples `indices` of `ds` against every class, in index order.
pub fn score_samples(
    model: &TrainedModel,
    class_embeddings: &Tensor2,
    ds: &FeatureDataset,
    indices: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let prep = model.head.prepare_classes(class_embeddings)?;
    par::map_slice(indices, |&i| -> Result<Vec<f64>> {
        let tokens = model.fusion.fuse(ds.visual.row(i), ds.audio.row(i))?;
        model.head.forward_sample(&tokens, &prep).map(|(s, _)| s)
    })
    .into_iter()
    .collect()
}
