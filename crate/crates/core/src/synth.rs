//! Seeded synthetic zero-shot benchmarks.
//!
//! Class text embeddings are drawn around a few super-group centroids, so each
//! unseen class has seen neighbours. Visual and audio prototypes are fixed
//! random linear images of the text embedding plus independent modality
//! noise, and every sample is its class prototype plus Gaussian noise,
//! normalized to unit length.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{normalize_rows, Tensor2};
use crate::store::{ClassSplit, EmbeddingBank, FeatureDataset, Partition};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    /// The first `n_seen` classes are seen, the rest unseen.
    pub n_seen: usize,
    pub dim_text: usize,
    pub dim_visual: usize,
    pub dim_audio: usize,
    /// Training samples per seen class; unseen classes have none.
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Sample noise; the noise vector has expected norm ≈ `noise_sigma`.
    pub noise_sigma: f64,
    /// Class `c` belongs to super-group `c mod semantic_clusters`.
    pub semantic_clusters: usize,
    /// Spread of class embeddings around their centroid.
    pub cluster_spread: f64,
    /// Per-modality noise added to the projected prototypes.
    pub modality_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 18,
            n_seen: 12,
            dim_text: 32,
            dim_visual: 64,
            dim_audio: 48,
            train_per_class: 40,
            val_per_class: 10,
            test_per_class: 10,
            noise_sigma: 0.4,
            semantic_clusters: 3,
            cluster_spread: 0.8,
            modality_noise: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.into()));
        if self.n_seen == 0 || self.n_seen >= self.n_classes {
            return err("n_seen must satisfy 1 ≤ n_seen < n_classes");
        }
        if self.dim_text == 0 || self.dim_visual == 0 || self.dim_audio == 0 {
            return err("dimensions must be ≥ 1");
        }
        if self.semantic_clusters == 0 || self.semantic_clusters > self.n_classes {
            return err("semantic_clusters must lie in [1, n_classes]");
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("cluster_spread", self.cluster_spread),
            ("modality_noise", self.modality_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be ≥ 0")));
            }
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return err("train_per_class and test_per_class must be ≥ 1");
        }
        Ok(())
    }
}

/// A generated benchmark plus the noiseless modality prototypes.
#[derive(Clone, Debug)]
pub struct SynthBenchmark {
    pub bank: EmbeddingBank,
    pub split: ClassSplit,
    pub dataset: FeatureDataset,
    pub visual_prototypes: Tensor2,
    pub audio_prototypes: Tensor2,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(Error::ZeroNorm);
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// `normalize(A·t + noise)` for every row `t`, with `A` a fresh Gaussian map.
fn prototypes(rng: &mut ChaCha8Rng, text: &Tensor2, dim: usize, noise: f64) -> Result<Tensor2> {
    let d = text.cols();
    let a = Tensor2::new(d, dim, gaussian(rng, d * dim, 1.0 / (d as f64).sqrt()))?;
    let mut p = text.matmul(&a)?;
    let scale = noise / (dim as f64).sqrt();
    for r in 0..p.rows() {
        for (x, e) in p.row_mut(r).iter_mut().zip(gaussian(rng, dim, scale)) {
            *x += e;
        }
    }
    normalize_rows(&mut p)?;
    Ok(p)
}

pub fn generate_benchmark(cfg: &SynthConfig) -> Result<SynthBenchmark> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim_text;
    let centroids = (0..cfg.semantic_clusters)
        .map(|_| unit(gaussian(&mut rng, d, 1.0)))
        .collect::<Result<Vec<_>>>()?;
    let spread = cfg.cluster_spread / (d as f64).sqrt();
    let rows = (0..cfg.n_classes)
        .map(|c| {
            let noise = gaussian(&mut rng, d, spread);
            unit(centroids[c % cfg.semantic_clusters].iter().zip(noise).map(|(a, b)| a + b).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let text = Tensor2::from_rows(&rows)?;
    let visual_prototypes = prototypes(&mut rng, &text, cfg.dim_visual, cfg.modality_noise)?;
    let audio_prototypes = prototypes(&mut rng, &text, cfg.dim_audio, cfg.modality_noise)?;

    let width = cfg.n_classes.saturating_sub(1).to_string().len().max(2);
    let names = (0..cfg.n_classes).map(|c| format!("class{c:0width$}")).collect();
    let bank = EmbeddingBank::new(names, text, None)?;
    let split = ClassSplit::new((0..cfg.n_seen).collect(), (cfg.n_seen..cfg.n_classes).collect(), cfg.n_classes)?;

    let mut samples = Vec::new();
    let sv = cfg.noise_sigma / (cfg.dim_visual as f64).sqrt();
    let sa = cfg.noise_sigma / (cfg.dim_audio as f64).sqrt();
    for (partition, per_class) in [
        (Partition::Train, cfg.train_per_class),
        (Partition::Val, cfg.val_per_class),
        (Partition::Test, cfg.test_per_class),
    ] {
        for c in 0..cfg.n_classes {
            if partition == Partition::Train && !split.is_seen(c) {
                continue;
            }
            for _ in 0..per_class {
                let v = visual_prototypes.row(c).iter().zip(gaussian(&mut rng, cfg.dim_visual, sv));
                let v = unit(v.map(|(p, e)| p + e).collect())?;
                let a = audio_prototypes.row(c).iter().zip(gaussian(&mut rng, cfg.dim_audio, sa));
                let a = unit(a.map(|(p, e)| p + e).collect())?;
                samples.push((v, a, c, partition));
            }
        }
    }
    let dataset = FeatureDataset::from_samples(samples, &bank, &split)?;
    Ok(SynthBenchmark {
        bank,
        split,
        dataset,
        visual_prototypes,
        audio_prototypes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;

    #[test]
    fn counts_match_the_config() {
        let cfg = SynthConfig::default();
        let b = generate_benchmark(&cfg).unwrap();
        assert_eq!(b.bank.len(), 18);
        assert_eq!(b.bank.dim(), 32);
        assert_eq!(b.split.seen().len(), 12);
        assert_eq!(b.split.unseen(), &[12, 13, 14, 15, 16, 17]);
        assert_eq!(b.dataset.indices(Partition::Train).len(), 12 * 40);
        assert_eq!(b.dataset.indices(Partition::Val).len(), 18 * 10);
        assert_eq!(b.dataset.indices(Partition::Test).len(), 18 * 10);
        assert_eq!((b.dataset.visual_dim(), b.dataset.audio_dim()), (64, 48));
        for i in b.dataset.indices(Partition::Train) {
            assert!(b.split.is_seen(b.dataset.labels[i]));
        }
        assert_eq!(b.bank.class_names()[3], "class03");
    }

    #[test]
    fn rows_are_unit() {
        let b = generate_benchmark(&SynthConfig::default()).unwrap();
        for t in [b.bank.initial(), &b.dataset.visual, &b.dataset.audio, &b.visual_prototypes] {
            for r in t.iter_rows() {
                assert!((dot(r, r).sqrt() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig {
            seed: 5,
            ..SynthConfig::default()
        };
        let a = generate_benchmark(&cfg).unwrap();
        let b = generate_benchmark(&cfg).unwrap();
        assert_eq!(a.bank.to_bytes().unwrap(), b.bank.to_bytes().unwrap());
        assert_eq!(a.dataset.to_bytes(&a.bank).unwrap(), b.dataset.to_bytes(&b.bank).unwrap());
        let c = generate_benchmark(&SynthConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a.bank.to_bytes().unwrap(), c.bank.to_bytes().unwrap());
    }

    #[test]
    fn noiseless_samples_match_their_prototype() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            ..SynthConfig::default()
        };
        let b = generate_benchmark(&cfg).unwrap();
        for i in 0..b.dataset.len() {
            let v = b.dataset.visual.row(i);
            let best = (0..18)
                .max_by(|&x, &y| dot(v, b.visual_prototypes.row(x)).total_cmp(&dot(v, b.visual_prototypes.row(y))))
                .unwrap();
            assert_eq!(best, b.dataset.labels[i]);
        }
    }

    #[test]
    fn clusters_are_semantically_coherent() {
        for seed in 0..5 {
            let cfg = SynthConfig {
                seed,
                ..SynthConfig::default()
            };
            let b = generate_benchmark(&cfg).unwrap();
            let t = b.bank.initial();
            let (mut within, mut across) = (Vec::new(), Vec::new());
            for i in 0..18 {
                for j in i + 1..18 {
                    let c = dot(t.row(i), t.row(j));
                    if i % 3 == j % 3 { within.push(c) } else { across.push(c) }
                }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            assert!(mean(&within) > mean(&across) + 0.2, "seed {seed}");
        }
    }

    #[test]
    fn invalid_configs() {
        let base = SynthConfig::default();
        for bad in [
            SynthConfig { n_seen: 18, ..base.clone() },
            SynthConfig { semantic_clusters: 19, ..base.clone() },
            SynthConfig { noise_sigma: -0.1, ..base.clone() },
            SynthConfig { dim_text: 0, ..base.clone() },
        ] {
            assert!(generate_benchmark(&bad).is_err());
        }
    }
}
