//! Class embedding optimization.
//!
//! Starting from the text-encoder embeddings `t`, gradient descent on the unit
//! sphere minimizes `(1 − α)·L_sem + α·L_sep`, where `L_sep` rewards distance
//! to each class's nearest neighbor and `L_sem` either keeps each embedding
//! close to its initialization (proximity) or preserves the ordering of
//! inter-class distances (margin ranking over class triplets).

mod kendall;
mod losses;
mod metric;
mod report;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use kendall::kendall_tau;
pub use losses::{
    loss_semantic_proximity, loss_semantic_rank, loss_separability, sample_triplets, triplet_count, LossEval,
    RankOptions, Triplet, TripletSet,
};
pub use metric::{min_pairwise_distance, pairwise_distances, upper_triangle, DistanceMetric};
pub use report::{nearest_neighbor_report, NnEntry, NnReport};

use crate::error::{Error, Result};
use crate::numerics::{project_to_sphere, Tensor2};
use crate::store::EmbeddingBank;

/// Semantic-preservation term of the joint objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemLoss {
    Proximity,
    #[default]
    Rank,
}

/// Triplets sampled per step once the class count exceeds
/// [`FULL_ENUMERATION_MAX_CLASSES`] and no explicit budget is set.
pub const DEFAULT_TRIPLET_BUDGET: usize = 50_000;
pub const FULL_ENUMERATION_MAX_CLASSES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CeoConfig {
    pub alpha: f64,
    pub margin: f64,
    pub sem_loss: SemLoss,
    pub metric: DistanceMetric,
    pub steps: usize,
    pub lr: f64,
    /// Triplets per step. `None` enumerates all triplets up to 64 classes and
    /// samples 50,000 beyond that.
    pub triplet_budget: Option<usize>,
    pub tie_epsilon: f64,
    pub zero_dist_epsilon: f64,
    pub seed: u64,
}

impl Default for CeoConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            margin: 1.0,
            sem_loss: SemLoss::Rank,
            metric: DistanceMetric::Cosine,
            steps: 2000,
            lr: 0.05,
            triplet_budget: None,
            tie_epsilon: 1e-9,
            zero_dist_epsilon: 1e-9,
            seed: 0,
        }
    }
}

impl CeoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be ≥ 0, got {}", self.margin)));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.triplet_budget == Some(0) {
            return Err(Error::Config("triplet_budget must be ≥ 1".into()));
        }
        if !(self.tie_epsilon >= 0.0) || !(self.zero_dist_epsilon >= 0.0) {
            return Err(Error::Config("epsilons must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Triplets to draw per step for `n` classes, or `None` for full enumeration.
    pub fn sampled_triplets(&self, n: usize) -> Option<usize> {
        let total = triplet_count(n);
        let budget = match self.triplet_budget {
            Some(b) => b,
            None if n <= FULL_ENUMERATION_MAX_CLASSES => return None,
            None => DEFAULT_TRIPLET_BUDGET,
        };
        (budget < total).then_some(budget)
    }

    fn rank_options(&self, scale: f64) -> RankOptions {
        RankOptions {
            margin: self.margin,
            metric: self.metric,
            tie_epsilon: self.tie_epsilon,
            zero_dist_epsilon: self.zero_dist_epsilon,
            scale,
        }
    }
}

/// Joint objective evaluated at one iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct JointEval {
    pub value: f64,
    pub sem: f64,
    pub sep: f64,
    pub grad: Tensor2,
    pub degenerate_pairs: usize,
}

/// `(1 − α)·L_sem + α·L_sep` and its gradient. `rng` is drawn from only when
/// triplets are sampled.
pub fn joint_objective(w: &Tensor2, t: &Tensor2, config: &CeoConfig, rng: &mut ChaCha8Rng) -> Result<JointEval> {
    let sem = match config.sem_loss {
        SemLoss::Proximity => loss_semantic_proximity(w, t, config.zero_dist_epsilon)?,
        SemLoss::Rank => match config.sampled_triplets(w.rows()) {
            None => loss_semantic_rank(w, t, TripletSet::All, config.rank_options(1.0))?,
            Some(budget) => {
                let sample = sample_triplets(w.rows(), budget, rng);
                // rescale the sample mean to the magnitude of the full sum
                let scale = triplet_count(w.rows()) as f64 / sample.len() as f64;
                loss_semantic_rank(w, t, TripletSet::Given(&sample), config.rank_options(scale))?
            }
        },
    };
    let sep = loss_separability(w, config.metric, config.zero_dist_epsilon)?;
    let a = config.alpha;
    let mut grad = Tensor2::zeros(w.rows(), w.cols());
    for ((g, s), p) in grad.data_mut().iter_mut().zip(sem.grad.data()).zip(sep.grad.data()) {
        *g = (1.0 - a) * s + a * p;
    }
    Ok(JointEval {
        value: (1.0 - a) * sem.value + a * sep.value,
        sem: sem.value,
        sep: sep.value,
        grad,
        degenerate_pairs: sem.degenerate_pairs + sep.degenerate_pairs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub sem: f64,
    pub sep: f64,
    pub joint: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CeoResult {
    #[serde(skip)]
    pub optimized: Tensor2,
    pub loss_trace: Vec<LossRecord>,
    pub min_pairwise_distance_before: f64,
    pub min_pairwise_distance_after: f64,
    /// Tau-b between the upper-triangular distances of the initial and
    /// optimized embeddings.
    pub kendall_tau: f64,
    /// Pair gradients dropped because two embeddings coincided, summed over steps.
    pub degenerate_pairs: usize,
    /// Set when optimization stopped on a non-finite loss; `optimized` then
    /// holds the last finite iterate.
    pub aborted: Option<String>,
}

impl CeoResult {
    pub fn trace_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Runs projected gradient descent on the joint objective starting from the
/// bank's initial embeddings.
pub fn optimize_class_embeddings(bank: &EmbeddingBank, config: &CeoConfig) -> Result<CeoResult> {
    optimize_with_observer(bank.initial(), config, |_, _| {})
}

/// [`optimize_class_embeddings`] on a raw embedding matrix, calling `observe`
/// with every post-projection iterate.
pub fn optimize_with_observer(
    initial: &Tensor2,
    config: &CeoConfig,
    mut observe: impl FnMut(usize, &Tensor2),
) -> Result<CeoResult> {
    config.validate()?;
    let t = initial;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut w = t.clone();
    let mut trace = Vec::with_capacity(config.steps);
    let mut degenerate = 0;
    let mut aborted = None;
    for step in 0..config.steps {
        let eval = joint_objective(&w, t, config, &mut rng)?;
        if !eval.value.is_finite() || !eval.grad.all_finite() {
            aborted = Some(format!("non-finite loss at step {step}"));
            break;
        }
        trace.push(LossRecord {
            sem: eval.sem,
            sep: eval.sep,
            joint: eval.value,
        });
        degenerate += eval.degenerate_pairs;
        let mut next = w.clone();
        let mut failed = false;
        for r in 0..next.rows() {
            let g = eval.grad.row(r);
            // rows without gradient stay bit-identical
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            for (x, gx) in next.row_mut(r).iter_mut().zip(g) {
                *x -= config.lr * gx;
            }
            match project_to_sphere(next.row(r)) {
                Ok(unit) => next.row_mut(r).copy_from_slice(&unit),
                Err(_) => failed = true,
            }
        }
        if failed || !next.all_finite() {
            aborted = Some(format!("iterate left the sphere at step {step}"));
            break;
        }
        w = next;
        observe(step, &w);
    }
    let before = pairwise_distances(t, config.metric)?;
    let after = pairwise_distances(&w, config.metric)?;
    let tri_before = upper_triangle(&before);
    let tri_after = upper_triangle(&after);
    let kendall = if tri_before.len() >= 2 {
        kendall_tau(&tri_before, &tri_after).unwrap_or(f64::NAN)
    } else {
        1.0
    };
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(CeoResult {
        optimized: w,
        loss_trace: trace,
        min_pairwise_distance_before: min(&tri_before),
        min_pairwise_distance_after: min(&tri_after),
        kendall_tau: kendall,
        degenerate_pairs: degenerate,
        aborted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, norm, normalize_rows};
    use rand::Rng;

    fn sphere(seed: u64, c: usize, d: usize) -> Tensor2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor2::new(c, d, (0..c * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        normalize_rows(&mut t).unwrap();
        t
    }

    #[test]
    fn alpha_one_is_separability() {
        let t = sphere(1, 6, 5);
        let w = sphere(2, 6, 5);
        let cfg = CeoConfig {
            alpha: 1.0,
            ..CeoConfig::default()
        };
        let j = joint_objective(&w, &t, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let s = loss_separability(&w, cfg.metric, cfg.zero_dist_epsilon).unwrap();
        assert_eq!(j.value, s.value);
        assert_eq!(j.grad, s.grad);
    }

    #[test]
    fn alpha_zero_proximity_at_init() {
        let t = sphere(3, 5, 4);
        let cfg = CeoConfig {
            alpha: 0.0,
            sem_loss: SemLoss::Proximity,
            ..CeoConfig::default()
        };
        let j = joint_objective(&t, &t, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(j.value, 0.0);
        let r = optimize_with_observer(&t, &CeoConfig { steps: 50, ..cfg }, |_, _| {}).unwrap();
        assert_eq!(r.optimized, t);
    }

    #[test]
    fn half_alpha_recomputed_from_components() {
        let t = sphere(4, 7, 6);
        let w = sphere(5, 7, 6);
        for sem_loss in [SemLoss::Proximity, SemLoss::Rank] {
            let cfg = CeoConfig {
                sem_loss,
                metric: DistanceMetric::Euclidean,
                ..CeoConfig::default()
            };
            let j = joint_objective(&w, &t, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let sep = loss_separability(&w, DistanceMetric::Euclidean, 1e-9).unwrap().value;
            let sem = match sem_loss {
                SemLoss::Proximity => loss_semantic_proximity(&w, &t, 1e-9).unwrap().value,
                SemLoss::Rank => loss_semantic_rank(&w, &t, TripletSet::All, cfg.rank_options(1.0)).unwrap().value,
            };
            assert!((j.value - 0.5 * (sem + sep)).abs() < 1e-12 * (1.0 + j.value.abs()));
        }
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        for seed in 0..10u64 {
            let t = sphere(100 + seed, 5, 6);
            let w = sphere(200 + seed, 5, 6);
            let cfg = CeoConfig {
                margin: 0.7,
                ..CeoConfig::default()
            };
            let g = joint_objective(&w, &t, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().grad;
            let f = |p: &[f64]| {
                let w = Tensor2::new(5, 6, p.to_vec()).unwrap();
                joint_objective(&w, &t, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().value
            };
            let r = finite_diff_check(f, g.data(), w.data(), 1e-5).unwrap();
            assert!(r.passes(1e-4), "{r:?}");
        }
    }

    #[test]
    fn iterates_stay_on_sphere_and_trace_is_complete() {
        let t = sphere(6, 8, 5);
        let cfg = CeoConfig {
            steps: 40,
            ..CeoConfig::default()
        };
        let r = optimize_with_observer(&t, &cfg, |_, w| {
            for row in w.iter_rows() {
                assert!((norm(row) - 1.0).abs() <= 1e-9);
            }
        })
        .unwrap();
        assert_eq!(r.loss_trace.len(), 40);
        assert!(r.aborted.is_none());
    }

    #[test]
    fn sampled_triplets_are_seeded() {
        let t = sphere(7, 12, 4);
        let cfg = CeoConfig {
            steps: 5,
            triplet_budget: Some(100),
            seed: 9,
            ..CeoConfig::default()
        };
        let a = optimize_with_observer(&t, &cfg, |_, _| {}).unwrap();
        let b = optimize_with_observer(&t, &cfg, |_, _| {}).unwrap();
        assert_eq!(a, b);
        let c = optimize_with_observer(&t, &CeoConfig { seed: 10, ..cfg }, |_, _| {}).unwrap();
        assert_ne!(a.optimized, c.optimized);
    }

    #[test]
    fn budget_resolution() {
        let cfg = CeoConfig::default();
        assert_eq!(cfg.sampled_triplets(64), None);
        assert_eq!(cfg.sampled_triplets(65), Some(DEFAULT_TRIPLET_BUDGET));
        let cfg = CeoConfig {
            triplet_budget: Some(10),
            ..cfg
        };
        assert_eq!(cfg.sampled_triplets(3), None);
        assert_eq!(cfg.sampled_triplets(4), Some(10));
    }

    #[test]
    fn config_validation() {
        assert!(CeoConfig { alpha: 1.5, ..CeoConfig::default() }.validate().is_err());
        let e = CeoConfig { margin: -1.0, ..CeoConfig::default() }.validate().unwrap_err();
        assert!(e.to_string().contains("margin must be ≥ 0"));
        assert!(CeoConfig { steps: 0, ..CeoConfig::default() }.validate().is_err());
        assert!(CeoConfig { lr: 0.0, ..CeoConfig::default() }.validate().is_err());
    }
}
