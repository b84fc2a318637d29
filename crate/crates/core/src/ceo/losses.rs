//! Separability, proximity and margin-ranking losses with their subgradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metric::{pairwise_distances, DistanceMetric};
use crate::error::{Error, Result};
use crate::numerics::{norm, par, Tensor2};

/// Loss value, gradient with respect to the optimized embeddings, and the
/// number of pairs whose gradient was dropped because they coincide.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub grad: Tensor2,
    pub degenerate_pairs: usize,
}

/// An ordered class triplet `(c, i, j)` with pairwise distinct entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub c: usize,
    pub i: usize,
    pub j: usize,
}

/// Number of ordered triplets over `n` classes.
pub fn triplet_count(n: usize) -> usize {
    n * n.saturating_sub(1) * n.saturating_sub(2)
}

impl Triplet {
    /// Inverse of the lexicographic enumeration used by [`sample_triplets`].
    fn from_index(idx: usize, n: usize) -> Self {
        let per_anchor = (n - 1) * (n - 2);
        let c = idx / per_anchor;
        let rest = idx % per_anchor;
        let mut i = rest / (n - 2);
        let mut j = rest % (n - 2);
        if i >= c {
            i += 1;
        }
        // j skips both c and i
        let (lo, hi) = if c < i { (c, i) } else { (i, c) };
        if j >= lo {
            j += 1;
        }
        if j >= hi {
            j += 1;
        }
        Triplet { c, i, j }
    }
}

/// Draws `budget` distinct triplets uniformly without replacement, sorted.
pub fn sample_triplets<R: Rng + ?Sized>(n: usize, budget: usize, rng: &mut R) -> Vec<Triplet> {
    let total = triplet_count(n);
    let mut idx = rand::seq::index::sample(rng, total, budget.min(total)).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|k| Triplet::from_index(k, n)).collect()
}

fn check_rows(w: &Tensor2) -> Result<()> {
    if w.rows() < 2 {
        return Err(Error::Invalid(format!("need at least 2 class embeddings, got {}", w.rows())));
    }
    Ok(())
}

/// `−Σ_c min_{k≠c} d(w_c, w_k)`; nearest-neighbor ties go to the smallest index.
pub fn loss_separability(w: &Tensor2, metric: DistanceMetric, zero_dist_epsilon: f64) -> Result<LossEval> {
    check_rows(w)?;
    let c = w.rows();
    let nearest: Vec<(usize, f64)> = par::map_range(c, |a| {
        let mut best = (usize::MAX, f64::INFINITY);
        for k in (0..c).filter(|&k| k != a) {
            let d = metric.distance(w.row(a), w.row(k));
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    });
    let mut grad = Tensor2::zeros(c, w.cols());
    let mut value = 0.0;
    let mut degenerate = 0;
    let mut gu = vec![0.0; w.cols()];
    let mut gv = vec![0.0; w.cols()];
    for (a, &(k, d)) in nearest.iter().enumerate() {
        value -= d;
        if metric.degenerate(d, zero_dist_epsilon) {
            degenerate += 1;
            continue;
        }
        gu.fill(0.0);
        gv.fill(0.0);
        metric.accumulate_grad(w.row(a), w.row(k), d, -1.0, &mut gu, &mut gv);
        for (g, x) in grad.row_mut(a).iter_mut().zip(&gu) {
            *g += x;
        }
        for (g, x) in grad.row_mut(k).iter_mut().zip(&gv) {
            *g += x;
        }
    }
    Ok(LossEval {
        value,
        grad,
        degenerate_pairs: degenerate,
    })
}

/// `Σ_c ‖w_c − t_c‖₂`, with a zero subgradient where `w_c = t_c`.
pub fn loss_semantic_proximity(w: &Tensor2, t: &Tensor2, zero_dist_epsilon: f64) -> Result<LossEval> {
    if w.shape() != t.shape() {
        return Err(Error::Dimension(format!("w {:?} vs t {:?}", w.shape(), t.shape())));
    }
    let mut grad = Tensor2::zeros(w.rows(), w.cols());
    let mut value = 0.0;
    for r in 0..w.rows() {
        let diff: Vec<f64> = w.row(r).iter().zip(t.row(r)).map(|(a, b)| a - b).collect();
        let d = norm(&diff);
        value += d;
        if d >= zero_dist_epsilon {
            for (g, x) in grad.row_mut(r).iter_mut().zip(&diff) {
                *g = x / d;
            }
        }
    }
    Ok(LossEval {
        value,
        grad,
        degenerate_pairs: 0,
    })
}

/// Which triplets the ranking loss sums over.
#[derive(Clone, Debug)]
pub enum TripletSet<'a> {
    All,
    Given(&'a [Triplet]),
}

/// Options for the margin-ranking loss.
#[derive(Clone, Copy, Debug)]
pub struct RankOptions {
    pub margin: f64,
    pub metric: DistanceMetric,
    pub tie_epsilon: f64,
    pub zero_dist_epsilon: f64,
    /// Multiplies value and gradient; used to rescale a triplet sample to the
    /// magnitude of the full sum.
    pub scale: f64,
}

/// Margin ranking loss over triplets:
/// `Σ max{0, m − sign(dᵗ_ci − dᵗ_cj)(dʷ_ci − dʷ_cj)}`.
///
/// Triplets whose reference distances differ by less than `tie_epsilon`
/// contribute nothing.
pub fn loss_semantic_rank(w: &Tensor2, t: &Tensor2, triplets: TripletSet<'_>, opts: RankOptions) -> Result<LossEval> {
    if w.shape() != t.shape() {
        return Err(Error::Dimension(format!("w {:?} vs t {:?}", w.shape(), t.shape())));
    }
    check_rows(w)?;
    let c = w.rows();
    let dt = pairwise_distances(t, opts.metric)?;
    let dw = pairwise_distances(w, opts.metric)?;

    // Per anchor: (value, coefficient on d(w_anchor, w_k) for every k).
    let per_anchor = |anchor: usize, pairs: &mut dyn Iterator<Item = (usize, usize)>| {
        let mut value = 0.0;
        let mut coef = vec![0.0; c];
        for (i, j) in pairs {
            let delta_t = dt.get(anchor, i) - dt.get(anchor, j);
            if delta_t.abs() < opts.tie_epsilon {
                continue;
            }
            let s = delta_t.signum();
            let h = opts.margin - s * (dw.get(anchor, i) - dw.get(anchor, j));
            if h > 0.0 {
                value += h;
                coef[i] -= s;
                coef[j] += s;
            }
        }
        (value, coef)
    };

    let rows: Vec<(f64, Vec<f64>)> = match triplets {
        TripletSet::All => par::map_range(c, |a| {
            let mut it = (0..c)
                .filter(move |&i| i != a)
                .flat_map(move |i| (0..c).filter(move |&j| j != a && j != i).map(move |j| (i, j)));
            per_anchor(a, &mut it)
        }),
        TripletSet::Given(list) => {
            if let Some(bad) = list
                .iter()
                .find(|tr| tr.c >= c || tr.i >= c || tr.j >= c || tr.c == tr.i || tr.c == tr.j || tr.i == tr.j)
            {
                return Err(Error::Invalid(format!("triplet {bad:?} invalid for {c} classes")));
            }
            let mut bounds = vec![0usize; c + 1];
            let mut sorted = list.to_vec();
            sorted.sort_unstable();
            for tr in &sorted {
                bounds[tr.c + 1] += 1;
            }
            for a in 0..c {
                bounds[a + 1] += bounds[a];
            }
            par::map_range(c, |a| {
                let mut it = sorted[bounds[a]..bounds[a + 1]].iter().map(|tr| (tr.i, tr.j));
                per_anchor(a, &mut it)
            })
        }
    };

    let mut value = 0.0;
    let mut coef = Tensor2::zeros(c, c);
    for (a, (v, row)) in rows.into_iter().enumerate() {
        value += v;
        coef.row_mut(a).copy_from_slice(&row);
    }

    let mut grad = Tensor2::zeros(c, w.cols());
    let mut degenerate = 0;
    let mut gu = vec![0.0; w.cols()];
    let mut gv = vec![0.0; w.cols()];
    for a in 0..c {
        for b in a + 1..c {
            let k = (coef.get(a, b) + coef.get(b, a)) * opts.scale;
            if k == 0.0 {
                continue;
            }
            let d = dw.get(a, b);
            if opts.metric.degenerate(d, opts.zero_dist_epsilon) {
                degenerate += 1;
                continue;
            }
            gu.fill(0.0);
            gv.fill(0.0);
            opts.metric.accumulate_grad(w.row(a), w.row(b), d, k, &mut gu, &mut gv);
            for (g, x) in grad.row_mut(a).iter_mut().zip(&gu) {
                *g += x;
            }
            for (g, x) in grad.row_mut(b).iter_mut().zip(&gv) {
                *g += x;
            }
        }
    }
    Ok(LossEval {
        value: value * opts.scale,
        grad,
        degenerate_pairs: degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, normalize_rows};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sphere(rng: &mut ChaCha8Rng, c: usize, d: usize) -> Tensor2 {
        let mut t = Tensor2::new(c, d, (0..c * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        normalize_rows(&mut t).unwrap();
        t
    }

    fn opts(metric: DistanceMetric, margin: f64) -> RankOptions {
        RankOptions {
            margin,
            metric,
            tie_epsilon: 1e-9,
            zero_dist_epsilon: 1e-9,
            scale: 1.0,
        }
    }

    #[test]
    fn separability_antipodal() {
        let w = Tensor2::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let l = loss_separability(&w, DistanceMetric::Euclidean, 1e-9).unwrap();
        assert!((l.value + 4.0).abs() < 1e-15);
    }

    #[test]
    fn separability_orthonormal_triple() {
        let w = Tensor2::identity(3);
        let l = loss_separability(&w, DistanceMetric::Euclidean, 1e-9).unwrap();
        assert!((l.value + 3.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!((l.value + 4.24264).abs() < 1e-5);
    }

    #[test]
    fn separability_tie_picks_smallest_index() {
        // class 0 is equidistant from 1 and 2; its gradient must come from class 1 only
        let w = Tensor2::identity(3);
        let l = loss_separability(&w, DistanceMetric::Cosine, 1e-9).unwrap();
        // nearest neighbors 0→1, 1→0, 2→0; each pair (a, k) adds w_k to row a and w_a to row k
        assert_eq!(l.grad.row(0), &[0.0, 2.0, 1.0]);
        assert_eq!(l.grad.row(1), &[2.0, 0.0, 0.0]);
        assert_eq!(l.grad.row(2), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn separability_records_degenerate_pairs() {
        let w = Tensor2::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let l = loss_separability(&w, DistanceMetric::Euclidean, 1e-9).unwrap();
        assert_eq!(l.degenerate_pairs, 2);
        // class 1 only touches the coincident pair; class 2 still pushes on class 0
        assert_eq!(l.grad.row(1), &[0.0, 0.0]);
        assert_ne!(l.grad.row(0), &[0.0, 0.0]);
        assert!(l.grad.all_finite());
    }

    #[test]
    fn proximity_values() {
        let t = Tensor2::from_rows(&[[0.0, 1.0, 0.0]]).unwrap();
        let l = loss_semantic_proximity(&t, &t, 1e-9).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad.data().iter().all(|&g| g == 0.0));
        let w = Tensor2::from_rows(&[[0.3, 1.4, 0.0]]).unwrap();
        let l = loss_semantic_proximity(&w, &t, 1e-9).unwrap();
        assert!((l.value - 0.5).abs() < 1e-15);
        assert!(loss_semantic_proximity(&w, &Tensor2::zeros(1, 2), 1e-9).is_err());
    }

    /// Builds 3 classes where d^t_01 − d^t_02 = `dt` and d^w_01 − d^w_02 = `dw`
    /// using the euclidean metric on collinear points.
    fn rank_term(dt: f64, dw: f64) -> f64 {
        let t = Tensor2::from_rows(&[[0.0], [1.0], [1.0 - dt]]).unwrap();
        let w = Tensor2::from_rows(&[[0.0], [2.0], [2.0 - dw]]).unwrap();
        let only = [Triplet { c: 0, i: 1, j: 2 }];
        loss_semantic_rank(&w, &t, TripletSet::Given(&only), opts(DistanceMetric::Euclidean, 1.0))
            .unwrap()
            .value
    }

    #[test]
    fn rank_term_direct_evaluation() {
        assert_eq!(rank_term(0.3, 1.5), 0.0);
        assert!((rank_term(0.3, 0.4) - 0.6).abs() < 1e-12);
        // reversed ordering costs more than the margin
        assert!((rank_term(0.3, -0.4) - 1.4).abs() < 1e-12);
    }

    #[test]
    fn rank_tie_rule() {
        let t = Tensor2::from_rows(&[[0.0], [1.0], [-1.0]]).unwrap();
        let w = Tensor2::from_rows(&[[0.0], [0.5], [-2.0]]).unwrap();
        let only = [Triplet { c: 0, i: 1, j: 2 }];
        let l = loss_semantic_rank(&w, &t, TripletSet::Given(&only), opts(DistanceMetric::Euclidean, 1.0)).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn rank_zero_margin_at_reference_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = sphere(&mut rng, 6, 4);
        for m in [DistanceMetric::Euclidean, DistanceMetric::Cosine, DistanceMetric::Manhattan] {
            let l = loss_semantic_rank(&t, &t, TripletSet::All, opts(m, 0.0)).unwrap();
            assert_eq!(l.value, 0.0);
        }
    }

    #[test]
    fn rank_rejects_bad_triplets() {
        let t = Tensor2::identity(3);
        let bad = [Triplet { c: 0, i: 0, j: 2 }];
        assert!(loss_semantic_rank(&t, &t, TripletSet::Given(&bad), opts(DistanceMetric::Cosine, 1.0)).is_err());
        let oob = [Triplet { c: 0, i: 1, j: 3 }];
        assert!(loss_semantic_rank(&t, &t, TripletSet::Given(&oob), opts(DistanceMetric::Cosine, 1.0)).is_err());
    }

    #[test]
    fn full_enumeration_equals_explicit_list() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = sphere(&mut rng, 5, 3);
        let w = sphere(&mut rng, 5, 3);
        let all: Vec<Triplet> = (0..triplet_count(5)).map(|k| Triplet::from_index(k, 5)).collect();
        let a = loss_semantic_rank(&w, &t, TripletSet::All, opts(DistanceMetric::Euclidean, 1.0)).unwrap();
        let b = loss_semantic_rank(&w, &t, TripletSet::Given(&all), opts(DistanceMetric::Euclidean, 1.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn triplet_index_decoding_is_a_bijection() {
        for n in 3..7 {
            let mut seen: Vec<Triplet> = (0..triplet_count(n)).map(|k| Triplet::from_index(k, n)).collect();
            assert!(seen.iter().all(|t| t.c != t.i && t.c != t.j && t.i != t.j && t.j < n));
            // lexicographic order is preserved
            assert!(seen.windows(2).all(|w| w[0] < w[1]));
            seen.dedup();
            assert_eq!(seen.len(), n * (n - 1) * (n - 2));
        }
    }

    #[test]
    fn sampling_is_without_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_triplets(10, 500, &mut rng);
        assert_eq!(s.len(), 500);
        let mut d = s.clone();
        d.dedup();
        assert_eq!(d.len(), 500);
        assert_eq!(sample_triplets(4, 1000, &mut rng).len(), 24);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (c, d) = (5, 8);
        for metric in [DistanceMetric::Euclidean, DistanceMetric::Cosine, DistanceMetric::Manhattan] {
            for _ in 0..10 {
                let w = sphere(&mut rng, c, d);
                let t = sphere(&mut rng, c, d);
                let f_sep = |p: &[f64]| {
                    let w = Tensor2::new(c, d, p.to_vec()).unwrap();
                    loss_separability(&w, metric, 1e-9).unwrap().value
                };
                let g = loss_separability(&w, metric, 1e-9).unwrap().grad;
                let r = finite_diff_check(f_sep, g.data(), w.data(), 1e-5).unwrap();
                assert!(r.passes(1e-4), "sep {metric}: {r:?}");

                let f_rank = |p: &[f64]| {
                    let w = Tensor2::new(c, d, p.to_vec()).unwrap();
                    loss_semantic_rank(&w, &t, TripletSet::All, opts(metric, 0.5)).unwrap().value
                };
                let g = loss_semantic_rank(&w, &t, TripletSet::All, opts(metric, 0.5)).unwrap().grad;
                let r = finite_diff_check(f_rank, g.data(), w.data(), 1e-5).unwrap();
                assert!(r.passes(1e-4), "rank {metric}: {r:?}");
            }
        }
        for _ in 0..10 {
            let w = sphere(&mut rng, c, d);
            let t = sphere(&mut rng, c, d);
            let f = |p: &[f64]| {
                let w = Tensor2::new(c, d, p.to_vec()).unwrap();
                loss_semantic_proximity(&w, &t, 1e-9).unwrap().value
            };
            let g = loss_semantic_proximity(&w, &t, 1e-9).unwrap().grad;
            let r = finite_diff_check(f, g.data(), w.data(), 1e-5).unwrap();
            assert!(r.passes(1e-4), "prox: {r:?}");
        }
    }
}
