use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Tensor2};

/// Distance between class embeddings. On unit vectors: euclidean `‖u−v‖₂`,
/// cosine `1 − u·v`, manhattan `‖u−v‖₁`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    Euclidean,
    #[default]
    Cosine,
    Manhattan,
}

impl DistanceMetric {
    pub fn distance(self, u: &[f64], v: &[f64]) -> f64 {
        match self {
            DistanceMetric::Euclidean => u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
            DistanceMetric::Cosine => 1.0 - dot(u, v),
            DistanceMetric::Manhattan => u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum(),
        }
    }

    /// Whether a pair at distance `d` has no usable gradient.
    pub(crate) fn degenerate(self, d: f64, zero_dist_epsilon: f64) -> bool {
        match self {
            DistanceMetric::Euclidean | DistanceMetric::Manhattan => d < zero_dist_epsilon,
            DistanceMetric::Cosine => false,
        }
    }

    /// Adds `coef · ∂d(u,v)/∂u` to `gu` and `coef · ∂d(u,v)/∂v` to `gv`, where
    /// `d` is the already computed distance.
    pub(crate) fn accumulate_grad(self, u: &[f64], v: &[f64], d: f64, coef: f64, gu: &mut [f64], gv: &mut [f64]) {
        match self {
            DistanceMetric::Euclidean => {
                let s = coef / d;
                for k in 0..u.len() {
                    let g = s * (u[k] - v[k]);
                    gu[k] += g;
                    gv[k] -= g;
                }
            }
            DistanceMetric::Cosine => {
                for k in 0..u.len() {
                    gu[k] -= coef * v[k];
                    gv[k] -= coef * u[k];
                }
            }
            DistanceMetric::Manhattan => {
                for k in 0..u.len() {
                    let diff = u[k] - v[k];
                    let g = if diff > 0.0 {
                        coef
                    } else if diff < 0.0 {
                        -coef
                    } else {
                        0.0
                    };
                    gu[k] += g;
                    gv[k] -= g;
                }
            }
        }
    }
}

impl std::fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DistanceMetric::Euclidean => "euclidean",
            DistanceMetric::Cosine => "cosine",
            DistanceMetric::Manhattan => "manhattan",
        })
    }
}

/// Symmetric `C×C` matrix of pairwise distances with a zero diagonal.
pub fn pairwise_distances(embeddings: &Tensor2, metric: DistanceMetric) -> Result<Tensor2> {
    let c = embeddings.rows();
    if c < 2 {
        return Err(Error::Invalid(format!("pairwise distances need ≥ 2 classes, got {c}")));
    }
    let mut out = Tensor2::zeros(c, c);
    for a in 0..c {
        for b in a + 1..c {
            // clamp tiny negative cosine distances from rounding
            let d = metric.distance(embeddings.row(a), embeddings.row(b)).max(0.0);
            out.set(a, b, d);
            out.set(b, a, d);
        }
    }
    Ok(out)
}

/// Upper-triangular entries (`a < b`) of a square matrix in row order.
pub fn upper_triangle(m: &Tensor2) -> Vec<f64> {
    let c = m.rows();
    let mut out = Vec::with_capacity(c * c.saturating_sub(1) / 2);
    for a in 0..c {
        for b in a + 1..c {
            out.push(m.get(a, b));
        }
    }
    out
}

/// Smallest off-diagonal distance.
pub fn min_pairwise_distance(embeddings: &Tensor2, metric: DistanceMetric) -> Result<f64> {
    let d = pairwise_distances(embeddings, metric)?;
    Ok(upper_triangle(&d).into_iter().fold(f64::INFINITY, f64::min))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_pair() {
        let e = Tensor2::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let d = pairwise_distances(&e, DistanceMetric::Euclidean).unwrap();
        assert!((d.get(0, 1) - 2f64.sqrt()).abs() < 1e-15);
        let d = pairwise_distances(&e, DistanceMetric::Cosine).unwrap();
        assert!((d.get(0, 1) - 1.0).abs() < 1e-15);
        let d = pairwise_distances(&e, DistanceMetric::Manhattan).unwrap();
        assert!((d.get(0, 1) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn identical_rows_are_zero() {
        let r = [0.6, 0.8];
        let e = Tensor2::from_rows(&[r, r, r]).unwrap();
        for m in [DistanceMetric::Euclidean, DistanceMetric::Cosine, DistanceMetric::Manhattan] {
            let d = pairwise_distances(&e, m).unwrap();
            assert!(d.data().iter().all(|&x| x.abs() < 1e-15), "{m}");
        }
    }

    #[test]
    fn needs_two_rows() {
        let e = Tensor2::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(pairwise_distances(&e, DistanceMetric::Cosine).is_err());
    }
}
