//! Kendall's tau-b in O(n log n) (Knight's merge-sort algorithm).

use crate::error::{Error, Result};

fn tie_pairs(sorted_run_lengths: impl Iterator<Item = usize>) -> u64 {
    sorted_run_lengths.map(|t| (t as u64) * (t as u64).saturating_sub(1) / 2).sum()
}

fn runs<T: PartialEq>(v: &[T]) -> impl Iterator<Item = usize> + '_ {
    let mut i = 0;
    std::iter::from_fn(move || {
        if i >= v.len() {
            return None;
        }
        let start = i;
        while i < v.len() && v[i] == v[start] {
            i += 1;
        }
        Some(i - start)
    })
}

/// Sorts `v` in place, returning the number of inversions (strict).
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], &mut buf[..mid]) + merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    let k2 = k + mid - i;
    buf[k2..n].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall rank correlation with tie correction (tau-b).
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("kendall tau on {} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Invalid("kendall tau needs at least two observations".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kendall tau input".into()));
    }
    let n = x.len() as u64;
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let n1 = tie_pairs(runs(&xs));
    let n3 = tie_pairs(runs(&pairs));
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; ys.len()];
    let swaps = merge_count(&mut ys, &mut buf);
    let n2 = tie_pairs(runs(&ys));
    let n0 = n * (n - 1) / 2;
    let denom = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::Invalid("kendall tau undefined for constant input".into()));
    }
    let s = n0 as f64 - n1 as f64 - n2 as f64 + n3 as f64 - 2.0 * swaps as f64;
    Ok(s / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// O(n²) tau-b straight from the definition.
    fn brute_force(x: &[f64], y: &[f64]) -> f64 {
        let (mut conc, mut disc, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                let dx = x[i] - x[j];
                let dy = y[i] - y[j];
                if dx == 0.0 && dy == 0.0 {
                    continue;
                } else if dx == 0.0 {
                    tx += 1;
                } else if dy == 0.0 {
                    ty += 1;
                } else if (dx > 0.0) == (dy > 0.0) {
                    conc += 1;
                } else {
                    disc += 1;
                }
            }
        }
        let denom = (((conc + disc + tx) * (conc + disc + ty)) as f64).sqrt();
        (conc - disc) as f64 / denom
    }

    #[test]
    fn perfect_and_reversed() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(kendall_tau(&x, &x).unwrap(), 1.0);
        let y = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(kendall_tau(&x, &y).unwrap(), -1.0);
    }

    #[test]
    fn known_value_with_ties() {
        // scipy.stats.kendalltau([12, 2, 1, 12, 2], [1, 4, 7, 1, 0]) = -0.4714045207910316
        let x = [12.0, 2.0, 1.0, 12.0, 2.0];
        let y = [1.0, 4.0, 7.0, 1.0, 0.0];
        assert!((kendall_tau(&x, &y).unwrap() + 0.4714045207910316).abs() < 1e-12);
        assert!((brute_force(&x, &y) + 0.4714045207910316).abs() < 1e-12);
    }

    #[test]
    fn constant_input_is_error() {
        assert!(kendall_tau(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force(v in prop::collection::vec((0u8..6, 0u8..6), 3..60)) {
            let x: Vec<f64> = v.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = v.iter().map(|p| p.1 as f64).collect();
            let bf = brute_force(&x, &y);
            match kendall_tau(&x, &y) {
                Ok(t) => prop_assert!((t - bf).abs() < 1e-12, "{} vs {}", t, bf),
                Err(_) => prop_assert!(!bf.is_finite()),
            }
        }
    }
}
