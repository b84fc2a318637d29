use crate::error::{Error, Result};
use crate::numerics::Tensor2;

/// Batch contrastive loss over a `B×B` score matrix whose entry `(i, k)` is
/// the similarity of sample `i` with the class of sample `k`.
///
/// The loss is the mean over `i` of `−log softmax(scores[i])[i]`. Columns that
/// repeat a class stay in the denominator unless `dedup` is set, in which case
/// only the first column of each class is kept. Returns the loss and its
/// gradient with respect to `scores`.
pub fn contrastive_loss(scores: &Tensor2, labels: &[usize], dedup: bool) -> Result<(f64, Tensor2)> {
    let b = scores.rows();
    if b == 0 {
        return Err(Error::Empty("batch"));
    }
    if scores.cols() != b || labels.len() != b {
        return Err(Error::Dimension(format!(
            "score matrix {:?} for {} labels",
            scores.shape(),
            labels.len()
        )));
    }
    if !scores.all_finite() {
        return Err(Error::NonFinite("contrastive scores".into()));
    }
    let keep: Vec<bool> = (0..b)
        .map(|k| !dedup || labels[..k].iter().all(|&l| l != labels[k]))
        .collect();
    let mut grad = Tensor2::zeros(b, b);
    let mut total = 0.0;
    for i in 0..b {
        let row = scores.row(i);
        // With dedup the positive is the kept column of sample i's class.
        let pos = (0..b).find(|&k| keep[k] && labels[k] == labels[i]).unwrap_or(i);
        let top = (0..b)
            .filter(|&k| keep[k])
            .fold(pos, |m, k| if row[k] > row[m] { k } else { m });
        let max = row[top];
        // z = 1 + rest, and ln z is taken through ln_1p to keep small losses exact.
        let rest: f64 = (0..b)
            .filter(|&k| keep[k] && k != top)
            .map(|k| (row[k] - max).exp())
            .sum();
        let z = 1.0 + rest;
        total += max - row[pos] + rest.ln_1p();
        let g = grad.row_mut(i);
        for k in 0..b {
            if keep[k] {
                g[k] = (row[k] - max).exp() / z / b as f64;
            }
        }
        g[pos] -= 1.0 / b as f64;
    }
    Ok((total / b as f64, grad))
}
