use crate::error::{Error, Result};
use crate::numerics::Tensor2;

/// `2SU/(S+U)`, or 0 when both are 0.
pub fn harmonic_mean(seen: f64, unseen: f64) -> f64 {
    if seen + unseen > 0.0 {
        2.0 * seen * unseen / (seen + unseen)
    } else {
        0.0
    }
}

/// Unweighted mean of per-class accuracy (in percent) over the classes of
/// `class_subset` that have at least one sample. Samples whose true class is
/// outside the subset are ignored.
pub fn mean_class_accuracy(predictions: &[usize], truths: &[usize], class_subset: &[usize]) -> Result<f64> {
    Ok(per_class_accuracy(predictions, truths, class_subset)?.0)
}

/// Mean class accuracy plus `(class, accuracy%)` for each class with samples.
pub fn per_class_accuracy(
    predictions: &[usize],
    truths: &[usize],
    class_subset: &[usize],
) -> Result<(f64, Vec<(usize, f64)>)> {
    if predictions.len() != truths.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truths.len()
        )));
    }
    if class_subset.is_empty() {
        return Err(Error::Empty("class subset"));
    }
    let mut per = Vec::new();
    for &c in class_subset {
        let (mut hit, mut total) = (0usize, 0usize);
        for (&p, &t) in predictions.iter().zip(truths) {
            if t == c {
                total += 1;
                hit += usize::from(p == c);
            }
        }
        if total > 0 {
            per.push((c, 100.0 * hit as f64 / total as f64));
        }
    }
    if per.is_empty() {
        return Err(Error::Empty("evaluation samples for every class in the subset"));
    }
    let mean = per.iter().map(|p| p.1).sum::<f64>() / per.len() as f64;
    Ok((mean, per))
}

/// Counts of (true class, predicted class).
pub fn confusion_matrix(predictions: &[usize], truths: &[usize], classes: usize) -> Result<Tensor2> {
    if predictions.len() != truths.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truths.len()
        )));
    }
    let mut m = Tensor2::zeros(classes, classes);
    for (&p, &t) in predictions.iter().zip(truths) {
        if p >= classes || t >= classes {
            return Err(Error::Invalid(format!("label pair ({t}, {p}) out of range {classes}")));
        }
        m.set(t, p, m.get(t, p) + 1.0);
    }
    Ok(m)
}
