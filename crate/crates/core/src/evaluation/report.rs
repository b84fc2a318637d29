use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::avla::{score_samples, TrainedModel};
use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use crate::store::{ClassSplit, EmbeddingBank, FeatureDataset, Partition};

use super::metrics::{confusion_matrix, harmonic_mean, mean_class_accuracy, per_class_accuracy};

/// Generalized and conventional zero-shot accuracies on the test partition,
/// all as percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub seen_acc: f64,
    pub unseen_acc: f64,
    pub harmonic_mean: f64,
    pub zsl_acc: f64,
    /// Accuracy of every class with test samples, predicting over all classes.
    pub per_class_acc: BTreeMap<String, f64>,
    pub class_names: Vec<String>,
    /// Row = true class, column = predicted class, over all classes.
    pub confusion: Vec<Vec<u64>>,
    pub config_digest: String,
}

impl EvalReport {
    /// Builds the report from test-sample predictions.
    ///
    /// `predictions` are made over all classes and aligned with `truths`;
    /// `zsl_predictions` are made over the unseen classes only and aligned
    /// with the unseen-class entries of `truths`, in order.
    pub fn from_predictions(
        class_names: &[String],
        split: &ClassSplit,
        truths: &[usize],
        predictions: &[usize],
        zsl_predictions: &[usize],
        config_digest: String,
    ) -> Result<Self> {
        if truths.is_empty() {
            return Err(Error::Empty("test set"));
        }
        if class_names.len() != split.n_classes() {
            return Err(Error::Dimension(format!(
                "{} class names for a {}-class split",
                class_names.len(),
                split.n_classes()
            )));
        }
        let seen_acc = mean_class_accuracy(predictions, truths, split.seen())?;
        let unseen_acc = mean_class_accuracy(predictions, truths, split.unseen())?;
        let unseen_truths: Vec<usize> = truths.iter().copied().filter(|&t| !split.is_seen(t)).collect();
        if let Some(&p) = zsl_predictions.iter().find(|&&p| split.is_seen(p)) {
            return Err(Error::Invalid(format!("zero-shot prediction {p} is a seen class")));
        }
        let zsl_acc = mean_class_accuracy(zsl_predictions, &unseen_truths, split.unseen())?;
        let all: Vec<usize> = (0..split.n_classes()).collect();
        let (_, per) = per_class_accuracy(predictions, truths, &all)?;
        let confusion = confusion_matrix(predictions, truths, split.n_classes())?;
        Ok(Self {
            seen_acc,
            unseen_acc,
            harmonic_mean: harmonic_mean(seen_acc, unseen_acc),
            zsl_acc,
            per_class_acc: per.into_iter().map(|(c, a)| (class_names[c].clone(), a)).collect(),
            class_names: class_names.to_vec(),
            confusion: confusion.iter_rows().map(|r| r.iter().map(|&x| x as u64).collect()).collect(),
            config_digest,
        })
    }

    pub fn confusion_tensor(&self) -> Result<Tensor2> {
        let c = self.confusion.len();
        Tensor2::new(c, c, self.confusion.iter().flatten().map(|&x| x as f64).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Seen / Unseen / Harmonic Mean / ZSL at two decimals.
    pub fn to_text(&self) -> String {
        let header = ["Seen", "Unseen", "Harmonic Mean", "ZSL"].map(String::from);
        let row = [self.seen_acc, self.unseen_acc, self.harmonic_mean, self.zsl_acc].map(|v| format!("{v:.2}"));
        format_table(&header, &[row])
    }

    /// Confusion counts with class names, one row per true class.
    pub fn confusion_text(&self) -> String {
        let width = self.class_names.iter().map(|n| n.chars().count()).max().unwrap_or(0).max(4);
        let cell = self
            .confusion
            .iter()
            .flatten()
            .map(|v| v.to_string().len())
            .max()
            .unwrap_or(1)
            .max(3);
        let mut out = format!("{:<width$}", "true");
        for j in 0..self.class_names.len() {
            out.push_str(&format!(" {:>cell$}", format!("#{j}")));
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            out.push_str(&format!("{name:<width$}"));
            for v in row {
                out.push_str(&format!(" {v:>cell$}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Hex SHA-256 of the JSON form of `settings`.
pub fn config_digest<T: Serialize>(settings: &T) -> Result<String> {
    let json = serde_json::to_vec(settings)?;
    Ok(Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect())
}

/// Scores every test sample once, predicts over all classes and, for
/// unseen-class samples, over the unseen classes only.
pub fn evaluate(
    model: &TrainedModel,
    bank: &EmbeddingBank,
    ds: &FeatureDataset,
    split: &ClassSplit,
    config_digest: String,
) -> Result<EvalReport> {
    let classes = bank.embeddings(model.config.embeddings)?;
    let test = ds.indices(Partition::Test);
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let scores = score_samples(model, classes, ds, &test)?;
    let all: Vec<usize> = (0..bank.len()).collect();
    let truths: Vec<usize> = test.iter().map(|&i| ds.labels[i]).collect();
    let mut predictions = Vec::with_capacity(test.len());
    let mut zsl = Vec::new();
    for (s, &t) in scores.iter().zip(&truths) {
        predictions.push(crate::avla::restricted_argmax(s, &all)?);
        if !split.is_seen(t) {
            zsl.push(crate::avla::restricted_argmax(s, split.unseen())?);
        }
    }
    EvalReport::from_predictions(bank.class_names(), split, &truths, &predictions, &zsl, config_digest)
}

/// Left-aligned text table with a rule under the header.
pub fn format_table<const N: usize>(header: &[String; N], rows: &[[String; N]]) -> String {
    let mut widths = [0usize; N];
    for r in std::iter::once(header).chain(rows) {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |r: &[String; N]| {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:<w$}"))
            .collect();
        cells.join("  ").trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (N - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn harmonic_mean_from_prediction_counts() {
        // 10000 samples per class so the accuracies are exact to two decimals.
        let split = ClassSplit::new(vec![0], vec![1], 2).unwrap();
        for (hit_s, hit_u, hm) in [(1726usize, 868usize, 11.55), (7832, 4635, 58.24)] {
            let mut truths = vec![0; 10000];
            truths.extend(vec![1; 10000]);
            let mut preds: Vec<usize> = (0..10000).map(|i| usize::from(i >= hit_s)).collect();
            preds.extend((0..10000).map(|i| usize::from(i < hit_u)));
            let zsl = vec![1; 10000];
            let r = EvalReport::from_predictions(&names(2), &split, &truths, &preds, &zsl, String::new()).unwrap();
            assert!((r.seen_acc - hit_s as f64 / 100.0).abs() < 1e-9);
            assert!((r.harmonic_mean - hm).abs() <= 0.01, "{}", r.harmonic_mean);
            assert_eq!(r.zsl_acc, 100.0);
        }
    }

    #[test]
    fn report_fields_and_formats() {
        let split = ClassSplit::new(vec![0, 1], vec![2], 3).unwrap();
        let truths = [0, 0, 1, 2, 2];
        let preds = [0, 1, 1, 0, 2];
        let zsl = [2, 2];
        let r = EvalReport::from_predictions(&names(3), &split, &truths, &preds, &zsl, "abc".into()).unwrap();
        assert_eq!(r.seen_acc, 75.0);
        assert_eq!(r.unseen_acc, 50.0);
        assert_eq!(r.harmonic_mean, 60.0);
        assert_eq!(r.zsl_acc, 100.0);
        assert_eq!(r.confusion, vec![vec![1, 1, 0], vec![0, 1, 0], vec![1, 0, 1]]);
        assert_eq!(r.per_class_acc["c0"], 50.0);
        let total: f64 = r.confusion_tensor().unwrap().data().iter().sum();
        assert_eq!(total, 5.0);
        let text = r.to_text();
        assert!(text.starts_with("Seen   Unseen  Harmonic Mean  ZSL\n"), "{text}");
        assert!(text.ends_with("75.00  50.00   60.00          100.00\n"), "{text}");
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        assert!(r.confusion_text().contains("c2     1   0   1"));
    }

    #[test]
    fn errors() {
        let split = ClassSplit::new(vec![0], vec![1], 2).unwrap();
        assert!(matches!(
            EvalReport::from_predictions(&names(2), &split, &[], &[], &[], String::new()),
            Err(Error::Empty(_))
        ));
        // ZSL predictions must lie in the unseen classes.
        assert!(EvalReport::from_predictions(&names(2), &split, &[0, 1], &[0, 1], &[0], String::new()).is_err());
    }

    #[test]
    fn digest_is_stable_hex() {
        let d = config_digest(&serde_json::json!({"a": 1})).unwrap();
        assert_eq!(d.len(), 64);
        assert_eq!(d, config_digest(&serde_json::json!({"a": 1})).unwrap());
        assert_ne!(d, config_digest(&serde_json::json!({"a": 2})).unwrap());
    }
}
