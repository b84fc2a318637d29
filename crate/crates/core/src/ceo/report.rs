use serde::{Deserialize, Serialize};

use super::metric::{pairwise_distances, DistanceMetric};
use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use crate::store::EmbeddingBank;

/// One class's nearest neighbor before and after optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnEntry {
    pub class: String,
    pub nn_initial: String,
    pub distance_initial: f64,
    pub nn_optimized: String,
    pub distance_optimized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnReport {
    pub metric: DistanceMetric,
    pub entries: Vec<NnEntry>,
}

fn nearest(d: &Tensor2, c: usize) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for k in (0..d.rows()).filter(|&k| k != c) {
        if d.get(c, k) < best.1 {
            best = (k, d.get(c, k));
        }
    }
    best
}

/// Nearest neighbor of every class under the initial and optimized
/// embeddings, sorted by class name.
pub fn nearest_neighbor_report(bank: &EmbeddingBank, metric: DistanceMetric) -> Result<NnReport> {
    let opt = bank.optimized().ok_or(Error::MissingOptimized)?;
    let before = pairwise_distances(bank.initial(), metric)?;
    let after = pairwise_distances(opt, metric)?;
    let names = bank.class_names();
    let mut entries: Vec<NnEntry> = (0..bank.len())
        .map(|c| {
            let (k0, d0) = nearest(&before, c);
            let (k1, d1) = nearest(&after, c);
            NnEntry {
                class: names[c].clone(),
                nn_initial: names[k0].clone(),
                distance_initial: d0,
                nn_optimized: names[k1].clone(),
                distance_optimized: d1,
            }
        })
        .collect();
    entries.sort_by(|a, b| a.class.cmp(&b.class));
    Ok(NnReport { metric, entries })
}

impl NnReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned table: base class, then NN and distance without and with optimization.
    pub fn to_text(&self) -> String {
        let header = [
            "Base class".to_string(),
            "NN (w/o opt)".into(),
            "D (w/o opt)".into(),
            "NN (w/ opt)".into(),
            "D (w/ opt)".into(),
        ];
        let rows: Vec<[String; 5]> = self
            .entries
            .iter()
            .map(|e| {
                [
                    e.class.clone(),
                    e.nn_initial.clone(),
                    format!("{:.2}", e.distance_initial),
                    e.nn_optimized.clone(),
                    format!("{:.2}", e.distance_optimized),
                ]
            })
            .collect();
        crate::evaluation::format_table(&header, &rows)
    }
}
