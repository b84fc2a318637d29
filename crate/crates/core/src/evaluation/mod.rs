//! Seen/unseen accuracy, harmonic mean, ZSL accuracy and confusion matrices.

mod metrics;
mod report;

pub use metrics::{confusion_matrix, harmonic_mean, mean_class_accuracy, per_class_accuracy};
pub use report::{config_digest, evaluate, format_table, EvalReport};
