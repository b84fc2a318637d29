//! Class-embedding banks, feature datasets and their binary file formats.
//!
//! Both formats are little-endian.
//!
//! EZB (embedding bank):
//! `"EZB1" | u32 C | u32 d | u8 has_optimized | C × (u16 len, UTF-8 name) |
//! C×d f64 initial rows | [C×d f64 optimized rows]`
//!
//! EZF (feature dataset):
//! `"EZF1" | u32 N | u32 d_v | u32 d_a | N × (u16 len, UTF-8 class name,
//! u8 partition {0 train, 1 val, 2 test}, d_v f64, d_a f64)`

mod bank;
pub(crate) mod bytes;
mod dataset;

pub use bank::{load_embedding_bank, save_embedding_bank, EmbeddingBank, EmbeddingSource};
pub use dataset::{
    load_feature_dataset, load_feature_dataset_inferred, save_feature_dataset, ClassSplit, FeatureDataset,
    Partition,
};

/// Rows within this distance of unit norm are renormalized on load; rows
/// further away are rejected.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;
