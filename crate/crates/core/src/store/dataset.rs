use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bank::EmbeddingBank;
use super::bytes::{count_u32, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numerics::Tensor2;

const MAGIC: &[u8; 4] = b"EZF1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub fn tag(self) -> u8 {
        match self {
            Partition::Train => 0,
            Partition::Val => 1,
            Partition::Test => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Partition::Train),
            1 => Ok(Partition::Val),
            2 => Ok(Partition::Test),
            t => Err(Error::Format(format!("partition tag {t}"))),
        }
    }
}

/// Disjoint seen/unseen class index sets covering every class of a bank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSplit {
    seen: Vec<usize>,
    unseen: Vec<usize>,
    n_classes: usize,
}

impl ClassSplit {
    pub fn new(mut seen: Vec<usize>, mut unseen: Vec<usize>, n_classes: usize) -> Result<Self> {
        seen.sort_unstable();
        seen.dedup();
        unseen.sort_unstable();
        unseen.dedup();
        if seen.is_empty() || unseen.is_empty() {
            return Err(Error::Invalid("seen and unseen splits must both be non-empty".into()));
        }
        let mut member = vec![0u8; n_classes];
        for &c in seen.iter().chain(&unseen) {
            if c >= n_classes {
                return Err(Error::Invalid(format!("class index {c} out of range {n_classes}")));
            }
            member[c] += 1;
        }
        if let Some(c) = member.iter().position(|&m| m != 1) {
            let why = if member[c] == 0 { "in neither" } else { "in both" };
            return Err(Error::Invalid(format!("class {c} is {why} seen and unseen")));
        }
        Ok(Self {
            seen,
            unseen,
            n_classes,
        })
    }

    /// Seen classes are those with at least one train sample; the rest are unseen.
    pub fn from_train_labels(labels: &[usize], partition: &[Partition], n_classes: usize) -> Result<Self> {
        let mut is_seen = vec![false; n_classes];
        for (&y, &p) in labels.iter().zip(partition) {
            if p == Partition::Train {
                *is_seen
                    .get_mut(y)
                    .ok_or_else(|| Error::Invalid(format!("label {y} out of range")))? = true;
            }
        }
        let seen = (0..n_classes).filter(|&c| is_seen[c]).collect();
        let unseen = (0..n_classes).filter(|&c| !is_seen[c]).collect();
        Self::new(seen, unseen, n_classes)
    }

    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    pub fn unseen(&self) -> &[usize] {
        &self.unseen
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn is_seen(&self, c: usize) -> bool {
        self.seen.binary_search(&c).is_ok()
    }
}

/// Per-sample precomputed visual and audio features with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    pub visual: Tensor2,
    pub audio: Tensor2,
    pub labels: Vec<usize>,
    pub partition: Vec<Partition>,
}

impl FeatureDataset {
    pub fn new(
        visual: Tensor2,
        audio: Tensor2,
        labels: Vec<usize>,
        partition: Vec<Partition>,
        bank: &EmbeddingBank,
        split: &ClassSplit,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Empty("feature dataset"));
        }
        if visual.cols() == 0 || audio.cols() == 0 {
            return Err(Error::FeatureDim("feature widths must be ≥ 1".into()));
        }
        if visual.rows() != n || audio.rows() != n || partition.len() != n {
            return Err(Error::FeatureDim(format!(
                "{n} labels, {} visual rows, {} audio rows, {} partition tags",
                visual.rows(),
                audio.rows(),
                partition.len()
            )));
        }
        if split.n_classes() != bank.len() {
            return Err(Error::Invalid(format!(
                "split covers {} classes, bank has {}",
                split.n_classes(),
                bank.len()
            )));
        }
        for (&y, &p) in labels.iter().zip(&partition) {
            let name = bank
                .class_names()
                .get(y)
                .ok_or_else(|| Error::UnknownClass(format!("#{y}")))?;
            if p == Partition::Train && !split.is_seen(y) {
                return Err(Error::UnseenInTrain(name.clone()));
            }
        }
        Ok(Self {
            visual,
            audio,
            labels,
            partition,
        })
    }

    /// Builds a dataset from per-sample rows, checking that widths agree.
    pub fn from_samples(
        samples: Vec<(Vec<f64>, Vec<f64>, usize, Partition)>,
        bank: &EmbeddingBank,
        split: &ClassSplit,
    ) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Empty("feature dataset"));
        };
        let (dv, da) = (first.0.len(), first.1.len());
        let mut visual = Vec::with_capacity(samples.len() * dv);
        let mut audio = Vec::with_capacity(samples.len() * da);
        let mut labels = Vec::with_capacity(samples.len());
        let mut partition = Vec::with_capacity(samples.len());
        for (i, (v, a, y, p)) in samples.into_iter().enumerate() {
            if v.len() != dv || a.len() != da {
                return Err(Error::FeatureDim(format!(
                    "sample {i} has visual/audio widths {}/{}, expected {dv}/{da}",
                    v.len(),
                    a.len()
                )));
            }
            visual.extend(v);
            audio.extend(a);
            labels.push(y);
            partition.push(p);
        }
        let n = labels.len();
        Self::new(
            Tensor2::new(n, dv, visual)?,
            Tensor2::new(n, da, audio)?,
            labels,
            partition,
            bank,
            split,
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn visual_dim(&self) -> usize {
        self.visual.cols()
    }

    pub fn audio_dim(&self) -> usize {
        self.audio.cols()
    }

    /// Sample indices of one partition, in file order.
    pub fn indices(&self, p: Partition) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.partition[i] == p).collect()
    }

    pub fn to_bytes(&self, bank: &EmbeddingBank) -> Result<Vec<u8>> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(count_u32(self.len(), "sample count")?);
        w.u32(count_u32(self.visual_dim(), "visual dim")?);
        w.u32(count_u32(self.audio_dim(), "audio dim")?);
        for i in 0..self.len() {
            let name = bank
                .class_names()
                .get(self.labels[i])
                .ok_or_else(|| Error::UnknownClass(format!("#{}", self.labels[i])))?;
            w.name(name)?;
            w.u8(self.partition[i].tag());
            w.f64s(self.visual.row(i));
            w.f64s(self.audio.row(i));
        }
        Ok(w.buf)
    }
}

struct RawDataset {
    visual: Tensor2,
    audio: Tensor2,
    labels: Vec<usize>,
    partition: Vec<Partition>,
}

/// Walks the record boundaries implied by the header. A wrong feature width
/// shifts every later record, so the records then fail to tile the file.
fn check_layout(records: &[u8], n: usize, dv: usize, da: usize) -> Result<()> {
    let payload = (dv + da)
        .checked_mul(8)
        .ok_or_else(|| Error::FeatureDim(format!("feature widths {dv}+{da} overflow")))?;
    let mut pos = 0usize;
    for i in 0..n {
        let len = records
            .get(pos..pos + 2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize);
        let end = len.and_then(|l| pos.checked_add(2 + l + 1)?.checked_add(payload));
        match end {
            Some(e) if e <= records.len() => pos = e,
            _ => {
                return Err(Error::FeatureDim(format!(
                    "record {i} of {n} overruns the file for declared widths {dv}+{da}"
                )))
            }
        }
    }
    if pos != records.len() {
        return Err(Error::FeatureDim(format!(
            "{} bytes left after {n} records of declared widths {dv}+{da}",
            records.len() - pos
        )));
    }
    Ok(())
}

fn parse(buf: &[u8], bank: &EmbeddingBank) -> Result<RawDataset> {
    let mut r = ByteReader::new(buf);
    r.magic(MAGIC)?;
    let n = r.u32("sample count")? as usize;
    let dv = r.u32("visual dim")? as usize;
    let da = r.u32("audio dim")? as usize;
    if n == 0 {
        return Err(Error::Empty("feature dataset"));
    }
    if dv == 0 || da == 0 {
        return Err(Error::FeatureDim("feature widths must be ≥ 1".into()));
    }
    check_layout(&buf[16..], n, dv, da)?;
    let cap = n.min(1 << 20);
    let mut visual = Vec::with_capacity(cap * dv);
    let mut audio = Vec::with_capacity(cap * da);
    let mut labels = Vec::with_capacity(cap);
    let mut partition = Vec::with_capacity(cap);
    for i in 0..n {
        let name = r.name()?;
        let y = bank.index_of(&name).ok_or(Error::UnknownClass(name))?;
        let p = Partition::from_tag(r.u8("partition tag")?)?;
        let need = (dv + da) * 8;
        if r.remaining() < need {
            return Err(Error::FeatureDim(format!(
                "record {i} holds {} feature bytes, header declares {dv}+{da} f64",
                r.remaining()
            )));
        }
        visual.extend(r.f64s(dv, "visual features")?);
        audio.extend(r.f64s(da, "audio features")?);
        labels.push(y);
        partition.push(p);
    }
    r.finish()?;
    Ok(RawDataset {
        visual: Tensor2::new(n, dv, visual)?,
        audio: Tensor2::new(n, da, audio)?,
        labels,
        partition,
    })
}

pub fn load_feature_dataset(path: impl AsRef<Path>, bank: &EmbeddingBank, split: &ClassSplit) -> Result<FeatureDataset> {
    let raw = parse(&fs::read(path)?, bank)?;
    FeatureDataset::new(raw.visual, raw.audio, raw.labels, raw.partition, bank, split)
}

/// Loads a dataset and derives the split from its train partition.
pub fn load_feature_dataset_inferred(
    path: impl AsRef<Path>,
    bank: &EmbeddingBank,
) -> Result<(FeatureDataset, ClassSplit)> {
    let raw = parse(&fs::read(path)?, bank)?;
    let split = ClassSplit::from_train_labels(&raw.labels, &raw.partition, bank.len())?;
    let ds = FeatureDataset::new(raw.visual, raw.audio, raw.labels, raw.partition, bank, &split)?;
    Ok((ds, split))
}

pub fn save_feature_dataset(ds: &FeatureDataset, bank: &EmbeddingBank, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ds.to_bytes(bank)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank() -> EmbeddingBank {
        let t = Tensor2::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]).unwrap();
        EmbeddingBank::new(vec!["dog".into(), "cat".into(), "owl".into()], t, None).unwrap()
    }

    fn split() -> ClassSplit {
        ClassSplit::new(vec![0, 1], vec![2], 3).unwrap()
    }

    fn samples(n: usize) -> Vec<(Vec<f64>, Vec<f64>, usize, Partition)> {
        (0..n)
            .map(|i| {
                let p = [Partition::Train, Partition::Val, Partition::Test][i % 3];
                let y = if p == Partition::Train { i % 2 } else { i % 3 };
                (vec![i as f64, 0.5, -1.0], vec![0.25 * i as f64, 2.0], y, p)
            })
            .collect()
    }

    #[test]
    fn ten_sample_round_trip() {
        let (b, s) = (bank(), split());
        let ds = FeatureDataset::from_samples(samples(10), &b, &s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ezf");
        save_feature_dataset(&ds, &b, &p).unwrap();
        let loaded = load_feature_dataset(&p, &b, &s).unwrap();
        assert_eq!(loaded.len(), 10);
        assert_eq!(loaded, ds);
        assert_eq!(loaded.to_bytes(&b).unwrap(), fs::read(&p).unwrap());
        let (inferred, split) = load_feature_dataset_inferred(&p, &b).unwrap();
        assert_eq!(inferred, ds);
        assert_eq!(split, s);
    }

    #[test]
    fn unseen_class_in_train_rejected() {
        let (b, s) = (bank(), split());
        let mut v = samples(4);
        v[0].2 = 2;
        let err = FeatureDataset::from_samples(v, &b, &s).unwrap_err();
        assert!(err.to_string().contains("unseen class"), "{err}");
        assert!(err.to_string().contains("in train partition"), "{err}");
    }

    #[test]
    fn audio_width_mismatch_rejected() {
        let (b, s) = (bank(), split());
        let mut v = samples(4);
        v[2].1.push(1.0);
        let err = FeatureDataset::from_samples(v, &b, &s).unwrap_err();
        assert!(err.to_string().contains("feature dim mismatch"), "{err}");
    }

    #[test]
    fn truncated_record_is_dim_mismatch() {
        let (b, s) = (bank(), split());
        let ds = FeatureDataset::from_samples(samples(3), &b, &s).unwrap();
        let mut bytes = ds.to_bytes(&b).unwrap();
        bytes.truncate(bytes.len() - 8);
        let err = parse(&bytes, &b).err().unwrap();
        assert!(err.to_string().contains("feature dim mismatch"), "{err}");
    }

    #[test]
    fn unknown_class_and_bad_magic() {
        let (b, s) = (bank(), split());
        let ds = FeatureDataset::from_samples(samples(3), &b, &s).unwrap();
        let bytes = ds.to_bytes(&b).unwrap();
        let other = EmbeddingBank::new(
            vec!["x".into(), "y".into(), "z".into()],
            b.initial().clone(),
            None,
        )
        .unwrap();
        assert!(matches!(parse(&bytes, &other), Err(Error::UnknownClass(_))));
        let mut bad = bytes.clone();
        bad[3] = b'9';
        assert!(matches!(parse(&bad, &b), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn split_invariants() {
        assert!(ClassSplit::new(vec![0, 1], vec![1, 2], 3).is_err());
        assert!(ClassSplit::new(vec![0], vec![2], 3).is_err());
        assert!(ClassSplit::new(vec![], vec![0, 1, 2], 3).is_err());
        let s = ClassSplit::new(vec![2, 0], vec![1], 3).unwrap();
        assert!(s.is_seen(0) && !s.is_seen(1));
    }
}
