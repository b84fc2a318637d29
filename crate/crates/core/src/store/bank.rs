use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bytes::{count_u32, ByteReader, ByteWriter};
use super::UNIT_NORM_TOLERANCE;
use crate::error::{Error, Result};
use crate::numerics::{norm, Tensor2};

const MAGIC: &[u8; 4] = b"EZB1";

/// Which embedding set a downstream stage consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Initial,
    Optimized,
}

/// Named class embeddings: the text-encoder rows and, once optimized, their
/// separated counterparts. Every row has unit norm.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank {
    class_names: Vec<String>,
    initial: Tensor2,
    optimized: Option<Tensor2>,
}

/// Renormalizes rows that are close to the sphere and rejects the rest.
/// Rows already within 1e-12 keep their exact bits so save/load is stable.
fn ingest_rows(names: &[String], t: &mut Tensor2) -> Result<()> {
    for r in 0..t.rows() {
        let n = norm(t.row(r));
        let dev = (n - 1.0).abs();
        if dev <= 1e-12 {
            continue;
        }
        if dev > UNIT_NORM_TOLERANCE || !n.is_finite() {
            return Err(Error::NonUnitEmbedding {
                class: names[r].clone(),
                norm: n,
            });
        }
        for x in t.row_mut(r) {
            *x /= n;
        }
    }
    Ok(())
}

impl EmbeddingBank {
    pub fn new(class_names: Vec<String>, mut initial: Tensor2, mut optimized: Option<Tensor2>) -> Result<Self> {
        if class_names.len() != initial.rows() {
            return Err(Error::Dimension(format!(
                "{} class names for {} embedding rows",
                class_names.len(),
                initial.rows()
            )));
        }
        if class_names.is_empty() || initial.cols() == 0 {
            return Err(Error::Empty("embedding bank"));
        }
        let mut seen = HashSet::new();
        for n in &class_names {
            if !seen.insert(n.as_str()) {
                return Err(Error::DuplicateClass(n.clone()));
            }
        }
        ingest_rows(&class_names, &mut initial)?;
        if let Some(opt) = optimized.as_mut() {
            if opt.shape() != initial.shape() {
                return Err(Error::Dimension(format!(
                    "optimized {:?} vs initial {:?}",
                    opt.shape(),
                    initial.shape()
                )));
            }
            ingest_rows(&class_names, opt)?;
        }
        Ok(Self {
            class_names,
            initial,
            optimized,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.initial.cols()
    }

    pub fn initial(&self) -> &Tensor2 {
        &self.initial
    }

    pub fn optimized(&self) -> Option<&Tensor2> {
        self.optimized.as_ref()
    }

    pub fn embeddings(&self, source: EmbeddingSource) -> Result<&Tensor2> {
        match source {
            EmbeddingSource::Initial => Ok(&self.initial),
            EmbeddingSource::Optimized => self.optimized.as_ref().ok_or(Error::MissingOptimized),
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    /// Returns a copy carrying `optimized` as its optimized block.
    pub fn with_optimized(&self, optimized: Tensor2) -> Result<Self> {
        Self::new(self.class_names.clone(), self.initial.clone(), Some(optimized))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(count_u32(self.len(), "class count")?);
        w.u32(count_u32(self.dim(), "dimension")?);
        w.u8(u8::from(self.optimized.is_some()));
        for n in &self.class_names {
            w.name(n)?;
        }
        w.f64s(self.initial.data());
        if let Some(opt) = &self.optimized {
            w.f64s(opt.data());
        }
        Ok(w.buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        r.magic(MAGIC)?;
        let c = r.u32("class count")? as usize;
        let d = r.u32("dimension")? as usize;
        let flag = r.u8("optimized flag")?;
        if flag > 1 {
            return Err(Error::Format(format!("optimized flag {flag}")));
        }
        let mut names = Vec::with_capacity(c.min(1 << 16));
        for _ in 0..c {
            names.push(r.name()?);
        }
        let rows = c
            .checked_mul(d)
            .ok_or_else(|| Error::Dimension(format!("{c} classes × {d} dims overflows")))?;
        let expected = rows * 8 * (1 + flag as usize);
        if r.remaining() != expected {
            return Err(Error::Dimension(format!(
                "header declares {c}×{d} embeddings ({expected} bytes) but {} bytes follow",
                r.remaining()
            )));
        }
        let initial = Tensor2::new(c, d, r.f64s(rows, "initial embeddings")?)?;
        let optimized = if flag == 1 {
            Some(Tensor2::new(c, d, r.f64s(rows, "optimized embeddings")?)?)
        } else {
            None
        };
        r.finish()?;
        Self::new(names, initial, optimized)
    }
}

pub fn load_embedding_bank(path: impl AsRef<Path>) -> Result<EmbeddingBank> {
    EmbeddingBank::from_bytes(&fs::read(path)?)
}

pub fn save_embedding_bank(bank: &EmbeddingBank, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, bank.to_bytes()?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::normalize_rows;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank(c: usize, d: usize, with_opt: bool) -> EmbeddingBank {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut gen = || {
            let mut t = Tensor2::new(c, d, (0..c * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            normalize_rows(&mut t).unwrap();
            t
        };
        let init = gen();
        let opt = with_opt.then(&mut gen);
        let names = (0..c).map(|i| format!("class {i}")).collect();
        EmbeddingBank::new(names, init, opt).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        for with_opt in [false, true] {
            let b = bank(4, 8, with_opt);
            let p1 = dir.path().join("a.ezb");
            let p2 = dir.path().join("b.ezb");
            save_embedding_bank(&b, &p1).unwrap();
            let loaded = load_embedding_bank(&p1).unwrap();
            assert_eq!(loaded, b);
            save_embedding_bank(&loaded, &p2).unwrap();
            assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        }
    }

    #[test]
    fn optimized_flag_byte() {
        let without = bank(4, 8, false).to_bytes().unwrap();
        let with = bank(4, 8, true).to_bytes().unwrap();
        assert_eq!(without[12], 0);
        assert_eq!(with[12], 1);
        assert_eq!(with.len() - without.len(), 4 * 8 * 8);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = bank(2, 3, false).to_bytes().unwrap();
        bytes[0] = b'X';
        let err = EmbeddingBank::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn dimension_mismatch() {
        let mut bytes = bank(2, 3, false).to_bytes().unwrap();
        bytes[8] = 4; // d = 4 but only 2×3 rows follow
        let err = EmbeddingBank::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)), "{err}");
        let mut bytes = bank(2, 3, false).to_bytes().unwrap();
        bytes.pop();
        assert!(EmbeddingBank::from_bytes(&bytes).is_err());
    }

    #[test]
    fn non_unit_row_rejected() {
        let t = Tensor2::from_rows(&[[0.5, 0.0], [0.0, 1.0]]).unwrap();
        let err = EmbeddingBank::new(vec!["a".into(), "b".into()], t, None).unwrap_err();
        assert!(err.to_string().contains("non-unit embedding"), "{err}");
    }

    #[test]
    fn near_unit_row_renormalized() {
        let t = Tensor2::from_rows(&[[1.0 + 5e-7, 0.0], [0.0, 1.0]]).unwrap();
        let b = EmbeddingBank::new(vec!["a".into(), "b".into()], t, None).unwrap();
        assert!((norm(b.initial().row(0)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor2::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let err = EmbeddingBank::new(vec!["a".into(), "a".into()], t, None).unwrap_err();
        assert!(matches!(err, Error::DuplicateClass(_)));
    }

    #[test]
    fn missing_optimized_selection() {
        let b = bank(3, 2, false);
        assert!(matches!(b.embeddings(EmbeddingSource::Optimized), Err(Error::MissingOptimized)));
        assert!(b.embeddings(EmbeddingSource::Initial).is_ok());
    }
}
