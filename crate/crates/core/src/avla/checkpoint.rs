//! EZM model checkpoints.
//!
//! Layout, little-endian:
//!
//! ```text
//! "EZM1"
//! u32 batch_size | u32 epochs | f64 lr | f64 beta1 | f64 beta2 | f64 weight_decay | u64 seed
//! u8 head_kind {0 cosine, 1 linear, 2 mlp, 3 cross_attention}
//! u32 layers | u32 heads | u32 head_dim
//! u8 embeddings {0 initial, 1 optimized} | u8 dedup_denominator
//! u32 visual_dim | u32 audio_dim | u32 embed_dim
//! u64 n_fusion | n_fusion f64 | u64 n_head | n_head f64
//! ```
//!
//! Fusion parameters, in order: visual projection (W row-major `d_v×D`, b),
//! audio projection, then for each layer the visual and audio streams, each
//! as Q, K, V, output projection, layer norm 1 (γ, β), feed-forward 1 and 2,
//! layer norm 2. Head parameters: the class projection when the embedding
//! width differs from `D`, then linear `[2D→1]`; mlp `[2D→D]`, `[D→1]`;
//! cross-attention Q, K, V `[D→D]` and `p` `[D→1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::store::bytes::{count_u32, ByteReader, ByteWriter};
use crate::store::EmbeddingSource;

use super::fusion::{FusionArch, FusionModel};
use super::head::{HeadKind, SimilarityHead};
use super::train::TrainedModel;
use super::TrainConfig;

const MAGIC: &[u8; 4] = b"EZM1";

impl TrainedModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let arch = self.fusion.arch();
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(count_u32(c.batch_size, "batch size")?);
        w.u32(count_u32(c.epochs, "epochs")?);
        for v in [c.lr, c.beta1, c.beta2, c.weight_decay] {
            w.f64(v);
        }
        w.u64(c.seed);
        w.u8(c.head_kind.tag());
        w.u32(count_u32(c.layers, "layers")?);
        w.u32(count_u32(c.heads, "heads")?);
        w.u32(count_u32(c.head_dim, "head dim")?);
        w.u8(match c.embeddings {
            EmbeddingSource::Initial => 0,
            EmbeddingSource::Optimized => 1,
        });
        w.u8(c.dedup_denominator as u8);
        w.u32(count_u32(arch.visual_dim, "visual dim")?);
        w.u32(count_u32(arch.audio_dim, "audio dim")?);
        w.u32(count_u32(self.head.embed_dim(), "embedding dim")?);
        for p in [self.fusion.params(), self.head.params()] {
            w.u64(p.len() as u64);
            w.f64s(p);
        }
        Ok(w.buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        r.magic(MAGIC)?;
        let batch_size = r.u32("batch size")? as usize;
        let epochs = r.u32("epochs")? as usize;
        let lr = r.f64("lr")?;
        let beta1 = r.f64("beta1")?;
        let beta2 = r.f64("beta2")?;
        let weight_decay = r.f64("weight decay")?;
        let seed = r.u64("seed")?;
        let head_kind = HeadKind::from_tag(r.u8("head kind")?)?;
        let layers = r.u32("layers")? as usize;
        let heads = r.u32("heads")? as usize;
        let head_dim = r.u32("head dim")? as usize;
        let embeddings = match r.u8("embedding source")? {
            0 => EmbeddingSource::Initial,
            1 => EmbeddingSource::Optimized,
            t => return Err(Error::Format(format!("unknown embedding source tag {t}"))),
        };
        let dedup_denominator = match r.u8("dedup flag")? {
            0 => false,
            1 => true,
            t => return Err(Error::Format(format!("bad dedup flag {t}"))),
        };
        let config = TrainConfig {
            batch_size,
            epochs,
            lr,
            beta1,
            beta2,
            weight_decay,
            seed,
            head_kind,
            layers,
            heads,
            head_dim,
            embeddings,
            dedup_denominator,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let arch = FusionArch {
            visual_dim: r.u32("visual dim")? as usize,
            audio_dim: r.u32("audio dim")? as usize,
            heads,
            head_dim,
            layers,
        };
        let embed_dim = r.u32("embedding dim")? as usize;
        let mut read_params = |what: &str| -> Result<Vec<f64>> {
            let n = r.u64(what)?;
            let n = usize::try_from(n).map_err(|_| Error::Format(format!("{what} count {n}")))?;
            if n > r.remaining() / 8 {
                return Err(Error::Dimension(format!(
                    "{what}: header declares {n} values, {} bytes remain",
                    r.remaining()
                )));
            }
            r.f64s(n, what)
        };
        let fusion_params = read_params("fusion parameters")?;
        let head_params = read_params("head parameters")?;
        r.finish()?;
        let fusion = FusionModel::from_params(arch, fusion_params)?;
        let head = SimilarityHead::from_params(head_kind, embed_dim, arch.d_model(), heads, head_params)?;
        Ok(Self {
            fusion,
            head,
            config,
            loss_curve: Vec::new(),
        })
    }
}

pub fn save_checkpoint(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    TrainedModel::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(kind: HeadKind, embed_dim: usize) -> TrainedModel {
        let cfg = TrainConfig {
            head_kind: kind,
            heads: 2,
            head_dim: 4,
            seed: 11,
            ..TrainConfig::default()
        };
        TrainedModel::initialize(&cfg, 6, 5, embed_dim).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for kind in HeadKind::ALL {
            for embed in [6, 8] {
                let m = model(kind, embed);
                let bytes = m.to_bytes().unwrap();
                let back = TrainedModel::from_bytes(&bytes).unwrap();
                assert_eq!(back.to_bytes().unwrap(), bytes);
                assert_eq!(back.config, m.config);
                assert_eq!(back.fusion.params(), m.fusion.params());
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ezm");
        let m = model(HeadKind::Mlp, 8);
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.to_bytes().unwrap(), m.to_bytes().unwrap());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = model(HeadKind::CrossAttention, 8).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(TrainedModel::from_bytes(&bad), Err(Error::BadMagic { .. })));
        assert!(TrainedModel::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut extra = bytes.clone();
        extra.extend([0u8; 8]);
        assert!(TrainedModel::from_bytes(&extra).is_err());
        // Claim a wider visual input than the stored parameters support.
        let mut wide = bytes.clone();
        let off = 4 + 4 + 4 + 32 + 8 + 1 + 12 + 2;
        wide[off..off + 4].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(TrainedModel::from_bytes(&wide), Err(Error::Dimension(_))));
    }
}
