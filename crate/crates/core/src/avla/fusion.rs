//! Cross-attention fusion of one visual and one audio token.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{attention_backward, attention_forward_cached, AttentionCache, Tensor2};

use super::layers::{gelu, gelu_grad, LayerNorm, Layout, Linear, LnCache};

/// Shape hyperparameters of the fusion transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionArch {
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
}

impl FusionArch {
    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.visual_dim == 0 || self.audio_dim == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Invalid(format!("degenerate fusion architecture {self:?}")));
        }
        Ok(())
    }
}

/// One direction of a fusion block: the stream's own token queries the other.
#[derive(Clone, Copy, Debug)]
struct StreamBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

impl StreamBlock {
    fn alloc(layout: &mut Layout, d: usize) -> Self {
        Self {
            q: layout.linear(d, d),
            k: layout.linear(d, d),
            v: layout.linear(d, d),
            o: layout.linear(d, d),
            ln1: layout.layer_norm(d),
            ff1: layout.linear(d, 4 * d),
            ff2: layout.linear(4 * d, d),
            ln2: layout.layer_norm(d),
        }
    }
}

#[derive(Clone, Debug)]
struct StreamCache {
    own: Vec<f64>,
    other: Vec<f64>,
    q: Tensor2,
    k: Tensor2,
    v: Tensor2,
    attn: AttentionCache,
    attended: Vec<f64>,
    ln1: LnCache,
    h: Vec<f64>,
    z1: Vec<f64>,
    g1: Vec<f64>,
    ln2: LnCache,
}

/// Intermediate values of one forward pass, needed by [`FusionModel::backward`].
#[derive(Clone, Debug)]
pub struct FusionCache {
    visual: Vec<f64>,
    audio: Vec<f64>,
    blocks: Vec<[StreamCache; 2]>,
}

/// Projects both modalities to `d_model` and applies `layers` bidirectional
/// cross-attention blocks. The output has one row per modality, visual first.
#[derive(Clone, Debug)]
pub struct FusionModel {
    arch: FusionArch,
    visual_proj: Linear,
    audio_proj: Linear,
    blocks: Vec<[StreamBlock; 2]>,
    params: Vec<f64>,
}

impl FusionModel {
    fn layout(arch: FusionArch) -> (Layout, Linear, Linear, Vec<[StreamBlock; 2]>) {
        let d = arch.d_model();
        let mut layout = Layout::default();
        let visual_proj = layout.linear(arch.visual_dim, d);
        let audio_proj = layout.linear(arch.audio_dim, d);
        let blocks = (0..arch.layers)
            .map(|_| [StreamBlock::alloc(&mut layout, d), StreamBlock::alloc(&mut layout, d)])
            .collect();
        (layout, visual_proj, audio_proj, blocks)
    }

    pub fn new<R: Rng + ?Sized>(arch: FusionArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let (layout, visual_proj, audio_proj, blocks) = Self::layout(arch);
        let params = layout.initialize(rng);
        Ok(Self {
            arch,
            visual_proj,
            audio_proj,
            blocks,
            params,
        })
    }

    /// Rebuilds a model from a flat parameter vector in serialized order.
    pub fn from_params(arch: FusionArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let (layout, visual_proj, audio_proj, blocks) = Self::layout(arch);
        if params.len() != layout.len {
            return Err(Error::Dimension(format!(
                "fusion model expects {} parameters, got {}",
                layout.len,
                params.len()
            )));
        }
        Ok(Self {
            arch,
            visual_proj,
            audio_proj,
            blocks,
            params,
        })
    }

    pub fn arch(&self) -> FusionArch {
        self.arch
    }

    pub fn d_model(&self) -> usize {
        self.arch.d_model()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_inputs(&self, visual: &[f64], audio: &[f64]) -> Result<()> {
        if visual.len() != self.arch.visual_dim || audio.len() != self.arch.audio_dim {
            return Err(Error::FeatureDim(format!(
                "model expects visual {} and audio {}, got {} and {}",
                self.arch.visual_dim,
                self.arch.audio_dim,
                visual.len(),
                audio.len()
            )));
        }
        Ok(())
    }

    /// Fused `2×d_model` representation of one sample.
    pub fn fuse(&self, visual: &[f64], audio: &[f64]) -> Result<Tensor2> {
        self.forward(visual, audio).map(|(out, _)| out)
    }

    pub fn forward(&self, visual: &[f64], audio: &[f64]) -> Result<(Tensor2, FusionCache)> {
        self.check_inputs(visual, audio)?;
        let p = &self.params;
        let heads = self.arch.heads;
        let mut tokens = [self.visual_proj.forward(p, visual), self.audio_proj.forward(p, audio)];
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut next: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
            let mut cache: [Option<StreamCache>; 2] = [None, None];
            for s in 0..2 {
                let sb = &block[s];
                let own = &tokens[s];
                let other = &tokens[1 - s];
                let row = |x: Vec<f64>| Tensor2::new(1, x.len(), x);
                let q = row(sb.q.forward(p, own))?;
                let k = row(sb.k.forward(p, other))?;
                let v = row(sb.v.forward(p, other))?;
                let (att, attn) = attention_forward_cached(&q, &k, &v, heads)?;
                let a = sb.o.forward(p, att.row(0));
                let r1: Vec<f64> = own.iter().zip(&a).map(|(x, y)| x + y).collect();
                let (h, ln1) = sb.ln1.forward(p, &r1);
                let z1 = sb.ff1.forward(p, &h);
                let g1: Vec<f64> = z1.iter().map(|&z| gelu(z)).collect();
                let f = sb.ff2.forward(p, &g1);
                let r2: Vec<f64> = h.iter().zip(&f).map(|(x, y)| x + y).collect();
                let (y, ln2) = sb.ln2.forward(p, &r2);
                next[s] = y;
                cache[s] = Some(StreamCache {
                    own: own.clone(),
                    other: other.clone(),
                    q,
                    k,
                    v,
                    attn,
                    attended: att.into_data(),
                    ln1,
                    h,
                    z1,
                    g1,
                    ln2,
                });
            }
            let [c0, c1] = cache;
            caches.push([c0.expect("visual stream"), c1.expect("audio stream")]);
            tokens = next;
        }
        let [tv, ta] = tokens;
        let out = Tensor2::from_rows(&[tv, ta])?;
        Ok((
            out,
            FusionCache {
                visual: visual.to_vec(),
                audio: audio.to_vec(),
                blocks: caches,
            },
        ))
    }

    /// Accumulates parameter gradients for an upstream gradient on the
    /// `2×d_model` output.
    pub fn backward(&self, cache: &FusionCache, d_out: &Tensor2, grad: &mut [f64]) -> Result<()> {
        let d = self.d_model();
        if d_out.shape() != (2, d) || grad.len() != self.params.len() {
            return Err(Error::Dimension("fusion backward shapes".into()));
        }
        let p = &self.params;
        let heads = self.arch.heads;
        let mut dt = [d_out.row(0).to_vec(), d_out.row(1).to_vec()];
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let mut din = [vec![0.0; d], vec![0.0; d]];
            for s in 0..2 {
                let sb = &block[s];
                let c = &bc[s];
                let mut dr2 = vec![0.0; d];
                sb.ln2.backward(p, grad, &c.ln2, &dt[s], &mut dr2);
                let mut dh = dr2.clone();
                let mut dg1 = vec![0.0; 4 * d];
                sb.ff2.backward(p, grad, &c.g1, &dr2, Some(&mut dg1));
                let dz1: Vec<f64> = dg1.iter().zip(&c.z1).map(|(g, &z)| g * gelu_grad(z)).collect();
                sb.ff1.backward(p, grad, &c.h, &dz1, Some(&mut dh));
                let mut dr1 = vec![0.0; d];
                sb.ln1.backward(p, grad, &c.ln1, &dh, &mut dr1);
                for (o, g) in din[s].iter_mut().zip(&dr1) {
                    *o += g;
                }
                let mut datt = vec![0.0; d];
                sb.o.backward(p, grad, &c.attended, &dr1, Some(&mut datt));
                let datt = Tensor2::new(1, d, datt)?;
                let (dq, dk, dv) = attention_backward(&c.q, &c.k, &c.v, &c.attn, &datt, heads)?;
                sb.q.backward(p, grad, &c.own, dq.row(0), Some(&mut din[s]));
                sb.k.backward(p, grad, &c.other, dk.row(0), Some(&mut din[1 - s]));
                sb.v.backward(p, grad, &c.other, dv.row(0), Some(&mut din[1 - s]));
            }
            dt = din;
        }
        self.visual_proj.backward(p, grad, &cache.visual, &dt[0], None);
        self.audio_proj.backward(p, grad, &cache.audio, &dt[1], None);
        Ok(())
    }
}
