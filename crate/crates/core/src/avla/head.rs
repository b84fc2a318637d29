//! Audio-visual / class-embedding similarity heads.
//!
//! Scoring is split into a per-class preparation, shared by every sample of a
//! batch, and a per-sample pass over the prepared classes. Both halves have
//! matching backward passes so the class-side work is done once per batch.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{attention_backward, attention_forward_cached, dot, norm, AttentionCache, Tensor2};

use super::layers::{Layout, Linear};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Cosine,
    Linear,
    Mlp,
    #[default]
    CrossAttention,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [HeadKind::Cosine, HeadKind::Linear, HeadKind::Mlp, HeadKind::CrossAttention];

    pub fn tag(self) -> u8 {
        match self {
            HeadKind::Cosine => 0,
            HeadKind::Linear => 1,
            HeadKind::Mlp => 2,
            HeadKind::CrossAttention => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Self::ALL
            .get(tag as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown head kind tag {tag}")))
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Cosine => "cosine",
            HeadKind::Linear => "linear",
            HeadKind::Mlp => "mlp",
            HeadKind::CrossAttention => "cross_attention",
        })
    }
}

#[derive(Clone, Copy, Debug)]
enum Parts {
    Cosine,
    /// Single linear map over `[pooled, class]`.
    Linear(Linear),
    /// `tanh` hidden layer over `[pooled, class]`, then a scalar output.
    Mlp(Linear, Linear),
    /// Class embedding queries the two fused tokens; `p` maps the attended
    /// vector to a score.
    CrossAttention { q: Linear, k: Linear, v: Linear, p: Linear },
}

/// Class-side quantities for one set of candidate classes.
#[derive(Clone, Debug)]
pub struct ClassPrep {
    /// Class embeddings after the optional projection, `C×d_model`.
    projected: Tensor2,
    /// Kind-specific per-class term fed to the pairwise scoring.
    extra: Tensor2,
    norms: Vec<f64>,
}

impl ClassPrep {
    pub fn len(&self) -> usize {
        self.projected.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Zero gradient buffer matching the prepared classes.
    pub fn zero_grad(&self) -> Tensor2 {
        Tensor2::zeros(self.extra.rows(), self.extra.cols())
    }
}

/// Sample-side intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct SampleCache {
    pooled: Vec<f64>,
    pooled_norm: f64,
    hidden: Option<Tensor2>,
    keys: Option<Tensor2>,
    values: Option<Tensor2>,
    attended: Option<Tensor2>,
    attn: Option<AttentionCache>,
}

#[derive(Clone, Debug)]
pub struct SimilarityHead {
    kind: HeadKind,
    embed_dim: usize,
    d_model: usize,
    heads: usize,
    class_proj: Option<Linear>,
    parts: Parts,
    params: Vec<f64>,
}

impl SimilarityHead {
    fn layout(kind: HeadKind, embed_dim: usize, d_model: usize) -> (Layout, Option<Linear>, Parts) {
        let mut layout = Layout::default();
        let class_proj = (embed_dim != d_model).then(|| layout.linear(embed_dim, d_model));
        let d = d_model;
        let parts = match kind {
            HeadKind::Cosine => Parts::Cosine,
            HeadKind::Linear => Parts::Linear(layout.linear(2 * d, 1)),
            HeadKind::Mlp => Parts::Mlp(layout.linear(2 * d, d), layout.linear(d, 1)),
            HeadKind::CrossAttention => Parts::CrossAttention {
                q: layout.linear(d, d),
                k: layout.linear(d, d),
                v: layout.linear(d, d),
                p: layout.linear(d, 1),
            },
        };
        (layout, class_proj, parts)
    }

    fn check(embed_dim: usize, d_model: usize, heads: usize) -> Result<()> {
        if embed_dim == 0 || d_model == 0 || heads == 0 || d_model % heads != 0 {
            return Err(Error::Invalid(format!(
                "head with embedding dim {embed_dim}, model dim {d_model}, {heads} heads"
            )));
        }
        Ok(())
    }

    /// A freshly initialized head. A class projection is added when the class
    /// embedding width differs from the model width.
    pub fn new<R: Rng + ?Sized>(
        kind: HeadKind,
        embed_dim: usize,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::check(embed_dim, d_model, heads)?;
        let (layout, class_proj, parts) = Self::layout(kind, embed_dim, d_model);
        Ok(Self {
            kind,
            embed_dim,
            d_model,
            heads,
            class_proj,
            parts,
            params: layout.initialize(rng),
        })
    }

    pub fn from_params(kind: HeadKind, embed_dim: usize, d_model: usize, heads: usize, params: Vec<f64>) -> Result<Self> {
        Self::check(embed_dim, d_model, heads)?;
        let (layout, class_proj, parts) = Self::layout(kind, embed_dim, d_model);
        if params.len() != layout.len {
            return Err(Error::Dimension(format!(
                "{kind} head expects {} parameters, got {}",
                layout.len,
                params.len()
            )));
        }
        Ok(Self {
            kind,
            embed_dim,
            d_model,
            heads,
            class_proj,
            parts,
            params,
        })
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
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

    pub fn prepare_classes(&self, class_embeddings: &Tensor2) -> Result<ClassPrep> {
        if class_embeddings.cols() != self.embed_dim {
            return Err(Error::Dimension(format!(
                "head expects class embeddings of width {}, got {}",
                self.embed_dim,
                class_embeddings.cols()
            )));
        }
        let p = &self.params;
        let projected = match &self.class_proj {
            Some(proj) => proj.forward_rows(p, class_embeddings),
            None => class_embeddings.clone(),
        };
        let d = self.d_model;
        let c = projected.rows();
        let mut norms = Vec::new();
        let extra = match &self.parts {
            Parts::Cosine => {
                let mut unit = projected.clone();
                for r in 0..c {
                    let n = norm(unit.row(r));
                    if n == 0.0 {
                        return Err(Error::ZeroNorm);
                    }
                    unit.row_mut(r).iter_mut().for_each(|x| *x /= n);
                    norms.push(n);
                }
                unit
            }
            Parts::Linear(lin) | Parts::Mlp(lin, _) => {
                let out = lin.output();
                let w = &lin.w.of(p)[d * out..];
                let mut extra = Tensor2::zeros(c, out);
                for r in 0..c {
                    for (i, &x) in projected.row(r).iter().enumerate() {
                        for (e, &wij) in extra.row_mut(r).iter_mut().zip(&w[i * out..(i + 1) * out]) {
                            *e += x * wij;
                        }
                    }
                }
                extra
            }
            Parts::CrossAttention { q, .. } => q.forward_rows(p, &projected),
        };
        Ok(ClassPrep { projected, extra, norms })
    }

    /// Scores of one fused `2×d_model` sample against every prepared class.
    pub fn forward_sample(&self, tokens: &Tensor2, prep: &ClassPrep) -> Result<(Vec<f64>, SampleCache)> {
        if tokens.shape() != (2, self.d_model) {
            return Err(Error::Dimension(format!("fused sample has shape {:?}", tokens.shape())));
        }
        let p = &self.params;
        let d = self.d_model;
        let pooled: Vec<f64> = tokens.row(0).iter().zip(tokens.row(1)).map(|(a, b)| 0.5 * (a + b)).collect();
        let mut cache = SampleCache {
            pooled_norm: norm(&pooled),
            pooled,
            hidden: None,
            keys: None,
            values: None,
            attended: None,
            attn: None,
        };
        let c = prep.len();
        let scores = match &self.parts {
            Parts::Cosine => {
                if cache.pooled_norm == 0.0 {
                    return Err(Error::ZeroNorm);
                }
                (0..c)
                    .map(|r| dot(&cache.pooled, prep.extra.row(r)) / cache.pooled_norm)
                    .collect()
            }
            Parts::Linear(lin) => {
                let top = lin.forward(p, &pad(&cache.pooled, d))[0];
                (0..c).map(|r| top + prep.extra.get(r, 0)).collect()
            }
            Parts::Mlp(l1, l2) => {
                let top = l1.forward(p, &pad(&cache.pooled, d));
                let mut hidden = Tensor2::zeros(c, d);
                let mut scores = Vec::with_capacity(c);
                for r in 0..c {
                    let h = hidden.row_mut(r);
                    for ((hj, &a), &b) in h.iter_mut().zip(&top).zip(prep.extra.row(r)) {
                        *hj = (a + b).tanh();
                    }
                    scores.push(l2.forward(p, h)[0]);
                }
                cache.hidden = Some(hidden);
                scores
            }
            Parts::CrossAttention { k, v, p: out, .. } => {
                let keys = k.forward_rows(p, tokens);
                let values = v.forward_rows(p, tokens);
                let (attended, attn) = attention_forward_cached(&prep.extra, &keys, &values, self.heads)?;
                let scores = (0..c).map(|r| out.forward(p, attended.row(r))[0]).collect();
                cache.keys = Some(keys);
                cache.values = Some(values);
                cache.attended = Some(attended);
                cache.attn = Some(attn);
                scores
            }
        };
        Ok((scores, cache))
    }

    /// Backward of [`Self::forward_sample`]: accumulates head parameter
    /// gradients into `grad`, token gradients into `d_tokens` and class-side
    /// gradients into `d_prep`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_sample(
        &self,
        tokens: &Tensor2,
        prep: &ClassPrep,
        cache: &SampleCache,
        d_scores: &[f64],
        grad: &mut [f64],
        d_tokens: &mut Tensor2,
        d_prep: &mut Tensor2,
    ) -> Result<()> {
        let p = &self.params;
        let d = self.d_model;
        let c = prep.len();
        if d_scores.len() != c || d_prep.shape() != prep.extra.shape() || d_tokens.shape() != (2, d) {
            return Err(Error::Dimension("head backward shapes".into()));
        }
        let mut d_pooled = vec![0.0; d];
        match &self.parts {
            Parts::Cosine => {
                let n = cache.pooled_norm;
                let unit: Vec<f64> = cache.pooled.iter().map(|x| x / n).collect();
                let mut d_unit = vec![0.0; d];
                for (r, &ds) in d_scores.iter().enumerate() {
                    for (du, &cu) in d_unit.iter_mut().zip(prep.extra.row(r)) {
                        *du += ds * cu;
                    }
                    for (dp, &u) in d_prep.row_mut(r).iter_mut().zip(&unit) {
                        *dp += ds * u;
                    }
                }
                let along = dot(&unit, &d_unit);
                for ((o, &du), &u) in d_pooled.iter_mut().zip(&d_unit).zip(&unit) {
                    *o = (du - u * along) / n;
                }
            }
            Parts::Linear(lin) => {
                let total: f64 = d_scores.iter().sum();
                let mut dx = vec![0.0; 2 * d];
                lin.backward(p, grad, &pad(&cache.pooled, d), &[total], Some(&mut dx));
                d_pooled.copy_from_slice(&dx[..d]);
                for (r, &ds) in d_scores.iter().enumerate() {
                    d_prep.row_mut(r)[0] += ds;
                }
            }
            Parts::Mlp(l1, l2) => {
                let hidden = cache.hidden.as_ref().expect("mlp cache");
                let mut d_top = vec![0.0; d];
                for (r, &ds) in d_scores.iter().enumerate() {
                    let h = hidden.row(r);
                    let mut dh = vec![0.0; d];
                    l2.backward(p, grad, h, &[ds], Some(&mut dh));
                    for (((dt, dp), &g), &hj) in d_top.iter_mut().zip(d_prep.row_mut(r)).zip(&dh).zip(h) {
                        let dz = g * (1.0 - hj * hj);
                        *dt += dz;
                        *dp += dz;
                    }
                }
                let mut dx = vec![0.0; 2 * d];
                l1.backward(p, grad, &pad(&cache.pooled, d), &d_top, Some(&mut dx));
                d_pooled.copy_from_slice(&dx[..d]);
            }
            Parts::CrossAttention { k, v, p: out, .. } => {
                let attended = cache.attended.as_ref().expect("attention cache");
                let keys = cache.keys.as_ref().expect("attention cache");
                let values = cache.values.as_ref().expect("attention cache");
                let mut d_att = Tensor2::zeros(c, d);
                for (r, &ds) in d_scores.iter().enumerate() {
                    out.backward(p, grad, attended.row(r), &[ds], Some(d_att.row_mut(r)));
                }
                let attn = cache.attn.as_ref().expect("attention cache");
                let (dq, dk, dv) = attention_backward(&prep.extra, keys, values, attn, &d_att, self.heads)?;
                for (a, b) in d_prep.data_mut().iter_mut().zip(dq.data()) {
                    *a += b;
                }
                for t in 0..2 {
                    let mut dt = vec![0.0; d];
                    k.backward(p, grad, tokens.row(t), dk.row(t), Some(&mut dt));
                    v.backward(p, grad, tokens.row(t), dv.row(t), Some(&mut dt));
                    for (o, g) in d_tokens.row_mut(t).iter_mut().zip(&dt) {
                        *o += g;
                    }
                }
            }
        }
        for t in 0..2 {
            for (o, g) in d_tokens.row_mut(t).iter_mut().zip(&d_pooled) {
                *o += 0.5 * g;
            }
        }
        Ok(())
    }

    /// Backward of [`Self::prepare_classes`]. Class embeddings are frozen, so
    /// only head parameters (including the class projection) receive gradient.
    pub fn backward_classes(
        &self,
        class_embeddings: &Tensor2,
        prep: &ClassPrep,
        d_prep: &Tensor2,
        grad: &mut [f64],
    ) -> Result<()> {
        let p = &self.params;
        let d = self.d_model;
        let c = prep.len();
        let mut d_proj = Tensor2::zeros(c, d);
        match &self.parts {
            Parts::Cosine => {
                for r in 0..c {
                    let unit = prep.extra.row(r);
                    let g = d_prep.row(r);
                    let along = dot(unit, g);
                    for ((o, &gi), &u) in d_proj.row_mut(r).iter_mut().zip(g).zip(unit) {
                        *o = (gi - u * along) / prep.norms[r];
                    }
                }
            }
            Parts::Linear(lin) | Parts::Mlp(lin, _) => {
                let out = lin.output();
                let off = lin.w.offset + d * out;
                for r in 0..c {
                    let x = prep.projected.row(r);
                    let g = d_prep.row(r);
                    for i in 0..d {
                        let wrow = off + i * out;
                        d_proj.row_mut(r)[i] = (0..out).map(|j| p[wrow + j] * g[j]).sum();
                        for j in 0..out {
                            grad[wrow + j] += x[i] * g[j];
                        }
                    }
                }
            }
            Parts::CrossAttention { q, .. } => {
                for r in 0..c {
                    q.backward(p, grad, prep.projected.row(r), d_prep.row(r), Some(d_proj.row_mut(r)));
                }
            }
        }
        if let Some(proj) = &self.class_proj {
            for r in 0..c {
                proj.backward(p, grad, class_embeddings.row(r), d_proj.row(r), None);
            }
        }
        Ok(())
    }

    /// Scores of a fused sample against each row of `class_embeddings`.
    pub fn scores(&self, tokens: &Tensor2, class_embeddings: &Tensor2) -> Result<Vec<f64>> {
        let prep = self.prepare_classes(class_embeddings)?;
        self.forward_sample(tokens, &prep).map(|(s, _)| s)
    }
}

/// `[x, 0…0]` of width `2d`, the sample half of a concatenated input.
fn pad(x: &[f64], d: usize) -> Vec<f64> {
    let mut v = x.to_vec();
    v.resize(2 * d, 0.0);
    v
}
