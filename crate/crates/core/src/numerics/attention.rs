//! Multi-head scaled dot-product attention without input or output
//! projections. Projections, residuals and normalization are composed on top
//! of this primitive by the fusion model.

use crate::error::{Error, Result};

use super::tensor::Tensor2;

/// Softmax weights kept from the forward pass, one `Q×K` matrix per head.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub probs: Vec<Tensor2>,
}

fn check_shapes(q: &Tensor2, k: &Tensor2, v: &Tensor2, heads: usize) -> Result<usize> {
    let d = q.cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Dimension(format!(
            "model dim {d} not divisible by {heads} heads"
        )));
    }
    if k.rows() == 0 {
        return Err(Error::Dimension("attention needs at least one key".into()));
    }
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(Error::Dimension(format!(
            "queries {:?}, keys {:?}, values {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok(d / heads)
}

pub fn attention_forward(q: &Tensor2, k: &Tensor2, v: &Tensor2, heads: usize) -> Result<Tensor2> {
    attention_forward_cached(q, k, v, heads).map(|(out, _)| out)
}

pub fn attention_forward_cached(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    heads: usize,
) -> Result<(Tensor2, AttentionCache)> {
    let hd = check_shapes(q, k, v, heads)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let (nq, nk) = (q.rows(), k.rows());
    let mut out = Tensor2::zeros(nq, q.cols());
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let mut p = Tensor2::zeros(nq, nk);
        for i in 0..nq {
            let qi = &q.row(i)[cols.clone()];
            let row = p.row_mut(i);
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &k.row(j)[cols.clone()];
                *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            for s in row.iter_mut() {
                *s /= z;
            }
            let orow = &mut out.row_mut(i)[cols.clone()];
            for (j, &pj) in p.row(i).iter().enumerate() {
                for (o, &vv) in orow.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += pj * vv;
                }
            }
        }
        probs.push(p);
    }
    Ok((out, AttentionCache { probs }))
}

/// Gradients of the attention output with respect to queries, keys and values.
pub fn attention_backward(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    cache: &AttentionCache,
    d_out: &Tensor2,
    heads: usize,
) -> Result<(Tensor2, Tensor2, Tensor2)> {
    let hd = check_shapes(q, k, v, heads)?;
    if d_out.shape() != q.shape() || cache.probs.len() != heads {
        return Err(Error::Dimension("attention backward shapes".into()));
    }
    let scale = 1.0 / (hd as f64).sqrt();
    let (nq, nk) = (q.rows(), k.rows());
    let mut dq = Tensor2::zeros(nq, q.cols());
    let mut dk = Tensor2::zeros(nk, k.cols());
    let mut dv = Tensor2::zeros(nk, v.cols());
    for (h, p) in cache.probs.iter().enumerate() {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..nq {
            let go = &d_out.row(i)[cols.clone()];
            let pi = p.row(i);
            // dP_ij = dO_i · V_j
            let dp: Vec<f64> = (0..nk)
                .map(|j| go.iter().zip(&v.row(j)[cols.clone()]).map(|(a, b)| a * b).sum())
                .collect();
            let inner: f64 = pi.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..nk {
                for (dvv, &g) in dv.row_mut(j)[cols.clone()].iter_mut().zip(go) {
                    *dvv += pi[j] * g;
                }
                let ds = pi[j] * (dp[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                for (dqq, &kk) in dq.row_mut(i)[cols.clone()].iter_mut().zip(&k.row(j)[cols.clone()]) {
                    *dqq += ds * kk;
                }
                for (dkk, &qq) in dk.row_mut(j)[cols.clone()].iter_mut().zip(&q.row(i)[cols.clone()]) {
                    *dkk += ds * qq;
                }
            }
        }
    }
    Ok((dq, dk, dv))
}
