//! Parameter slots in a flat vector and the differentiable layers built on them.

use rand::Rng;

use crate::numerics::Tensor2;

/// A `rows×cols` block of a flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn of<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.len()]
    }

    pub fn of_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        let len = self.len();
        &mut p[self.offset..self.offset + len]
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

/// Allocates slots in order; the allocation order is the serialized order.
#[derive(Debug, Default)]
pub(crate) struct Layout {
    pub len: usize,
    inits: Vec<(Slot, Init)>,
}

impl Layout {
    fn alloc(&mut self, rows: usize, cols: usize, init: Init) -> Slot {
        let s = Slot {
            offset: self.len,
            rows,
            cols,
        };
        self.len += rows * cols;
        self.inits.push((s, init));
        s
    }

    pub fn linear(&mut self, input: usize, output: usize) -> Linear {
        Linear {
            w: self.alloc(input, output, Init::Xavier),
            b: self.alloc(1, output, Init::Zeros),
        }
    }

    pub fn layer_norm(&mut self, dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: self.alloc(1, dim, Init::Ones),
            beta: self.alloc(1, dim, Init::Zeros),
        }
    }

    /// Xavier-uniform weights, zero biases, unit layer-norm scales.
    pub fn initialize<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.len];
        for (slot, init) in &self.inits {
            let block = slot.of_mut(&mut p);
            match init {
                Init::Xavier => {
                    let bound = (6.0 / (slot.rows + slot.cols) as f64).sqrt();
                    for x in block {
                        *x = rng.random_range(-bound..=bound);
                    }
                }
                Init::Zeros => {}
                Init::Ones => block.fill(1.0),
            }
        }
        p
    }
}

/// `y = x·W + b` with `W` stored `input×output`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Linear {
    pub w: Slot,
    pub b: Slot,
}

impl Linear {

    pub fn output(&self) -> usize {
        self.w.cols
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        let mut y = self.b.of(p).to_vec();
        let w = self.w.of(p);
        let out = self.output();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (yj, &wij) in y.iter_mut().zip(&w[i * out..(i + 1) * out]) {
                *yj += xi * wij;
            }
        }
        y
    }

    /// Row-wise forward over a matrix of inputs.
    pub fn forward_rows(&self, p: &[f64], x: &Tensor2) -> Tensor2 {
        let mut out = Tensor2::zeros(x.rows(), self.output());
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&self.forward(p, x.row(r)));
        }
        out
    }

    /// Accumulates parameter gradients into `g` and, when given, the input
    /// gradient into `dx`.
    pub fn backward(&self, p: &[f64], g: &mut [f64], x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
        let out = self.output();
        {
            let gw = self.w.of_mut(g);
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (gij, &d) in gw[i * out..(i + 1) * out].iter_mut().zip(dy) {
                    *gij += xi * d;
                }
            }
        }
        for (gb, &d) in self.b.of_mut(g).iter_mut().zip(dy) {
            *gb += d;
        }
        if let Some(dx) = dx {
            let w = self.w.of(p);
            for (i, dxi) in dx.iter_mut().enumerate() {
                *dxi += w[i * out..(i + 1) * out].iter().zip(dy).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct LayerNorm {
    pub gamma: Slot,
    pub beta: Slot,
}

#[derive(Clone, Debug)]
pub(crate) struct LnCache {
    xhat: Vec<f64>,
    inv_std: f64,
}

impl LayerNorm {
    pub fn forward(&self, p: &[f64], x: &[f64]) -> (Vec<f64>, LnCache) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
        let y = xhat
            .iter()
            .zip(self.gamma.of(p))
            .zip(self.beta.of(p))
            .map(|((h, g), b)| g * h + b)
            .collect();
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &LnCache, dy: &[f64], dx: &mut [f64]) {
        for ((gg, &d), &h) in self.gamma.of_mut(g).iter_mut().zip(dy).zip(&cache.xhat) {
            *gg += d * h;
        }
        for (gb, &d) in self.beta.of_mut(g).iter_mut().zip(dy) {
            *gb += d;
        }
        let dxhat: Vec<f64> = dy.iter().zip(self.gamma.of(p)).map(|(d, g)| d * g).collect();
        let n = dy.len() as f64;
        let sum: f64 = dxhat.iter().sum();
        let sum_h: f64 = dxhat.iter().zip(&cache.xhat).map(|(a, b)| a * b).sum();
        for ((o, &d), &h) in dx.iter_mut().zip(&dxhat).zip(&cache.xhat) {
            *o += cache.inv_std / n * (n * d - sum - h * sum_h);
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn linear_and_layer_norm_gradients() {
        let mut layout = Layout::default();
        let lin = layout.linear(5, 4);
        let ln = layout.layer_norm(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = layout.initialize(&mut rng);
        for v in params.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = params.len();
        let f = |q: &[f64]| {
            let (p, xx) = q.split_at(n);
            let (y, _) = ln.forward(p, &lin.forward(p, xx));
            y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = lin.forward(&params, &x);
        let (_, cache) = ln.forward(&params, &h);
        let mut g = vec![0.0; n];
        let mut dh = vec![0.0; 4];
        ln.backward(&params, &mut g, &cache, &w, &mut dh);
        let mut dx = vec![0.0; 5];
        lin.backward(&params, &mut g, &x, &dh, Some(&mut dx));
        let mut point = params.clone();
        point.extend(&x);
        g.extend(dx);
        let r = finite_diff_check(f, &g, &point, 1e-5).unwrap();
        assert!(r.passes(1e-6), "{r:?}");
    }
}
