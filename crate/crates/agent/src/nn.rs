//! Small multilayer perceptron with a shared tanh trunk, a block of
//! categorical logit heads and a scalar value head.
//!
//! All weights live in one flat `Vec<f64>` so the optimizer, gradient
//! clipping and finite-difference checks treat the network as a single
//! parameter vector. Gradients are produced by a layer-by-layer reverse pass
//! over the activations cached during the forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AgentError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Dense {
    inputs: usize,
    outputs: usize,
    offset: usize,
}

impl Dense {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    fn bias(&self) -> std::ops::Range<usize> {
        let w = self.offset + self.inputs * self.outputs;
        w..w + self.outputs
    }

    fn len(&self) -> usize {
        (self.inputs + 1) * self.outputs
    }

    /// `out[b] = W x[b] + bias` for a row-major batch.
    fn forward(&self, params: &[f64], x: &[f64], batch: usize, out: &mut Vec<f64>) {
        let w = &params[self.weights()];
        let bias = &params[self.bias()];
        out.clear();
        out.reserve(batch * self.outputs);
        for xb in x.chunks_exact(self.inputs).take(batch) {
            for (row, b) in w.chunks_exact(self.inputs).zip(bias) {
                out.push(b + dot(row, xb));
            }
        }
    }

    /// Accumulates weight and bias gradients; writes the input gradient to
    /// `dx` when given.
    fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        dy: &[f64],
        grad: &mut [f64],
        dx: Option<&mut Vec<f64>>,
    ) {
        let (ni, no) = (self.inputs, self.outputs);
        {
            let gw = &mut grad[self.weights()];
            for (xb, dyb) in x.chunks_exact(ni).zip(dy.chunks_exact(no)) {
                for (grow, &d) in gw.chunks_exact_mut(ni).zip(dyb) {
                    if d != 0.0 {
                        for (g, xi) in grow.iter_mut().zip(xb) {
                            *g += d * xi;
                        }
                    }
                }
            }
        }
        {
            let gb = &mut grad[self.bias()];
            for dyb in dy.chunks_exact(no) {
                for (g, d) in gb.iter_mut().zip(dyb) {
                    *g += d;
                }
            }
        }
        if let Some(dx) = dx {
            let w = &params[self.weights()];
            dx.clear();
            dx.resize(dy.len() / no * ni, 0.0);
            for (dxb, dyb) in dx.chunks_exact_mut(ni).zip(dy.chunks_exact(no)) {
                for (row, &d) in w.chunks_exact(ni).zip(dyb) {
                    if d != 0.0 {
                        for (g, wi) in dxb.iter_mut().zip(row) {
                            *g += d * wi;
                        }
                    }
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Shared-trunk actor-critic network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    obs_len: usize,
    hidden: Vec<usize>,
    head_sizes: Vec<usize>,
    trunk: Vec<Dense>,
    logits: Dense,
    value: Dense,
    params: Vec<f64>,
}

/// Activations kept from a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: usize,
    inputs: Vec<f64>,
    // post-tanh activations of each trunk layer
    hidden: Vec<Vec<f64>>,
    /// `batch × Σ head_sizes`, heads concatenated.
    pub logits: Vec<f64>,
    pub values: Vec<f64>,
}

impl PolicyNet {
    /// Zero-initialised network.
    pub fn zeros(obs_len: usize, hidden: &[usize], head_sizes: &[usize]) -> Self {
        let mut offset = 0;
        let mut layer = |inputs, outputs| {
            let d = Dense {
                inputs,
                outputs,
                offset,
            };
            offset += d.len();
            d
        };
        let mut trunk = Vec::with_capacity(hidden.len());
        let mut width = obs_len;
        for &h in hidden {
            trunk.push(layer(width, h));
            width = h;
        }
        let logits = layer(width, head_sizes.iter().sum());
        let value = layer(width, 1);
        Self {
            obs_len,
            hidden: hidden.to_vec(),
            head_sizes: head_sizes.to_vec(),
            trunk,
            logits,
            value,
            params: vec![0.0; offset],
        }
    }

    /// Orthogonal initialisation: gain √2 on the trunk, 0.01 on the policy
    /// logits and 1 on the value head; zero biases.
    pub fn init(obs_len: usize, hidden: &[usize], head_sizes: &[usize], seed: u64) -> Self {
        let mut net = Self::zeros(obs_len, hidden, head_sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<(Dense, f64)> = net
            .trunk
            .iter()
            .map(|d| (*d, std::f64::consts::SQRT_2))
            .chain([(net.logits, 0.01), (net.value, 1.0)])
            .collect();
        for (d, gain) in layers {
            let w = orthogonal(d.outputs, d.inputs, gain, &mut rng);
            net.params[d.weights()].copy_from_slice(&w);
        }
        net
    }

    pub fn obs_len(&self) -> usize {
        self.obs_len
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn head_sizes(&self) -> &[usize] {
        &self.head_sizes
    }

    pub fn n_logits(&self) -> usize {
        self.logits.outputs
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

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(AgentError::Dimension {
                what: "parameter vector",
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params = params;
        Ok(())
    }

    pub fn forward(&self, obs: &[f64], batch: usize) -> Result<ForwardCache> {
        if obs.len() != batch * self.obs_len {
            return Err(AgentError::Dimension {
                what: "observation batch",
                expected: batch * self.obs_len,
                got: obs.len(),
            });
        }
        let mut hidden = Vec::with_capacity(self.trunk.len());
        let mut x: &[f64] = obs;
        for d in &self.trunk {
            let mut h = Vec::new();
            d.forward(&self.params, x, batch, &mut h);
            h.iter_mut().for_each(|v| *v = v.tanh());
            hidden.push(h);
            x = hidden.last().expect("just pushed");
        }
        let mut logits = Vec::new();
        self.logits.forward(&self.params, x, batch, &mut logits);
        let mut values = Vec::new();
        self.value.forward(&self.params, x, batch, &mut values);
        Ok(ForwardCache {
            batch,
            inputs: obs.to_vec(),
            hidden,
            logits,
            values,
        })
    }

    /// Gradient of a loss given its derivatives with respect to the logits and
    /// values of `cache`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64], dvalues: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        let top: &[f64] = cache.hidden.last().map_or(&cache.inputs, |h| h);
        let mut dtop_l = Vec::new();
        let mut dtop_v = Vec::new();
        let need_dx = !self.trunk.is_empty();
        self.logits.backward(
            &self.params,
            top,
            dlogits,
            &mut grad,
            need_dx.then_some(&mut dtop_l),
        );
        self.value.backward(
            &self.params,
            top,
            dvalues,
            &mut grad,
            need_dx.then_some(&mut dtop_v),
        );
        if !need_dx {
            return grad;
        }
        let mut delta: Vec<f64> = dtop_l.iter().zip(&dtop_v).map(|(a, b)| a + b).collect();
        for (i, d) in self.trunk.iter().enumerate().rev() {
            // through tanh: dy/dz = 1 - y²
            for (g, y) in delta.iter_mut().zip(&cache.hidden[i]) {
                *g *= 1.0 - y * y;
            }
            let input: &[f64] = if i == 0 { &cache.inputs } else { &cache.hidden[i - 1] };
            let mut dx = Vec::new();
            d.backward(&self.params, input, &delta, &mut grad, (i > 0).then_some(&mut dx));
            delta = dx;
        }
        grad
    }
}

/// `rows × cols` matrix with orthonormal rows (or columns, if taller than
/// wide), scaled by `gain`.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (n, dim) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(n);
    while vecs.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for u in &vecs {
            let p = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            vecs.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = gain
                * if rows <= cols {
                    vecs[r][c]
                } else {
                    vecs[c][r]
                };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count() {
        let net = PolicyNet::zeros(476, &[64, 64], &[4, 10, 5, 4]);
        let expected = 477 * 64 + 65 * 64 + 65 * 23 + 65;
        assert_eq!(net.num_params(), expected);
    }

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = orthogonal(3, 5, 1.0, &mut rng);
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(&m[i * 5..i * 5 + 5], &m[j * 5..j * 5 + 5]);
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((d - e).abs() < 1e-12);
            }
        }
        let tall = orthogonal(5, 2, 2.0, &mut rng);
        let col = |c: usize| (0..5).map(|r| tall[r * 2 + c]).collect::<Vec<_>>();
        assert!((dot(&col(0), &col(0)) - 4.0).abs() < 1e-12);
        assert!(dot(&col(0), &col(1)).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let net = PolicyNet::init(3, &[4], &[2], 0);
        assert!(matches!(net.forward(&[0.0; 5], 2), Err(AgentError::Dimension { .. })));
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(PolicyNet::init(3, &[4], &[2], 5), PolicyNet::init(3, &[4], &[2], 5));
        assert_ne!(PolicyNet::init(3, &[4], &[2], 5), PolicyNet::init(3, &[4], &[2], 6));
    }
}
