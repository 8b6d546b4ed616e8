//! Factored categorical policy on top of [`PolicyNet`].

use crate::dist::Categorical;
use crate::error::Result;
use crate::nn::{ForwardCache, PolicyNet};

/// Per-head distributions and the value estimate for one observation.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub heads: Vec<Categorical>,
    pub value: f64,
}

impl PolicyOutput {
    /// Joint log-probability: heads are independent, so it is the sum.
    pub fn log_prob(&self, action: &[usize]) -> f64 {
        self.heads
            .iter()
            .zip(action)
            .map(|(h, &a)| h.log_prob(a))
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        self.heads.iter().map(Categorical::entropy).sum()
    }

    pub fn mode(&self) -> Vec<usize> {
        self.heads.iter().map(Categorical::mode).collect()
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        self.heads.iter().map(|h| h.sample(rng)).collect()
    }
}

pub fn forward_policy(net: &PolicyNet, obs: &[f64]) -> Result<PolicyOutput> {
    let cache = net.forward(obs, 1)?;
    Ok(split_heads(net, &cache).pop().expect("batch of one"))
}

/// Batched version of [`forward_policy`]; `obs` is row-major.
pub fn forward_policy_batch(net: &PolicyNet, obs: &[f64], batch: usize) -> Result<Vec<PolicyOutput>> {
    let cache = net.forward(obs, batch)?;
    Ok(split_heads(net, &cache))
}

pub(crate) fn split_heads(net: &PolicyNet, cache: &ForwardCache) -> Vec<PolicyOutput> {
    let n = net.n_logits();
    cache
        .logits
        .chunks_exact(n)
        .zip(&cache.values)
        .map(|(row, &value)| {
            let mut off = 0;
            let heads = net
                .head_sizes()
                .iter()
                .map(|&k| {
                    let c = Categorical::from_logits(&row[off..off + k]);
                    off += k;
                    c
                })
                .collect();
            PolicyOutput { heads, value }
        })
        .collect()
}
