//! Clipped-surrogate PPO objective, its gradient, and the Adam optimizer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AgentError, Result};
use crate::nn::PolicyNet;
use crate::policy::split_heads;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    /// Linearly decay the learning rate to zero over training.
    pub anneal_lr: bool,
    /// Steps collected per environment between updates.
    pub rollout_length: usize,
    pub minibatches: usize,
    pub epochs: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub adam_eps: f64,
    pub normalize_advantages: bool,
    /// Multiplies rewards before they reach GAE and the value loss.
    pub reward_scale: f64,
    /// Environment steps summed over all environments.
    pub total_steps: usize,
    pub n_envs: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            learning_rate: 2.5e-4,
            anneal_lr: false,
            rollout_length: 128,
            minibatches: 4,
            epochs: 4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            adam_eps: 1e-5,
            normalize_advantages: true,
            reward_scale: 1.0,
            total_steps: 0,
            n_envs: 1,
            hidden: vec![64, 64],
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AgentError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.clip_epsilon > 0.0) {
            return bad("clip_epsilon must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.rollout_length == 0 || self.n_envs == 0 || self.epochs == 0 {
            return bad("rollout_length, n_envs and epochs must be at least 1");
        }
        if self.minibatches == 0 || self.minibatches > self.rollout_length * self.n_envs {
            return bad("minibatches must be between 1 and the rollout batch size");
        }
        if !(self.max_grad_norm > 0.0) || !(self.adam_eps > 0.0) {
            return bad("max_grad_norm and adam_eps must be positive");
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return bad("reward_scale must be positive");
        }
        if self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return bad("loss coefficients must be non-negative");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.rollout_length * self.n_envs
    }
}

/// Samples for one gradient step. `actions` is `batch × n_heads`, row-major.
#[derive(Debug, Clone, Default)]
pub struct Minibatch {
    pub obs: Vec<f64>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.advantages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.advantages.is_empty()
    }

    /// Shifts and scales advantages to zero mean and unit variance.
    pub fn normalize_advantages(&mut self) {
        let n = self.advantages.len() as f64;
        if n < 2.0 {
            return;
        }
        let mean = self.advantages.iter().sum::<f64>() / n;
        let var = self.advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        let sd = var.sqrt() + 1e-8;
        self.advantages.iter_mut().for_each(|a| *a = (*a - mean) / sd);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    /// Estimate of KL(old ‖ new): mean of `(ρ - 1) - ln ρ`.
    pub approx_kl: f64,
}

impl LossStats {
    fn add(&mut self, o: &Self) {
        self.policy_loss += o.policy_loss;
        self.value_loss += o.value_loss;
        self.entropy += o.entropy;
        self.clip_fraction += o.clip_fraction;
        self.approx_kl += o.approx_kl;
    }
}

// samples per parallel work unit; fixed so summation order never changes
const CHUNK: usize = 32;

/// Loss value and diagnostics.
pub fn ppo_loss(net: &PolicyNet, mb: &Minibatch, cfg: &PpoConfig) -> Result<LossStats> {
    loss_impl(net, mb, cfg, false).map(|(s, _)| s)
}

/// Loss and its gradient with respect to every network parameter.
pub fn ppo_loss_and_grad(
    net: &PolicyNet,
    mb: &Minibatch,
    cfg: &PpoConfig,
) -> Result<(LossStats, Vec<f64>)> {
    loss_impl(net, mb, cfg, true).map(|(s, g)| (s, g.expect("gradient requested")))
}

fn loss_impl(
    net: &PolicyNet,
    mb: &Minibatch,
    cfg: &PpoConfig,
    want_grad: bool,
) -> Result<(LossStats, Option<Vec<f64>>)> {
    let b = mb.len();
    let n_heads = net.head_sizes().len();
    let obs_len = net.obs_len();
    let check = |what, expected, got| {
        if expected == got {
            Ok(())
        } else {
            Err(AgentError::Dimension { what, expected, got })
        }
    };
    check("minibatch observations", b * obs_len, mb.obs.len())?;
    check("minibatch actions", b * n_heads, mb.actions.len())?;
    check("minibatch old log-probs", b, mb.old_log_probs.len())?;
    check("minibatch returns", b, mb.returns.len())?;
    if b == 0 {
        return Err(AgentError::Dimension { what: "minibatch", expected: 1, got: 0 });
    }
    for (&a, &k) in mb.actions.iter().zip(net.head_sizes().iter().cycle()) {
        if a >= k {
            return Err(AgentError::Dimension { what: "action index bound", expected: k, got: a });
        }
    }

    let starts: Vec<usize> = (0..b).step_by(CHUNK).collect();
    let parts: Vec<Result<(LossStats, Option<Vec<f64>>)>> = starts
        .par_iter()
        .map(|&s| chunk_loss(net, mb, cfg, s, (s + CHUNK).min(b), b, want_grad))
        .collect();

    let mut stats = LossStats::default();
    let mut grad: Option<Vec<f64>> = None;
    for part in parts {
        let (s, g) = part?;
        stats.add(&s);
        if let Some(g) = g {
            match grad.as_mut() {
                None => grad = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
            }
        }
    }
    stats.loss = stats.policy_loss + cfg.value_coef * stats.value_loss - cfg.entropy_coef * stats.entropy;
    if !stats.loss.is_finite() {
        return Err(AgentError::NonFiniteLoss {
            what: "loss",
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
        });
    }
    Ok((stats, grad))
}

/// Contribution of samples `lo..hi`, already divided by the full batch size.
fn chunk_loss(
    net: &PolicyNet,
    mb: &Minibatch,
    cfg: &PpoConfig,
    lo: usize,
    hi: usize,
    total: usize,
    want_grad: bool,
) -> Result<(LossStats, Option<Vec<f64>>)> {
    let n = hi - lo;
    let obs_len = net.obs_len();
    let n_heads = net.head_sizes().len();
    let n_logits = net.n_logits();
    let inv = 1.0 / total as f64;
    let eps = cfg.clip_epsilon;

    let cache = net.forward(&mb.obs[lo * obs_len..hi * obs_len], n)?;
    let outs = split_heads(net, &cache);
    let mut stats = LossStats::default();
    let mut dlogits = vec![0.0; n * n_logits];
    let mut dvalues = vec![0.0; n];

    for (j, out) in outs.iter().enumerate() {
        let i = lo + j;
        let action = &mb.actions[i * n_heads..(i + 1) * n_heads];
        let adv = mb.advantages[i];
        let log_ratio = out.log_prob(action) - mb.old_log_probs[i];
        let ratio = log_ratio.exp();
        let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
        let unclipped_obj = ratio * adv;
        let clipped_obj = clipped * adv;
        stats.policy_loss -= unclipped_obj.min(clipped_obj) * inv;
        if (ratio - 1.0).abs() > eps {
            stats.clip_fraction += inv;
        }
        stats.approx_kl += ((ratio - 1.0) - log_ratio) * inv;
        let verr = out.value - mb.returns[i];
        stats.value_loss += verr * verr * inv;
        let entropy = out.entropy();
        stats.entropy += entropy * inv;

        if !want_grad {
            continue;
        }
        // d(policy loss)/d(joint log-prob); zero when the clipped branch wins
        let dlogp = if unclipped_obj <= clipped_obj { -unclipped_obj * inv } else { 0.0 };
        dvalues[j] = cfg.value_coef * 2.0 * verr * inv;
        let row = &mut dlogits[j * n_logits..(j + 1) * n_logits];
        let mut off = 0;
        for (head, &a) in out.heads.iter().zip(action) {
            let lp = head.log_probs();
            let h_ent = head.entropy();
            for (k, &l) in lp.iter().enumerate() {
                let p = l.exp();
                let onehot = if k == a { 1.0 } else { 0.0 };
                // d log p_a / d z_k = 1[k=a] - p_k ; d H / d z_k = -p_k (ln p_k + H)
                let dent = if p > 0.0 { -p * (l + h_ent) } else { 0.0 };
                row[off + k] = dlogp * (onehot - p) - cfg.entropy_coef * inv * dent;
            }
            off += lp.len();
        }
    }
    let grad = want_grad.then(|| net.backward(&cache, &dlogits, &dvalues));
    Ok((stats, grad))
}

/// Scales `grad` in place so its Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    // beta^t as running products; powi rounding varies between builds
    beta1_t: f64,
    beta2_t: f64,
}

impl Adam {
    pub fn new(n_params: usize, eps: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1_t: 1.0,
            beta2_t: 1.0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        self.beta1_t *= self.beta1;
        self.beta2_t *= self.beta2;
        let c1 = 1.0 - self.beta1_t;
        let c2 = 1.0 - self.beta2_t;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::forward_policy_batch;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_batch(net: &PolicyNet, n: usize, seed: u64) -> Minibatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs: Vec<f64> = (0..n * net.obs_len()).map(|_| rng.random_range(-1.5..1.5)).collect();
        let actions: Vec<usize> = (0..n)
            .flat_map(|_| net.head_sizes().to_vec())
            .map(|k| rng.random_range(0..k))
            .collect();
        let old_log_probs = (0..n).map(|_| rng.random_range(-3.0..-0.5)).collect();
        let advantages = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let returns = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Minibatch { obs, actions, old_log_probs, advantages, returns }
    }

    fn with_logp_of(net: &PolicyNet, mut mb: Minibatch, shift: f64) -> Minibatch {
        let outs = forward_policy_batch(net, &mb.obs, mb.len()).unwrap();
        let nh = net.head_sizes().len();
        for (i, o) in outs.iter().enumerate() {
            mb.old_log_probs[i] = o.log_prob(&mb.actions[i * nh..(i + 1) * nh]) - shift;
        }
        mb
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
    }

    fn finite_difference_check(cfg: &PpoConfig, mb: &Minibatch, net: &PolicyNet) {
        let (_, grad) = ppo_loss_and_grad(net, mb, cfg).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..net.num_params() {
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let up = ppo_loss(&p, mb, cfg).unwrap().loss;
            p.params_mut()[i] -= 2.0 * h;
            let down = ppo_loss(&p, mb, cfg).unwrap().loss;
            let fd = (up - down) / (2.0 * h);
            if fd.abs() > 1e-7 || grad[i].abs() > 1e-7 {
                worst = worst.max(rel_err(fd, grad[i]));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    fn toy_net() -> PolicyNet {
        // one input, no hidden layer, two binary heads: 10 parameters
        let mut net = PolicyNet::init(1, &[], &[2, 2], 9);
        assert_eq!(net.num_params(), 10);
        let p: Vec<f64> = net.params().iter().enumerate().map(|(i, x)| x + 0.3 * (i as f64).cos()).collect();
        net.set_params(p).unwrap();
        net
    }

    #[test]
    fn gradient_matches_finite_differences_policy_term() {
        let net = toy_net();
        let cfg = PpoConfig { value_coef: 0.0, entropy_coef: 0.0, clip_epsilon: 10.0, ..Default::default() };
        let mb = with_logp_of(&net, toy_batch(&net, 7, 1), 0.1);
        finite_difference_check(&cfg, &mb, &net);
    }

    #[test]
    fn gradient_matches_finite_differences_value_term() {
        let net = toy_net();
        let cfg = PpoConfig { value_coef: 0.7, entropy_coef: 0.0, ..Default::default() };
        let mut mb = toy_batch(&net, 7, 2);
        mb.advantages.iter_mut().for_each(|a| *a = 0.0);
        finite_difference_check(&cfg, &mb, &net);
    }

    #[test]
    fn gradient_matches_finite_differences_entropy_term() {
        let net = toy_net();
        let cfg = PpoConfig { value_coef: 0.0, entropy_coef: 0.3, ..Default::default() };
        let mut mb = toy_batch(&net, 7, 3);
        mb.advantages.iter_mut().for_each(|a| *a = 0.0);
        finite_difference_check(&cfg, &mb, &net);
    }

    #[test]
    fn gradient_matches_finite_differences_full_loss_with_hidden_layers() {
        let net = PolicyNet::init(3, &[4, 3], &[3, 2, 2], 5);
        let cfg = PpoConfig { entropy_coef: 0.05, ..Default::default() };
        // old log-probs near the new ones keep most samples off the clip kink
        let mb = with_logp_of(&net, toy_batch(&net, 40, 4), 0.05);
        finite_difference_check(&cfg, &mb, &net);
    }

    #[test]
    fn identity_ratio_gives_minus_mean_advantage() {
        let net = PolicyNet::init(3, &[4], &[3, 2], 5);
        let cfg = PpoConfig::default();
        let mb = with_logp_of(&net, toy_batch(&net, 50, 6), 0.0);
        let s = ppo_loss(&net, &mb, &cfg).unwrap();
        let mean_a = mb.advantages.iter().sum::<f64>() / 50.0;
        assert!((s.policy_loss + mean_a).abs() < 1e-12);
        assert_eq!(s.clip_fraction, 0.0);
        assert!(s.approx_kl.abs() < 1e-12);
    }

    #[test]
    fn clipped_samples_have_no_policy_gradient() {
        let net = PolicyNet::init(3, &[4], &[3, 2], 5);
        let cfg = PpoConfig { value_coef: 0.0, entropy_coef: 0.0, ..Default::default() };
        // ρ = 1 + 2ε for every sample, with positive advantages
        let mut mb = with_logp_of(&net, toy_batch(&net, 10, 7), (1.0f64 + 2.0 * 0.2).ln());
        mb.advantages.iter_mut().for_each(|a| *a = a.abs() + 0.1);
        let (s, g) = ppo_loss_and_grad(&net, &mb, &cfg).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        assert!((s.clip_fraction - 1.0).abs() < 1e-12);
        let mean_a = mb.advantages.iter().sum::<f64>() / 10.0;
        assert!((s.policy_loss + 1.2 * mean_a).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let net = PolicyNet::init(3, &[4], &[3, 2], 5);
        let mut mb = toy_batch(&net, 4, 1);
        mb.returns.pop();
        assert!(matches!(ppo_loss(&net, &mb, &PpoConfig::default()), Err(AgentError::Dimension { .. })));
        let mut mb = toy_batch(&net, 4, 1);
        mb.actions[1] = 2;
        assert!(ppo_loss(&net, &mb, &PpoConfig::default()).is_err());
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let net = PolicyNet::init(3, &[4], &[3, 2], 5);
        let mut mb = toy_batch(&net, 4, 1);
        mb.returns[0] = f64::NAN;
        assert!(matches!(ppo_loss(&net, &mb, &PpoConfig::default()), Err(AgentError::NonFiniteLoss { .. })));
    }

    #[test]
    fn gradient_independent_of_chunking() {
        let net = PolicyNet::init(3, &[4], &[3, 2], 5);
        let mb = with_logp_of(&net, toy_batch(&net, 100, 8), 0.02);
        let cfg = PpoConfig::default();
        let (_, g1) = ppo_loss_and_grad(&net, &mb, &cfg).unwrap();
        let (_, g2) = ppo_loss_and_grad(&net, &mb, &cfg).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(2, 1e-8);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[0.5, -3.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clip_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g, vec![3.0, 4.0]);
        clip_grad_norm(&mut g, 0.5);
        assert!((g[0].hypot(g[1]) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn advantage_normalisation() {
        let mut mb = Minibatch { advantages: vec![1.0, 2.0, 3.0, 6.0], ..Default::default() };
        mb.normalize_advantages();
        let m = mb.advantages.iter().sum::<f64>() / 4.0;
        let v = mb.advantages.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-6);
    }

    #[test]
    fn default_config_is_valid() {
        PpoConfig::default().validate().unwrap();
        assert!(PpoConfig { gamma: 1.5, ..Default::default() }.validate().is_err());
        assert!(PpoConfig { clip_epsilon: 0.0, ..Default::default() }.validate().is_err());
    }
}
