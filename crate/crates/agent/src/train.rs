//! PPO training loop: rollout collection over several environments, GAE,
//! then epochs of shuffled minibatch updates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfc_core::env::{Environment, Transition};
use sfc_core::seed::derive_seed;

use crate::error::{AgentError, Result};
use crate::gae::compute_gae;
use crate::nn::PolicyNet;
use crate::policy::forward_policy_batch;
use crate::ppo::{clip_grad_norm, ppo_loss_and_grad, Adam, LossStats, Minibatch, PpoConfig};

pub const TRAIN_LOG_HEADER: &str = "update,loss,policy_loss,value_loss,entropy,clip_fraction,kl";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub update: usize,
    /// Environment steps collected so far, over all environments.
    pub env_steps: usize,
    pub learning_rate: f64,
    pub grad_norm: f64,
    /// Means over the minibatches of the last epoch.
    pub loss: LossStats,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub env_index: usize,
    pub episode: usize,
    /// Global step count at which the episode ended.
    pub end_step: usize,
    pub length: usize,
    /// Undiscounted, unscaled return.
    pub total_return: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub net: PolicyNet,
    pub updates: Vec<UpdateStats>,
    pub episodes: Vec<EpisodeStats>,
    pub env_steps: usize,
}

/// Hooks invoked during training. All methods default to doing nothing.
pub trait TrainObserver<I> {
    fn on_step(&mut self, _env_index: usize, _transition: &Transition<I>) {}
    fn on_episode(&mut self, _stats: &EpisodeStats) {}
    fn on_update(&mut self, _stats: &UpdateStats) {}
}

impl<I> TrainObserver<I> for () {}

pub fn write_train_log<W: std::io::Write>(mut out: W, updates: &[UpdateStats]) -> std::io::Result<()> {
    writeln!(out, "{TRAIN_LOG_HEADER}")?;
    for u in updates {
        let l = &u.loss;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            u.update, l.loss, l.policy_loss, l.value_loss, l.entropy, l.clip_fraction, l.approx_kl
        )?;
    }
    Ok(())
}

pub fn write_episode_log<W: std::io::Write>(mut out: W, episodes: &[EpisodeStats]) -> std::io::Result<()> {
    writeln!(out, "env,episode,end_step,length,return")?;
    for e in episodes {
        writeln!(out, "{},{},{},{},{}", e.env_index, e.episode, e.end_step, e.length, e.total_return)?;
    }
    Ok(())
}

pub fn train<E, F>(make_env: F, cfg: &PpoConfig) -> Result<TrainOutput>
where
    E: Environment,
    F: FnMut(usize) -> Result<E>,
{
    train_with(make_env, cfg, &mut ())
}

struct Slot<E> {
    env: E,
    obs: Vec<f64>,
    rng: ChaCha8Rng,
    episode: usize,
    ep_len: usize,
    ep_return: f64,
}

/// Seed used for the `episode`-th reset of environment `env_index`.
pub fn episode_seed(master: u64, env_index: usize, episode: usize) -> u64 {
    derive_seed(master, "episode", ((env_index as u64) << 32) | episode as u64)
}

pub fn train_with<E, F, O>(mut make_env: F, cfg: &PpoConfig, observer: &mut O) -> Result<TrainOutput>
where
    E: Environment,
    F: FnMut(usize) -> Result<E>,
    O: TrainObserver<E::Info> + ?Sized,
{
    cfg.validate()?;
    let mut slots = Vec::with_capacity(cfg.n_envs);
    for i in 0..cfg.n_envs {
        let mut env = make_env(i)?;
        let obs = env.reset(episode_seed(cfg.seed, i, 0))?;
        slots.push(Slot {
            env,
            obs,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "action", i as u64)),
            episode: 0,
            ep_len: 0,
            ep_return: 0.0,
        });
    }
    let obs_len = slots[0].env.observation_len();
    let heads = slots[0].env.action_heads();
    let n_heads = heads.len();
    let mut net = PolicyNet::init(obs_len, &cfg.hidden, &heads, derive_seed(cfg.seed, "policy_init", 0));
    let mut adam = Adam::new(net.num_params(), cfg.adam_eps);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "minibatch", 0));

    let batch = cfg.batch_size();
    let n_updates = cfg.total_steps.div_ceil(batch);
    let (t_len, n_envs) = (cfg.rollout_length, cfg.n_envs);
    let mut updates = Vec::with_capacity(n_updates);
    let mut episodes = Vec::new();
    let mut env_steps = 0;

    for update in 0..n_updates {
        // rollout storage is time-major: index t * n_envs + env
        let mut obs_buf = Vec::with_capacity(batch * obs_len);
        let mut act_buf = Vec::with_capacity(batch * n_heads);
        let mut logp_buf = Vec::with_capacity(batch);
        let mut val_buf = Vec::with_capacity(batch);
        let mut rew_buf = Vec::with_capacity(batch);
        let mut done_buf = Vec::with_capacity(batch);

        for _ in 0..t_len {
            let stacked: Vec<f64> = slots.iter().flat_map(|s| s.obs.iter().copied()).collect();
            let outs = forward_policy_batch(&net, &stacked, n_envs)?;
            obs_buf.extend_from_slice(&stacked);
            for (i, (slot, out)) in slots.iter_mut().zip(&outs).enumerate() {
                let action = out.sample(&mut slot.rng);
                logp_buf.push(out.log_prob(&action));
                val_buf.push(out.value);
                let tr = slot.env.step(&action)?;
                act_buf.extend_from_slice(&action);
                observer.on_step(i, &tr);
                env_steps += 1;
                slot.ep_len += 1;
                slot.ep_return += tr.reward;
                rew_buf.push(tr.reward * cfg.reward_scale);
                done_buf.push(tr.done);
                if tr.done {
                    let stats = EpisodeStats {
                        env_index: i,
                        episode: slot.episode,
                        end_step: env_steps,
                        length: slot.ep_len,
                        total_return: slot.ep_return,
                    };
                    observer.on_episode(&stats);
                    episodes.push(stats);
                    slot.episode += 1;
                    slot.ep_len = 0;
                    slot.ep_return = 0.0;
                    slot.obs = slot.env.reset(episode_seed(cfg.seed, i, slot.episode))?;
                } else {
                    slot.obs = tr.observation;
                }
            }
        }

        let stacked: Vec<f64> = slots.iter().flat_map(|s| s.obs.iter().copied()).collect();
        let bootstrap = forward_policy_batch(&net, &stacked, n_envs)?;
        let mut adv_buf = vec![0.0; batch];
        let mut ret_buf = vec![0.0; batch];
        for i in 0..n_envs {
            let idx: Vec<usize> = (0..t_len).map(|t| t * n_envs + i).collect();
            let pick = |b: &[f64]| idx.iter().map(|&k| b[k]).collect::<Vec<_>>();
            let dones: Vec<bool> = idx.iter().map(|&k| done_buf[k]).collect();
            let (adv, ret) = compute_gae(
                &pick(&rew_buf),
                &pick(&val_buf),
                &dones,
                bootstrap[i].value,
                cfg.gamma,
                cfg.gae_lambda,
            );
            for (j, &k) in idx.iter().enumerate() {
                adv_buf[k] = adv[j];
                ret_buf[k] = ret[j];
            }
        }

        let lr = if cfg.anneal_lr {
            cfg.learning_rate * (1.0 - update as f64 / n_updates as f64)
        } else {
            cfg.learning_rate
        };
        let mb_size = batch / cfg.minibatches;
        let mut order: Vec<usize> = (0..batch).collect();
        let mut epoch_stats = LossStats::default();
        let mut grad_norm = 0.0;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut shuffle_rng);
            epoch_stats = LossStats::default();
            for m in 0..cfg.minibatches {
                let end = if m + 1 == cfg.minibatches { batch } else { (m + 1) * mb_size };
                let ids = &order[m * mb_size..end];
                let mut mb = Minibatch {
                    obs: ids.iter().flat_map(|&k| obs_buf[k * obs_len..(k + 1) * obs_len].iter().copied()).collect(),
                    actions: ids.iter().flat_map(|&k| act_buf[k * n_heads..(k + 1) * n_heads].iter().copied()).collect(),
                    old_log_probs: ids.iter().map(|&k| logp_buf[k]).collect(),
                    advantages: ids.iter().map(|&k| adv_buf[k]).collect(),
                    returns: ids.iter().map(|&k| ret_buf[k]).collect(),
                };
                if cfg.normalize_advantages {
                    mb.normalize_advantages();
                }
                let (stats, mut grad) = ppo_loss_and_grad(&net, &mb, cfg)?;
                grad_norm = clip_grad_norm(&mut grad, cfg.max_grad_norm);
                let last_good = net.clone();
                adam.step(net.params_mut(), &grad, lr);
                if net.params().iter().any(|p| !p.is_finite()) {
                    return Err(AgentError::Diverged { update, last_good: Box::new(last_good) });
                }
                let w = 1.0 / cfg.minibatches as f64;
                epoch_stats.loss += stats.loss * w;
                epoch_stats.policy_loss += stats.policy_loss * w;
                epoch_stats.value_loss += stats.value_loss * w;
                epoch_stats.entropy += stats.entropy * w;
                epoch_stats.clip_fraction += stats.clip_fraction * w;
                epoch_stats.approx_kl += stats.approx_kl * w;
            }
        }
        let stats = UpdateStats { update, env_steps, learning_rate: lr, grad_norm, loss: epoch_stats };
        observer.on_update(&stats);
        updates.push(stats);
    }

    Ok(TrainOutput { net, updates, episodes, env_steps })
}
