//! Policies that drive an [`SfcEnv`]: the trained network and the
//! comparison baselines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfc_core::env::{ActionKind, ActionTuple, SfcEnv};
use sfc_core::sim::VnfType;

use crate::error::{AgentError, Result};
use crate::nn::PolicyNet;
use crate::policy::forward_policy;

pub trait SfcPolicy: Send {
    fn name(&self) -> &str;

    /// Called before each evaluation run.
    fn reset(&mut self, _seed: u64) {}

    fn act(&mut self, env: &SfcEnv, obs: &[f64]) -> Result<ActionTuple>;
}

/// The trained network, acting on the mode of each head unless sampling is
/// requested.
#[derive(Debug, Clone)]
pub struct PpoPolicy {
    net: PolicyNet,
    greedy: bool,
    rng: ChaCha8Rng,
}

impl PpoPolicy {
    pub fn greedy(net: PolicyNet) -> Self {
        Self { net, greedy: true, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn stochastic(net: PolicyNet) -> Self {
        Self { net, greedy: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn net(&self) -> &PolicyNet {
        &self.net
    }
}

impl SfcPolicy for PpoPolicy {
    fn name(&self) -> &str {
        "ppo"
    }

    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn act(&mut self, _env: &SfcEnv, obs: &[f64]) -> Result<ActionTuple> {
        let out = forward_policy(&self.net, obs)?;
        let idx = if self.greedy { out.mode() } else { out.sample(&mut self.rng) };
        ActionTuple::from_head_indices(&idx).ok_or(AgentError::Dimension {
            what: "policy heads",
            expected: 4,
            got: idx.len(),
        })
    }
}

/// Uniform over every in-range action tuple.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl SfcPolicy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn act(&mut self, env: &SfcEnv, _obs: &[f64]) -> Result<ActionTuple> {
        let topo = env.topology();
        let idx = [
            self.rng.random_range(0..ActionKind::ALL.len()),
            self.rng.random_range(0..topo.n_dcs),
            self.rng.random_range(0..topo.servers_per_dc),
            self.rng.random_range(0..VnfType::COUNT),
        ];
        Ok(ActionTuple::from_head_indices(&idx).expect("four components"))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoOpPolicy;

impl SfcPolicy for NoOpPolicy {
    fn name(&self) -> &str {
        "noop"
    }

    fn act(&mut self, _env: &SfcEnv, _obs: &[f64]) -> Result<ActionTuple> {
        Ok(ActionTuple::noop())
    }
}

/// Hand-written rule: create any VNF type with no operational instance on
/// the least-loaded up server that can take it; otherwise restart the
/// riskiest instance once its risk passes the threshold; otherwise wait.
#[derive(Debug, Clone, Copy)]
pub struct StaticGreedyPolicy {
    pub restart_threshold: f64,
}

impl Default for StaticGreedyPolicy {
    fn default() -> Self {
        Self { restart_threshold: 0.5 }
    }
}

impl SfcPolicy for StaticGreedyPolicy {
    fn name(&self) -> &str {
        "static_greedy"
    }

    fn act(&mut self, env: &SfcEnv, _obs: &[f64]) -> Result<ActionTuple> {
        let Some(sim) = env.sim() else {
            return Err(sfc_core::Error::NotReset.into());
        };
        let topo = sim.topology();
        let counts = sim.operational_counts();
        if let Some(ty) = VnfType::ALL.into_iter().find(|t| counts[t.index()] == 0) {
            let target = sim
                .servers()
                .iter()
                .filter(|s| {
                    s.up && s.vnfs.len() < topo.max_vnfs_per_server
                        && s.count_of(ty) < topo.max_same_type_per_server
                })
                .min_by_key(|s| s.vnfs.len());
            return Ok(match target {
                Some(s) => ActionTuple::create(s.dc_id, s.server_id, ty),
                None => ActionTuple::noop(),
            });
        }
        let mut best: Option<(f64, &sfc_core::sim::ServerState, VnfType)> = None;
        for s in sim.servers().iter().filter(|s| s.up) {
            for v in &s.vnfs {
                let risk = sim.fail_risk(s.dc_id, s.server_id, v.instance_id).unwrap_or(0.0);
                if best.as_ref().is_none_or(|(r, _, _)| risk > *r) {
                    best = Some((risk, s, v.vnf_type));
                }
            }
        }
        Ok(match best {
            Some((risk, s, ty)) if risk > self.restart_threshold => ActionTuple {
                kind: ActionKind::Restart,
                dc: s.dc_id,
                server: s.server_id,
                vnf_type: ty,
            },
            _ => ActionTuple::noop(),
        })
    }
}

/// Baseline names accepted by [`baseline_by_name`].
pub const BASELINES: [&str; 3] = ["random", "noop", "static_greedy"];

pub fn baseline_by_name(name: &str, seed: u64) -> Option<Box<dyn SfcPolicy>> {
    match name {
        "random" => Some(Box::new(RandomPolicy::new(seed))),
        "noop" => Some(Box::new(NoOpPolicy)),
        "static_greedy" => Some(Box::new(StaticGreedyPolicy::default())),
        _ => None,
    }
}
