//! Multi-seed evaluation of a policy on an [`SfcEnv`].

use std::io::Write;

use rayon::prelude::*;
use sfc_core::env::{SfcEnv, StepRecord};

use crate::baselines::SfcPolicy;
use crate::error::{AgentError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub total_packets: f64,
    pub total_lost: f64,
    pub total_reward: f64,
    pub mean_reward: f64,
    pub mean_energy: f64,
    /// Fraction of steps with a complete SFC.
    pub sfc_uptime: f64,
    pub first_complete_step: Option<usize>,
}

impl RunSummary {
    pub fn from_records(records: &[StepRecord]) -> Self {
        let n = records.len().max(1) as f64;
        let total_packets = records.iter().map(|r| r.packets).sum();
        let total_lost = records.iter().map(|r| r.lost).sum();
        let total_reward: f64 = records.iter().map(|r| r.reward).sum();
        Self {
            total_packets,
            total_lost,
            total_reward,
            mean_reward: total_reward / n,
            mean_energy: records.iter().map(|r| r.energy_w).sum::<f64>() / n,
            sfc_uptime: records.iter().filter(|r| r.sfc == 1).count() as f64 / n,
            first_complete_step: records.iter().find(|r| r.sfc == 1).map(|r| r.step),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub summary: RunSummary,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: impl IntoIterator<Item = f64>) -> Self {
        let xs: Vec<f64> = xs.into_iter().collect();
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub runs: usize,
    pub reward: MeanStd,
    pub cum_reward: MeanStd,
    pub cum_lost: MeanStd,
    pub energy: MeanStd,
    pub sfc_mean: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub policy: String,
    pub runs: Vec<RunResult>,
}

pub const STEP_STATS_HEADER: &str = "step,runs,reward_mean,reward_std,cum_reward_mean,cum_reward_std,\
cum_lost_mean,cum_lost_std,energy_mean,energy_std,sfc_mean";

pub const SUMMARY_HEADER: &str =
    "run,seed,total_packets,total_lost,total_reward,mean_reward,mean_energy,sfc_uptime,first_complete_step";

impl EvalReport {
    /// Per-step statistics across runs; a step counts only the runs that
    /// reached it.
    pub fn step_stats(&self) -> Vec<StepStats> {
        let len = self.runs.iter().map(|r| r.records.len()).max().unwrap_or(0);
        (0..len)
            .map(|t| {
                let recs: Vec<&StepRecord> = self.runs.iter().filter_map(|r| r.records.get(t)).collect();
                StepStats {
                    step: t,
                    runs: recs.len(),
                    reward: MeanStd::of(recs.iter().map(|r| r.reward)),
                    cum_reward: MeanStd::of(recs.iter().map(|r| r.cum_reward)),
                    cum_lost: MeanStd::of(recs.iter().map(|r| r.cum_lost)),
                    energy: MeanStd::of(recs.iter().map(|r| r.energy_w)),
                    sfc_mean: recs.iter().map(|r| r.sfc as f64).sum::<f64>() / recs.len() as f64,
                }
            })
            .collect()
    }

    /// Field-wise mean of the run summaries. `first_complete_step` is the
    /// mean over runs that ever completed the SFC.
    pub fn mean_summary(&self) -> (RunSummary, Option<f64>) {
        let n = self.runs.len() as f64;
        let avg = |f: fn(&RunSummary) -> f64| self.runs.iter().map(|r| f(&r.summary)).sum::<f64>() / n;
        let firsts: Vec<f64> = self
            .runs
            .iter()
            .filter_map(|r| r.summary.first_complete_step.map(|s| s as f64))
            .collect();
        let first = (!firsts.is_empty()).then(|| firsts.iter().sum::<f64>() / firsts.len() as f64);
        (
            RunSummary {
                total_packets: avg(|s| s.total_packets),
                total_lost: avg(|s| s.total_lost),
                total_reward: avg(|s| s.total_reward),
                mean_reward: avg(|s| s.mean_reward),
                mean_energy: avg(|s| s.mean_energy),
                sfc_uptime: avg(|s| s.sfc_uptime),
                first_complete_step: None,
            },
            first,
        )
    }

    pub fn write_step_stats<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{STEP_STATS_HEADER}")?;
        for s in self.step_stats() {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                s.step,
                s.runs,
                s.reward.mean,
                s.reward.std,
                s.cum_reward.mean,
                s.cum_reward.std,
                s.cum_lost.mean,
                s.cum_lost.std,
                s.energy.mean,
                s.energy.std,
                s.sfc_mean
            )?;
        }
        Ok(())
    }

    /// One row per run followed by a `mean` row.
    pub fn write_summary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{SUMMARY_HEADER}")?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.runs {
            let s = &r.summary;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.run,
                r.seed,
                s.total_packets,
                s.total_lost,
                s.total_reward,
                s.mean_reward,
                s.mean_energy,
                s.sfc_uptime,
                opt(s.first_complete_step.map(|x| x.to_string()))
            )?;
        }
        let (m, first) = self.mean_summary();
        writeln!(
            out,
            "mean,,{},{},{},{},{},{},{}",
            m.total_packets,
            m.total_lost,
            m.total_reward,
            m.mean_reward,
            m.mean_energy,
            m.sfc_uptime,
            opt(first.map(|x| x.to_string()))
        )
    }
}

/// Runs one episode per seed, in parallel, and returns the runs in seed
/// order. `make_env` must produce a fresh environment in evaluation mode.
pub fn evaluate_policy<FE, FP>(make_env: FE, make_policy: FP, seeds: &[u64]) -> Result<EvalReport>
where
    FE: Fn() -> Result<SfcEnv> + Sync,
    FP: Fn() -> Result<Box<dyn SfcPolicy>> + Sync,
{
    if seeds.is_empty() {
        return Err(AgentError::Config("evaluation needs at least one run".into()));
    }
    let name = make_policy()?.name().to_string();
    let runs = seeds
        .par_iter()
        .enumerate()
        .map(|(run, &seed)| {
            let mut env = make_env()?;
            let mut policy = make_policy()?;
            let records = run_episode(&mut env, policy.as_mut(), seed)?;
            let summary = RunSummary::from_records(&records);
            Ok(RunResult { run, seed, records, summary })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { policy: name, runs })
}

/// Resets `env` with `seed` and plays `policy` until the episode ends.
pub fn run_episode(env: &mut SfcEnv, policy: &mut dyn SfcPolicy, seed: u64) -> Result<Vec<StepRecord>> {
    env.reset(seed)?;
    policy.reset(sfc_core::seed::derive_seed(seed, "policy", 0));
    let mut obs = env.observation_vector()?;
    let mut records = Vec::with_capacity(env.episode_len());
    loop {
        let action = policy.act(env, &obs)?;
        let res = env.step(&action)?;
        records.push(res.record);
        if res.done {
            return Ok(records);
        }
        obs = res.observation.to_vector(env.normalization());
    }
}
