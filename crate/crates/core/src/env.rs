//! Stepped reinforcement-learning environment over the simulator.
//!
//! One step is one trace row (five minutes by default). Each step applies a
//! single [`ActionTuple`], advances the simulator to the end of the step and
//! scores the result:
//!
//! ```text
//! reward = -(1 - sfc) * w_p * packets - w_e * Σ_dc energy_dc - restart_penalty * restart + sfc * f
//! ```
//!
//! where `sfc` is SFC completeness at the end of the step and `packets` is the
//! step's total activity over the managed cells.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::sim::{ActionOutcome, EnergyModel, FailureModel, SimEvent, SimState, Topology, VnfType};
use crate::trace::SteppedTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    Create = 1,
    Delete = 2,
    Restart = 3,
    NoOp = 4,
}

impl ActionKind {
    pub const ALL: [ActionKind; 4] = [
        ActionKind::Create,
        ActionKind::Delete,
        ActionKind::Restart,
        ActionKind::NoOp,
    ];

    /// 1-based wire code.
    pub fn code(self) -> i64 {
        self as i64
    }

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            1 => Some(ActionKind::Create),
            2 => Some(ActionKind::Delete),
            3 => Some(ActionKind::Restart),
            4 => Some(ActionKind::NoOp),
            _ => None,
        }
    }
}

/// `(action type, dc, server, vnf type)`; the last three are ignored for a
/// no-op.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ActionTuple {
    pub kind: ActionKind,
    pub dc: usize,
    pub server: usize,
    pub vnf_type: VnfType,
}

impl ActionTuple {
    pub fn noop() -> Self {
        Self {
            kind: ActionKind::NoOp,
            dc: 0,
            server: 0,
            vnf_type: VnfType::Sgw,
        }
    }

    pub fn create(dc: usize, server: usize, vnf_type: VnfType) -> Self {
        Self {
            kind: ActionKind::Create,
            dc,
            server,
            vnf_type,
        }
    }

    pub fn to_raw(&self) -> [i64; 4] {
        [
            self.kind.code(),
            self.dc as i64,
            self.server as i64,
            self.vnf_type.index() as i64,
        ]
    }

    /// Decodes per-head indices `[type 0..4, dc, server, vnf 0..4]`.
    pub fn from_head_indices(idx: &[usize]) -> Option<Self> {
        match *idx {
            [a, dc, server, ty] => Some(Self {
                kind: *ActionKind::ALL.get(a)?,
                dc,
                server,
                vnf_type: VnfType::from_index(ty)?,
            }),
            _ => None,
        }
    }

    pub fn head_indices(&self) -> [usize; 4] {
        [
            self.kind.code() as usize - 1,
            self.dc,
            self.server,
            self.vnf_type.index(),
        ]
    }
}

impl fmt::Display for ActionTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, dc, s, t] = self.to_raw();
        write!(f, "{{{a},{dc},{s},{t}}}")
    }
}

/// Range-checks a raw 4-integer action against the topology.
pub fn validate_action(raw: [i64; 4], topology: &Topology) -> Result<ActionTuple> {
    let [a, dc, server, ty] = raw;
    let kind = ActionKind::from_code(a).ok_or(Error::ActionType(a))?;
    let check = |component, value: i64, bound: usize| {
        if (0..bound as i64).contains(&value) {
            Ok(value as usize)
        } else {
            Err(Error::ActionOutOfRange {
                component,
                value,
                bound: bound as i64,
            })
        }
    };
    let dc = check("dc", dc, topology.n_dcs)?;
    let server = check("server", server, topology.servers_per_dc)?;
    let ty = check("vnf_type", ty, VnfType::COUNT)?;
    Ok(ActionTuple {
        kind,
        dc,
        server,
        vnf_type: VnfType::from_index(ty).expect("checked"),
    })
}

/// How packets lost to an incomplete SFC are counted within a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossAccounting {
    /// All of the step's packets are lost iff the SFC is incomplete at the end
    /// of the step.
    #[default]
    EndOfStep,
    /// Packets are lost in proportion to the time the SFC was incomplete
    /// during the step.
    Prorated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Completeness bonus.
    pub f: f64,
    pub w_p: f64,
    /// Per-watt energy weight.
    pub w_e: f64,
    pub restart_penalty: f64,
    pub step_duration_s: u32,
    /// Steps per episode; `None` runs the whole trace.
    pub episode_length: Option<usize>,
    /// Evaluation episodes always start at row 0.
    pub eval_mode: bool,
    /// Start training episodes at a random row.
    pub random_start: bool,
    pub normalize_obs: bool,
    pub loss_accounting: LossAccounting,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            f: 100.0,
            w_p: 1.0,
            w_e: 0.01,
            restart_penalty: 1.0,
            step_duration_s: 300,
            episode_length: None,
            eval_mode: false,
            random_start: false,
            normalize_obs: true,
            loss_accounting: LossAccounting::EndOfStep,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.f > 0.0) {
            return Err(Error::Config("f must be positive".into()));
        }
        if !(self.w_p >= 0.0 && self.w_e >= 0.0 && self.restart_penalty >= 0.0) {
            return Err(Error::Config("reward weights must be nonnegative".into()));
        }
        if self.step_duration_s == 0 || self.episode_length == Some(0) {
            return Err(Error::Config("step duration and episode length must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown {
    pub sfc_status: u8,
    pub packets: f64,
    pub lost_packets: f64,
    pub energy_watts: f64,
    pub packet_loss_term: f64,
    pub energy_term: f64,
    pub restart_term: f64,
    pub bonus_term: f64,
    pub total: f64,
}

/// Scores one step. `incomplete_fraction` is only used under prorated
/// accounting.
pub fn compute_reward(
    config: &EnvConfig,
    sfc_complete: bool,
    packets: f64,
    energy_watts: f64,
    restart_accepted: bool,
    incomplete_fraction: f64,
) -> RewardBreakdown {
    let sfc = u8::from(sfc_complete);
    let lost_packets = match config.loss_accounting {
        LossAccounting::EndOfStep => f64::from(1 - sfc) * packets,
        LossAccounting::Prorated => incomplete_fraction.clamp(0.0, 1.0) * packets,
    };
    let packet_loss_term = -lost_packets * config.w_p;
    let energy_term = -config.w_e * energy_watts;
    let restart_term = if restart_accepted { -config.restart_penalty } else { 0.0 };
    let bonus_term = f64::from(sfc) * config.f;
    RewardBreakdown {
        sfc_status: sfc,
        packets,
        lost_packets,
        energy_watts,
        packet_loss_term,
        energy_term,
        restart_term,
        bonus_term,
        total: packet_loss_term + energy_term + restart_term + bonus_term,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub cell_activities: Vec<f64>,
    /// Allocated instances per (server, type), DC-major.
    pub vnf_counts: Vec<u32>,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.cell_activities.len() + self.vnf_counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat feature vector, activities first.
    pub fn to_vector(&self, norm: Option<&ObsNormalization>) -> Vec<f64> {
        let (a, v) = norm.map_or((1.0, 1.0), |n| (n.activity_scale, n.vnf_scale));
        self.cell_activities
            .iter()
            .map(|x| x / a)
            .chain(self.vnf_counts.iter().map(|&c| f64::from(c) / v))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObsNormalization {
    pub activity_scale: f64,
    pub vnf_scale: f64,
}

impl ObsNormalization {
    /// Scales from the largest single cell value of the (training) trace and
    /// the per-server VNF cap.
    pub fn from_trace(trace: &SteppedTrace, topology: &Topology) -> Self {
        let max = trace.max_value();
        Self {
            activity_scale: if max > 0.0 { max } else { 1.0 },
            vnf_scale: topology.max_vnfs_per_server as f64,
        }
    }
}

pub fn encode_observation(state: &SimState, activities: &[f64]) -> Observation {
    Observation {
        cell_activities: activities.to_vec(),
        vnf_counts: state.vnf_counts(),
    }
}

/// One row of the step-trace CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub action: ActionTuple,
    pub accepted: bool,
    pub sfc: u8,
    pub packets: f64,
    pub lost: f64,
    pub energy_w: f64,
    pub reward: f64,
    pub cum_reward: f64,
    pub cum_lost: f64,
}

pub const STEP_TRACE_HEADER: &str =
    "step,a,dc,server,vnf_type,accepted,sfc,packets,lost,energy_w,reward,cum_reward,cum_lost";

pub fn write_step_trace<W: Write>(mut out: W, records: &[StepRecord]) -> std::io::Result<()> {
    writeln!(out, "{STEP_TRACE_HEADER}")?;
    for r in records {
        write_step_row(&mut out, r)?;
    }
    Ok(())
}

/// One step-trace line, without the header.
pub fn write_step_row<W: Write>(mut out: W, r: &StepRecord) -> std::io::Result<()> {
    let [a, dc, s, t] = r.action.to_raw();
    writeln!(
        out,
        "{},{a},{dc},{s},{t},{},{},{},{},{},{},{},{}",
        r.step,
        u8::from(r.accepted),
        r.sfc,
        r.packets,
        r.lost,
        r.energy_w,
        r.reward,
        r.cum_reward,
        r.cum_lost
    )
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub breakdown: RewardBreakdown,
    pub outcome: ActionOutcome,
    pub record: StepRecord,
}

/// Minimal interface a learner needs: flat observations and a factored
/// discrete action given as one index per head.
pub trait Environment {
    type Info;

    fn observation_len(&self) -> usize;

    /// Number of choices of each action component.
    fn action_heads(&self) -> Vec<usize>;

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>>;

    fn step(&mut self, action: &[usize]) -> Result<Transition<Self::Info>>;
}

#[derive(Debug, Clone)]
pub struct Transition<I> {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: I,
}

/// The SFC allocation environment.
#[derive(Debug, Clone)]
pub struct SfcEnv {
    trace: Arc<SteppedTrace>,
    topology: Topology,
    failure: FailureModel,
    energy: EnergyModel,
    config: EnvConfig,
    normalization: Option<ObsNormalization>,
    sim: Option<SimState>,
    start_row: usize,
    episode_len: usize,
    t: usize,
    done: bool,
    cum_reward: f64,
    cum_lost: f64,
    event_log: Option<Vec<SimEvent>>,
}

impl SfcEnv {
    pub fn new(
        trace: Arc<SteppedTrace>,
        topology: Topology,
        failure: FailureModel,
        energy: EnergyModel,
        config: EnvConfig,
    ) -> Result<Self> {
        topology.validate()?;
        failure.validate()?;
        energy.validate()?;
        config.validate()?;
        if trace.n_steps() == 0 {
            return Err(Error::InvalidTrace("environment needs a non-empty trace".into()));
        }
        if trace.step_duration_s() != config.step_duration_s {
            return Err(Error::Config(format!(
                "trace step is {} s but the environment steps {} s",
                trace.step_duration_s(),
                config.step_duration_s
            )));
        }
        let normalization = config
            .normalize_obs
            .then(|| ObsNormalization::from_trace(&trace, &topology));
        Ok(Self {
            trace,
            topology,
            failure,
            energy,
            config,
            normalization,
            sim: None,
            start_row: 0,
            episode_len: 0,
            t: 0,
            done: false,
            cum_reward: 0.0,
            cum_lost: 0.0,
            event_log: None,
        })
    }

    /// Overrides the observation scaling, e.g. with the training split's.
    pub fn set_normalization(&mut self, norm: Option<ObsNormalization>) {
        self.normalization = norm;
    }

    pub fn normalization(&self) -> Option<&ObsNormalization> {
        self.normalization.as_ref()
    }

    /// Keep every simulator event processed from the next reset on.
    pub fn record_events(&mut self, on: bool) {
        self.event_log = on.then(Vec::new);
    }

    pub fn event_log(&self) -> Option<&[SimEvent]> {
        self.event_log.as_deref()
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn energy_model(&self) -> &EnergyModel {
        &self.energy
    }

    pub fn trace(&self) -> &SteppedTrace {
        &self.trace
    }

    pub fn sim(&self) -> Option<&SimState> {
        self.sim.as_ref()
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    pub fn episode_len(&self) -> usize {
        self.episode_len
    }

    pub fn start_row(&self) -> usize {
        self.start_row
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    fn step_hours(&self) -> f64 {
        f64::from(self.config.step_duration_s) / 3600.0
    }

    fn current_row(&self) -> usize {
        self.start_row + self.t.min(self.episode_len.saturating_sub(1))
    }

    pub fn current_activities(&self) -> &[f64] {
        self.trace.row(self.current_row())
    }

    pub fn observation(&self) -> Result<Observation> {
        let sim = self.sim.as_ref().ok_or(Error::NotReset)?;
        Ok(encode_observation(sim, self.current_activities()))
    }

    pub fn observation_vector(&self) -> Result<Vec<f64>> {
        Ok(self.observation()?.to_vector(self.normalization.as_ref()))
    }

    /// Starts a new episode. `seed` drives the failure model and, when random
    /// starts are enabled, the starting row.
    pub fn reset(&mut self, seed: u64) -> Result<Observation> {
        let n = self.trace.n_steps();
        let len = self.config.episode_length.unwrap_or(n).min(n);
        self.start_row = if self.config.random_start && !self.config.eval_mode && len < n {
            ChaCha8Rng::seed_from_u64(derive_seed(seed, "start_row", 0)).random_range(0..=n - len)
        } else {
            0
        };
        self.episode_len = len;
        let failure = FailureModel {
            rng_seed: seed,
            ..self.failure
        };
        self.sim = Some(SimState::init_topology(self.topology, failure, 0.0)?);
        self.t = 0;
        self.done = false;
        self.cum_reward = 0.0;
        self.cum_lost = 0.0;
        if let Some(log) = &mut self.event_log {
            log.clear();
        }
        self.observation()
    }

    pub fn step(&mut self, action: &ActionTuple) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let dt = self.step_hours();
        let target = (self.t + 1) as f64 * dt;
        let packets = self.trace.step_total(self.start_row + self.t);
        let accounting = self.config.loss_accounting;
        let sim = self.sim.as_mut().ok_or(Error::NotReset)?;

        let outcome = sim.apply_action(action)?;
        let mut incomplete = 0.0;
        match accounting {
            LossAccounting::EndOfStep => {
                let events = sim.advance_to(target)?;
                if let Some(log) = &mut self.event_log {
                    log.extend(events);
                }
            }
            LossAccounting::Prorated => {
                let mut last = sim.now();
                let mut complete = sim.sfc_complete();
                loop {
                    let next = sim.next_event_time().filter(|&x| x <= target).unwrap_or(target);
                    let events = sim.advance_to(next)?;
                    if !complete {
                        incomplete += next - last;
                    }
                    last = next;
                    complete = sim.sfc_complete();
                    if let Some(log) = &mut self.event_log {
                        log.extend(events);
                    }
                    if next >= target {
                        break;
                    }
                }
            }
        }

        let sfc = sim.sfc_complete();
        let energy = sim.energy_consumption(&self.energy).total_watts;
        let restart = outcome.accepted && action.kind == ActionKind::Restart;
        let breakdown = compute_reward(&self.config, sfc, packets, energy, restart, incomplete / dt);
        self.cum_reward += breakdown.total;
        self.cum_lost += breakdown.lost_packets;
        let record = StepRecord {
            step: self.t,
            action: *action,
            accepted: outcome.accepted,
            sfc: breakdown.sfc_status,
            packets,
            lost: breakdown.lost_packets,
            energy_w: energy,
            reward: breakdown.total,
            cum_reward: self.cum_reward,
            cum_lost: self.cum_lost,
        };
        self.t += 1;
        self.done = self.t >= self.episode_len;
        Ok(StepResult {
            observation: self.observation()?,
            reward: breakdown.total,
            done: self.done,
            breakdown,
            outcome,
            record,
        })
    }
}

impl Environment for SfcEnv {
    type Info = StepRecord;

    fn observation_len(&self) -> usize {
        self.trace.n_cells() + self.topology.n_servers() * VnfType::COUNT
    }

    fn action_heads(&self) -> Vec<usize> {
        vec![
            ActionKind::ALL.len(),
            self.topology.n_dcs,
            self.topology.servers_per_dc,
            VnfType::COUNT,
        ]
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>> {
        SfcEnv::reset(self, seed)?;
        self.observation_vector()
    }

    fn step(&mut self, action: &[usize]) -> Result<Transition<StepRecord>> {
        let heads = Environment::action_heads(self);
        let raw: Vec<i64> = action.iter().map(|&i| i as i64).collect();
        if action.len() != heads.len() {
            return Err(Error::Config(format!("expected {} action components", heads.len())));
        }
        // head 0 is 0-based over the 1-based action codes
        let tuple = validate_action([raw[0] + 1, raw[1], raw[2], raw[3]], &self.topology)?;
        let res = SfcEnv::step(self, &tuple)?;
        Ok(Transition {
            observation: res.observation.to_vector(self.normalization.as_ref()),
            reward: res.reward,
            done: res.done,
            info: res.record,
        })
    }
}
