//! Discrete-event model of data centers, servers and VNF instances.
//!
//! Servers and VNF instances alternate between up and down. Time to failure
//! and time to repair are exponential with the configured means. Every entity
//! draws from its own random stream derived from the model seed and the
//! entity's identity, so allocating or deleting one VNF never shifts another
//! entity's failure times.
//!
//! When a server fails, the pending events of its VNFs are suspended and
//! resumed with their remaining time once the server is repaired; the VNFs
//! come back in the state they were in.
//!
//! Simulation time is in hours.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ActionKind, ActionTuple};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VnfType {
    Sgw,
    Pgw,
    Mme,
    Hss,
}

impl VnfType {
    pub const COUNT: usize = 4;
    pub const ALL: [VnfType; 4] = [VnfType::Sgw, VnfType::Pgw, VnfType::Mme, VnfType::Hss];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            VnfType::Sgw => "SGW",
            VnfType::Pgw => "PGW",
            VnfType::Mme => "MME",
            VnfType::Hss => "HSS",
        }
    }
}

impl fmt::Display for VnfType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Topology {
    pub n_dcs: usize,
    pub servers_per_dc: usize,
    /// Total VNF instances a server can host.
    pub max_vnfs_per_server: usize,
    /// Instances of one type a server can host.
    pub max_same_type_per_server: usize,
}

impl Default for Topology {
    fn default() -> Self {
        Self {
            n_dcs: 10,
            servers_per_dc: 5,
            max_vnfs_per_server: 5,
            max_same_type_per_server: 2,
        }
    }
}

impl Topology {
    pub fn validate(&self) -> Result<()> {
        if self.n_dcs == 0
            || self.servers_per_dc == 0
            || self.max_vnfs_per_server == 0
            || self.max_same_type_per_server == 0
        {
            return Err(Error::Config("topology counts must be at least 1".into()));
        }
        if self.max_same_type_per_server > self.max_vnfs_per_server {
            return Err(Error::Config(
                "per-type cap exceeds the per-server VNF cap".into(),
            ));
        }
        Ok(())
    }

    pub fn n_servers(&self) -> usize {
        self.n_dcs * self.servers_per_dc
    }

    pub fn server_index(&self, dc: usize, server: usize) -> usize {
        dc * self.servers_per_dc + server
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FailureModel {
    pub mttf_server: f64,
    pub mttr_server: f64,
    pub mttf_vnf: f64,
    pub mttr_vnf: f64,
    pub rng_seed: u64,
}

impl Default for FailureModel {
    fn default() -> Self {
        Self {
            mttf_server: 8760.0,
            mttr_server: 1.667,
            mttf_vnf: 24.0,
            mttr_vnf: 0.033,
            rng_seed: 0,
        }
    }
}

impl FailureModel {
    pub fn validate(&self) -> Result<()> {
        let means = [self.mttf_server, self.mttr_server, self.mttf_vnf, self.mttr_vnf];
        if means.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return Err(Error::Config("MTTF/MTTR means must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyModel {
    pub cpu_watts: f64,
    pub mem_watts: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            cpu_watts: 40.0,
            mem_watts: 30.72,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.cpu_watts >= 0.0 && self.mem_watts >= 0.0) {
            return Err(Error::Config("energy coefficients must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Uniform draw from the open interval (0, 1).
fn open_unit<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Inverse CDF of the exponential distribution: `-mean * ln(u)`.
pub fn exponential_from_uniform(u: f64, mean: f64) -> f64 {
    -mean * u.ln()
}

/// Exponential sample with the given mean; always strictly positive.
pub fn sample_exponential<R: RngCore + ?Sized>(rng: &mut R, mean: f64) -> f64 {
    exponential_from_uniform(open_unit(rng), mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    ServerFail,
    ServerRepair,
    VnfFail,
    VnfRepair,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::ServerFail => "server_fail",
            EventKind::ServerRepair => "server_repair",
            EventKind::VnfFail => "vnf_fail",
            EventKind::VnfRepair => "vnf_repair",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
    pub dc: usize,
    pub server: usize,
    /// `Some` for VNF events.
    pub instance: Option<(u64, VnfType)>,
}

pub fn write_event_log<W: Write>(mut out: W, events: &[SimEvent]) -> std::io::Result<()> {
    writeln!(out, "time_hours,kind,dc,server,instance_id,vnf_type")?;
    for e in events {
        let (id, ty) = match e.instance {
            Some((id, ty)) => (id.to_string(), ty.name().to_string()),
            None => (String::new(), String::new()),
        };
        writeln!(out, "{},{},{},{},{id},{ty}", e.time, e.kind.name(), e.dc, e.server)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pending {
    time: f64,
    seq: u64,
}

#[derive(Debug, Clone)]
struct QueueEntry {
    time: f64,
    seq: u64,
    server: usize,
    instance_id: Option<u64>,
}

impl PartialEq for QueueEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for QueueEntry {}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QueueEntry {
    // reversed: BinaryHeap is a max-heap and we want the earliest (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone)]
pub struct VnfInstance {
    pub instance_id: u64,
    pub vnf_type: VnfType,
    pub up: bool,
    pub created_at: f64,
    pub cpu_units: u32,
    pub mem_units: u32,
    // creation/restart time, pushed forward by host downtime
    risk_origin: f64,
    pending: Option<Pending>,
    // remaining time of the pending event while the host is down
    suspended: Option<f64>,
    rng: ChaCha8Rng,
}

impl VnfInstance {
    pub fn scheduled_failure_at(&self) -> Option<f64> {
        self.pending.filter(|_| self.up).map(|p| p.time)
    }

    pub fn scheduled_repair_at(&self) -> Option<f64> {
        self.pending.filter(|_| !self.up).map(|p| p.time)
    }

    /// Start of the current risk window (creation or last restart), shifted
    /// by any time the host spent down since.
    pub fn risk_origin(&self) -> f64 {
        self.risk_origin
    }

    pub fn is_suspended(&self) -> bool {
        self.suspended.is_some()
    }
}

/// Age-based failure risk `1 - exp(-age / mttf)` used to pick which instance
/// a delete or restart acts on.
pub fn vnf_fail_risk(instance: &VnfInstance, now: f64, mttf_vnf: f64) -> f64 {
    let age = (now - instance.risk_origin).max(0.0);
    1.0 - (-age / mttf_vnf).exp()
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub dc_id: usize,
    pub server_id: usize,
    pub up: bool,
    pub vnfs: Vec<VnfInstance>,
    pending: Pending,
    down_since: Option<f64>,
    rng: ChaCha8Rng,
}

impl ServerState {
    pub fn next_event_time(&self) -> f64 {
        self.pending.time
    }

    pub fn count_of(&self, ty: VnfType) -> usize {
        self.vnfs.iter().filter(|v| v.vnf_type == ty).count()
    }

    /// The clock a hosted VNF's age is measured against.
    fn vnf_clock(&self, now: f64) -> f64 {
        self.down_since.unwrap_or(now)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    ServerDown,
    ServerFull,
    TypeLimit,
    NoInstance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionOutcome {
    pub kind: ActionKind,
    pub accepted: bool,
    pub rejection: Option<Rejection>,
    /// Instance created, deleted or restarted.
    pub instance_id: Option<u64>,
}

impl ActionOutcome {
    fn accepted(kind: ActionKind, instance_id: Option<u64>) -> Self {
        Self {
            kind,
            accepted: true,
            rejection: None,
            instance_id,
        }
    }

    fn rejected(kind: ActionKind, why: Rejection) -> Self {
        Self {
            kind,
            accepted: false,
            rejection: Some(why),
            instance_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub per_dc_watts: Vec<f64>,
    pub total_watts: f64,
}

#[derive(Debug, Clone)]
pub struct SimState {
    topology: Topology,
    failure: FailureModel,
    now: f64,
    servers: Vec<ServerState>,
    queue: BinaryHeap<QueueEntry>,
    next_seq: u64,
    next_instance_id: u64,
}

impl SimState {
    /// All servers up, no VNFs, one failure scheduled per server.
    pub fn init_topology(topology: Topology, failure: FailureModel, t0: f64) -> Result<Self> {
        topology.validate()?;
        failure.validate()?;
        let mut state = SimState {
            topology,
            failure,
            now: t0,
            servers: Vec::with_capacity(topology.n_servers()),
            queue: BinaryHeap::new(),
            next_seq: 0,
            next_instance_id: 0,
        };
        for dc in 0..topology.n_dcs {
            for s in 0..topology.servers_per_dc {
                let idx = topology.server_index(dc, s);
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(failure.rng_seed, "server", idx as u64));
                let dt = sample_exponential(&mut rng, failure.mttf_server);
                let seq = state.push(t0 + dt, idx, None);
                state.servers.push(ServerState {
                    dc_id: dc,
                    server_id: s,
                    up: true,
                    vnfs: Vec::new(),
                    pending: Pending { time: t0 + dt, seq },
                    down_since: None,
                    rng,
                });
            }
        }
        Ok(state)
    }

    fn push(&mut self, time: f64, server: usize, instance_id: Option<u64>) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(QueueEntry {
            time,
            seq,
            server,
            instance_id,
        });
        seq
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn failure_model(&self) -> &FailureModel {
        &self.failure
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn servers(&self) -> &[ServerState] {
        &self.servers
    }

    pub fn server(&self, dc: usize, server: usize) -> &ServerState {
        &self.servers[self.topology.server_index(dc, server)]
    }

    /// Time of the earliest queued event, possibly a cancelled one.
    pub fn next_event_time(&self) -> Option<f64> {
        self.queue.peek().map(|e| e.time)
    }

    /// Number of live queued events (cancelled entries excluded).
    pub fn pending_events(&self) -> usize {
        self.queue.iter().filter(|e| self.is_live(e)).count()
    }

    fn is_live(&self, e: &QueueEntry) -> bool {
        let server = &self.servers[e.server];
        match e.instance_id {
            None => server.pending.seq == e.seq,
            Some(id) => server
                .vnfs
                .iter()
                .find(|v| v.instance_id == id)
                .and_then(|v| v.pending)
                .is_some_and(|p| p.seq == e.seq),
        }
    }

    /// Processes every event with time ≤ `t` and moves the clock to `t`.
    pub fn advance_to(&mut self, t: f64) -> Result<Vec<SimEvent>> {
        if t < self.now {
            return Err(Error::TimeReversal {
                now: self.now,
                requested: t,
            });
        }
        let mut processed = Vec::new();
        while self.queue.peek().is_some_and(|e| e.time <= t) {
            let entry = self.queue.pop().expect("peeked");
            if !self.is_live(&entry) {
                continue;
            }
            self.now = entry.time;
            processed.push(self.process(entry));
        }
        self.now = t;
        Ok(processed)
    }

    fn process(&mut self, entry: QueueEntry) -> SimEvent {
        let now = entry.time;
        let f = self.failure;
        let si = entry.server;
        let (dc, s) = (self.servers[si].dc_id, self.servers[si].server_id);
        match entry.instance_id {
            None => {
                let server = &mut self.servers[si];
                let kind = if server.up {
                    server.up = false;
                    server.down_since = Some(now);
                    for v in &mut server.vnfs {
                        if let Some(p) = v.pending.take() {
                            v.suspended = Some(p.time - now);
                        }
                    }
                    EventKind::ServerFail
                } else {
                    server.up = true;
                    let downtime = now - server.down_since.take().unwrap_or(now);
                    let mut resumed = Vec::new();
                    for v in &mut server.vnfs {
                        v.risk_origin += downtime;
                        if let Some(rem) = v.suspended.take() {
                            resumed.push((v.instance_id, now + rem));
                        }
                    }
                    for (id, time) in resumed {
                        let seq = self.push(time, si, Some(id));
                        let v = self.servers[si]
                            .vnfs
                            .iter_mut()
                            .find(|v| v.instance_id == id)
                            .expect("resumed instance exists");
                        v.pending = Some(Pending { time, seq });
                    }
                    EventKind::ServerRepair
                };
                let server = &mut self.servers[si];
                let mean = if server.up { f.mttf_server } else { f.mttr_server };
                let time = now + sample_exponential(&mut server.rng, mean);
                let seq = self.push(time, si, None);
                self.servers[si].pending = Pending { time, seq };
                SimEvent {
                    time: now,
                    seq: entry.seq,
                    kind,
                    dc,
                    server: s,
                    instance: None,
                }
            }
            Some(id) => {
                let v = self.servers[si]
                    .vnfs
                    .iter_mut()
                    .find(|v| v.instance_id == id)
                    .expect("live event has an instance");
                v.up = !v.up;
                let (kind, mean) = if v.up {
                    (EventKind::VnfRepair, f.mttf_vnf)
                } else {
                    (EventKind::VnfFail, f.mttr_vnf)
                };
                let ty = v.vnf_type;
                let time = now + sample_exponential(&mut v.rng, mean);
                let seq = self.push(time, si, Some(id));
                let v = self.servers[si]
                    .vnfs
                    .iter_mut()
                    .find(|v| v.instance_id == id)
                    .expect("instance still present");
                v.pending = Some(Pending { time, seq });
                SimEvent {
                    time: now,
                    seq: entry.seq,
                    kind,
                    dc,
                    server: s,
                    instance: Some((id, ty)),
                }
            }
        }
    }

    /// Position of the highest-risk instance of `ty` on server `si`; ties go
    /// to the lowest instance id.
    fn riskiest(&self, si: usize, ty: VnfType) -> Option<usize> {
        let server = &self.servers[si];
        let clock = server.vnf_clock(self.now);
        server
            .vnfs
            .iter()
            .enumerate()
            .filter(|(_, v)| v.vnf_type == ty)
            .min_by(|(_, a), (_, b)| {
                // larger age first, then smaller id
                (clock - b.risk_origin)
                    .total_cmp(&(clock - a.risk_origin))
                    .then(a.instance_id.cmp(&b.instance_id))
            })
            .map(|(i, _)| i)
    }

    /// Failure risk of an allocated instance, with host downtime excluded.
    pub fn fail_risk(&self, dc: usize, server: usize, instance_id: u64) -> Option<f64> {
        let srv = self.server(dc, server);
        srv.vnfs
            .iter()
            .find(|v| v.instance_id == instance_id)
            .map(|v| vnf_fail_risk(v, srv.vnf_clock(self.now), self.failure.mttf_vnf))
    }

    /// Applies one create/delete/restart/no-op. Infeasible actions are
    /// rejected without touching the state.
    pub fn apply_action(&mut self, action: &ActionTuple) -> Result<ActionOutcome> {
        let kind = action.kind;
        if kind == ActionKind::NoOp {
            return Ok(ActionOutcome::accepted(kind, None));
        }
        if action.dc >= self.topology.n_dcs {
            return Err(Error::ActionOutOfRange {
                component: "dc",
                value: action.dc as i64,
                bound: self.topology.n_dcs as i64,
            });
        }
        if action.server >= self.topology.servers_per_dc {
            return Err(Error::ActionOutOfRange {
                component: "server",
                value: action.server as i64,
                bound: self.topology.servers_per_dc as i64,
            });
        }
        let si = self.topology.server_index(action.dc, action.server);
        let ty = action.vnf_type;
        let now = self.now;
        match kind {
            ActionKind::Create => {
                let server = &self.servers[si];
                if !server.up {
                    return Ok(ActionOutcome::rejected(kind, Rejection::ServerDown));
                }
                if server.vnfs.len() >= self.topology.max_vnfs_per_server {
                    return Ok(ActionOutcome::rejected(kind, Rejection::ServerFull));
                }
                if server.count_of(ty) >= self.topology.max_same_type_per_server {
                    return Ok(ActionOutcome::rejected(kind, Rejection::TypeLimit));
                }
                let id = self.next_instance_id;
                self.next_instance_id += 1;
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(self.failure.rng_seed, "vnf", id));
                let time = now + sample_exponential(&mut rng, self.failure.mttf_vnf);
                let seq = self.push(time, si, Some(id));
                self.servers[si].vnfs.push(VnfInstance {
                    instance_id: id,
                    vnf_type: ty,
                    up: true,
                    created_at: now,
                    cpu_units: 1,
                    mem_units: 1,
                    risk_origin: now,
                    pending: Some(Pending { time, seq }),
                    suspended: None,
                    rng,
                });
                Ok(ActionOutcome::accepted(kind, Some(id)))
            }
            ActionKind::Delete => match self.riskiest(si, ty) {
                None => Ok(ActionOutcome::rejected(kind, Rejection::NoInstance)),
                Some(pos) => {
                    // its queued events become stale
                    let v = self.servers[si].vnfs.remove(pos);
                    Ok(ActionOutcome::accepted(kind, Some(v.instance_id)))
                }
            },
            ActionKind::Restart => {
                if !self.servers[si].up {
                    return Ok(ActionOutcome::rejected(kind, Rejection::ServerDown));
                }
                match self.riskiest(si, ty) {
                    None => Ok(ActionOutcome::rejected(kind, Rejection::NoInstance)),
                    Some(pos) => {
                        let mttf = self.failure.mttf_vnf;
                        let v = &mut self.servers[si].vnfs[pos];
                        let id = v.instance_id;
                        v.up = true;
                        v.risk_origin = now;
                        let time = now + sample_exponential(&mut v.rng, mttf);
                        let seq = self.push(time, si, Some(id));
                        self.servers[si].vnfs[pos].pending = Some(Pending { time, seq });
                        Ok(ActionOutcome::accepted(kind, Some(id)))
                    }
                }
            }
            ActionKind::NoOp => unreachable!("handled above"),
        }
    }

    /// Up instances on up servers, per type.
    pub fn operational_counts(&self) -> [usize; VnfType::COUNT] {
        let mut counts = [0; VnfType::COUNT];
        for server in self.servers.iter().filter(|s| s.up) {
            for v in server.vnfs.iter().filter(|v| v.up) {
                counts[v.vnf_type.index()] += 1;
            }
        }
        counts
    }

    /// True iff every VNF type has at least one operational instance.
    pub fn sfc_complete(&self) -> bool {
        self.operational_counts().iter().all(|&c| c > 0)
    }

    /// Allocated instances per (server, type), servers in DC-major order.
    pub fn vnf_counts(&self) -> Vec<u32> {
        let mut out = vec![0u32; self.servers.len() * VnfType::COUNT];
        for (si, server) in self.servers.iter().enumerate() {
            for v in &server.vnfs {
                out[si * VnfType::COUNT + v.vnf_type.index()] += 1;
            }
        }
        out
    }

    pub fn allocated_vnfs(&self) -> usize {
        self.servers.iter().map(|s| s.vnfs.len()).sum()
    }

    /// Power drawn by allocated instances, failed ones included.
    pub fn energy_consumption(&self, model: &EnergyModel) -> EnergyReport {
        let mut per_dc_watts = vec![0.0; self.topology.n_dcs];
        for server in &self.servers {
            for v in &server.vnfs {
                per_dc_watts[server.dc_id] +=
                    f64::from(v.cpu_units) * model.cpu_watts + f64::from(v.mem_units) * model.mem_watts;
            }
        }
        let total_watts = per_dc_watts.iter().sum();
        EnergyReport {
            per_dc_watts,
            total_watts,
        }
    }

    /// Checks the state-machine and capacity invariants, returning the first
    /// violation found.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let mut live = std::collections::HashMap::new();
        for e in self.queue.iter().filter(|e| self.is_live(e)) {
            *live.entry((e.server, e.instance_id)).or_insert(0usize) += 1;
            if e.time < self.now {
                return Err(format!("live event at {} before now {}", e.time, self.now));
            }
        }
        for (si, server) in self.servers.iter().enumerate() {
            if live.get(&(si, None)) != Some(&1) {
                return Err(format!("server {si} lacks exactly one pending event"));
            }
            if server.up == server.down_since.is_some() {
                return Err(format!("server {si} up flag disagrees with down_since"));
            }
            if server.vnfs.len() > self.topology.max_vnfs_per_server {
                return Err(format!("server {si} over capacity"));
            }
            for ty in VnfType::ALL {
                if server.count_of(ty) > self.topology.max_same_type_per_server {
                    return Err(format!("server {si} exceeds per-type cap for {ty}"));
                }
            }
            for v in &server.vnfs {
                let n = live.get(&(si, Some(v.instance_id))).copied().unwrap_or(0);
                let expected = usize::from(server.up);
                if n != expected || v.suspended.is_some() == server.up {
                    return Err(format!(
                        "instance {} has {n} live events (host up = {})",
                        v.instance_id, server.up
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Seeded RNG helper shared by tests and baseline policies.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
