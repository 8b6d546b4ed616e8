//! The four commands, as library functions.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sfc_agent::baselines::{baseline_by_name, PpoPolicy, SfcPolicy, BASELINES};
use sfc_agent::checkpoint::Checkpoint;
use sfc_agent::eval::{evaluate_policy, EvalReport};
use sfc_agent::train::{train_with, write_episode_log, write_train_log, EpisodeStats, TrainObserver, UpdateStats};
use sfc_agent::PolicyNet;
use sfc_core::clustering::{
    compute_period_profiles, elbow_scan, kmeans_fit, select_cells, suggest_elbow, write_elbow_csv, ClusterModel,
};
use sfc_core::env::{write_step_row, EnvConfig, Environment, ObsNormalization, SfcEnv, StepRecord, STEP_TRACE_HEADER};
use sfc_core::trace::{aggregate_steps, generate_synthetic_trace, load_cdr_file, split_train_test, Horizon, SteppedTrace, TraceSplit};

use crate::config::{ExperimentConfig, TraceSource};
use crate::error::{HarnessError, Result};

pub const TRACE_FILE: &str = "trace.csv";
pub const ELBOW_FILE: &str = "elbow.csv";
pub const CLUSTER_MAP_FILE: &str = "cluster_map.csv";
pub const CLUSTER_MODEL_FILE: &str = "cluster_model.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TRAIN_EPISODES_FILE: &str = "train_episodes.csv";
pub const TRAIN_STEPS_FILE: &str = "train_steps.csv";
pub const CONFIG_COPY_FILE: &str = "config.toml";

/// The full trace described by the configuration, before cell selection.
pub fn load_trace(cfg: &ExperimentConfig) -> Result<SteppedTrace> {
    let t = &cfg.trace;
    match t.source {
        TraceSource::Synthetic => {
            Ok(generate_synthetic_trace(t.n_cells, t.n_steps, cfg.sub_seed("trace", 0), &t.profile)?)
        }
        TraceSource::Csv => {
            let path = t.csv_path.as_ref().ok_or_else(|| HarnessError::Config("trace.csv_path missing".into()))?;
            Ok(SteppedTrace::load_csv(path)?)
        }
        TraceSource::Cdr => {
            if t.cdr_files.is_empty() {
                return Err(HarnessError::Config(
                    "no CDR files configured; point trace.cdr_files at the dataset or use source = \"synthetic\"".into(),
                ));
            }
            let mut records = Vec::new();
            for path in &t.cdr_files {
                if !path.exists() {
                    return Err(HarnessError::Config(format!(
                        "CDR file {} not found; download the dataset or switch trace.source to \"synthetic\"",
                        path.display()
                    )));
                }
                records.extend(load_cdr_file(path, None)?.records);
            }
            let cells: Vec<u32> = records.iter().map(|r| r.cell_id).collect::<BTreeSet<_>>().into_iter().collect();
            let horizon = Horizon::days(t.cdr_start_ms, t.cdr_days);
            Ok(aggregate_steps(&records, &cells, cfg.env.step_duration_s, horizon)?.trace)
        }
    }
}

/// Cells the environment serves: an explicit list, a cluster of a saved
/// model, or every cell of the trace.
pub fn served_cells(cfg: &ExperimentConfig, trace: &SteppedTrace) -> Result<Vec<u32>> {
    let c = &cfg.cluster;
    if let Some(cells) = &c.cells {
        let mut cells = cells.clone();
        cells.sort_unstable();
        cells.dedup();
        return Ok(cells);
    }
    match (&c.model_path, c.cluster_index) {
        (Some(path), Some(idx)) => {
            let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
            let model: ClusterModel = serde_json::from_str(&text)
                .map_err(|e| HarnessError::Config(format!("cluster model {}: {e}", path.display())))?;
            let cells = select_cells(&model, idx)?;
            if cells.is_empty() {
                return Err(HarnessError::Config(format!("cluster {idx} of {} is empty", path.display())));
            }
            Ok(cells)
        }
        _ => Ok(trace.cell_ids().to_vec()),
    }
}

/// Trace split and environment factory for one experiment.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ExperimentConfig,
    pub split: TraceSplit,
    train: Arc<SteppedTrace>,
    test: Arc<SteppedTrace>,
    pub normalization: Option<ObsNormalization>,
}

impl Scenario {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let full = load_trace(cfg)?;
        let cells = served_cells(cfg, &full)?;
        let trace = full.select_cells(&cells)?;
        Self::from_trace(cfg, &trace)
    }

    pub fn from_trace(cfg: &ExperimentConfig, trace: &SteppedTrace) -> Result<Self> {
        let split = split_train_test(trace, cfg.trace.split_fraction)?;
        let train = Arc::new(split.train.clone());
        let test = Arc::new(split.test.clone());
        let normalization = cfg
            .env
            .normalize_obs
            .then(|| ObsNormalization::from_trace(&train, &cfg.topology));
        Ok(Self { config: cfg.clone(), split, train, test, normalization })
    }

    pub fn train_env(&self) -> Result<SfcEnv> {
        let c = &self.config;
        let mut env = SfcEnv::new(self.train.clone(), c.topology, c.failure, c.energy, c.env)?;
        env.set_normalization(self.normalization);
        Ok(env)
    }

    /// Whole test split from its first step, scaled like the training data.
    pub fn test_env(&self) -> Result<SfcEnv> {
        self.test_env_with(self.normalization)
    }

    fn test_env_with(&self, norm: Option<ObsNormalization>) -> Result<SfcEnv> {
        let c = &self.config;
        let env_cfg = EnvConfig { eval_mode: true, random_start: false, episode_length: None, ..c.env };
        let mut env = SfcEnv::new(self.test.clone(), c.topology, c.failure, c.energy, env_cfg)?;
        env.set_normalization(norm);
        Ok(env)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(HarnessError::io(path))?))
}

/// Writes a CSV with the configuration header comment, then `body`.
pub fn write_with_header<F>(cfg: &ExperimentConfig, path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut out = create(path)?;
    let io = HarnessError::io(path);
    let res = (|| {
        for line in cfg.header_lines() {
            writeln!(out, "# {line}")?;
        }
        body(&mut out)?;
        out.flush()
    })();
    res.map_err(io)
}

fn save_config(cfg: &ExperimentConfig) -> Result<()> {
    let path = cfg.out_dir.join(CONFIG_COPY_FILE);
    let text = format!("# config_hash={}\n{}", cfg.hash(), cfg.to_toml_string());
    create(&path)?;
    std::fs::write(&path, text).map_err(HarnessError::io(&path))
}

pub fn cmd_generate_trace(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    if cfg.trace.source != TraceSource::Synthetic {
        return Err(HarnessError::Config("generate-trace needs trace.source = \"synthetic\"".into()));
    }
    let trace = load_trace(cfg)?;
    let path = cfg.out_dir.join(TRACE_FILE);
    let out = create(&path)?;
    trace.write_csv(out, &cfg.header_lines()).map_err(HarnessError::io(&path))?;
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct ClusterOutput {
    pub elbow: Vec<(usize, f64)>,
    pub suggested_k: Option<usize>,
    pub model: ClusterModel,
}

pub fn cmd_cluster(cfg: &ExperimentConfig) -> Result<ClusterOutput> {
    cfg.validate()?;
    let trace = load_trace(cfg)?;
    let c = &cfg.cluster;
    let profiles = compute_period_profiles(&trace, c.utc_offset_hours)?;
    if c.k_max > profiles.len() || c.k > profiles.len() {
        return Err(HarnessError::Config(format!(
            "cluster k range reaches {} but the trace has only {} cells",
            c.k_max.max(c.k),
            profiles.len()
        )));
    }
    let seed = cfg.sub_seed("kmeans", 0);
    let elbow = elbow_scan(&profiles, c.k_min..=c.k_max, seed, &c.kmeans)?;
    let model = kmeans_fit(&profiles, c.k, seed, &c.kmeans)?;
    write_with_header(cfg, &cfg.out_dir.join(ELBOW_FILE), |w| write_elbow_csv(w, &elbow))?;
    write_with_header(cfg, &cfg.out_dir.join(CLUSTER_MAP_FILE), |w| model.write_map_csv(w))?;
    let json = serde_json::to_string_pretty(&model).expect("model serialises");
    let model_path = cfg.out_dir.join(CLUSTER_MODEL_FILE);
    std::fs::write(&model_path, json).map_err(HarnessError::io(&model_path))?;
    Ok(ClusterOutput { suggested_k: suggest_elbow(&elbow), elbow, model })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub net: PolicyNet,
    pub updates: Vec<UpdateStats>,
    pub episodes: Vec<EpisodeStats>,
    pub env_steps: usize,
}

struct Recorder<'a> {
    steps: BufWriter<File>,
    io_error: Option<std::io::Error>,
    progress: Option<&'a mut dyn FnMut(&UpdateStats)>,
}

impl TrainObserver<StepRecord> for Recorder<'_> {
    fn on_step(&mut self, env_index: usize, tr: &sfc_core::env::Transition<StepRecord>) {
        // only the first environment's trace is kept
        if env_index != 0 || self.io_error.is_some() {
            return;
        }
        if let Err(e) = write_step_row(&mut self.steps, &tr.info) {
            self.io_error = Some(e);
        }
    }

    fn on_update(&mut self, stats: &UpdateStats) {
        if let Some(p) = self.progress.as_mut() {
            p(stats);
        }
    }
}

/// Trains on the training split and writes the checkpoint, the update log,
/// the episode log and the first environment's step trace.
pub fn cmd_train(cfg: &ExperimentConfig, progress: Option<&mut dyn FnMut(&UpdateStats)>) -> Result<TrainSummary> {
    let scenario = Scenario::build(cfg)?;
    train_scenario(&scenario, progress)
}

pub fn train_scenario(
    scenario: &Scenario,
    progress: Option<&mut dyn FnMut(&UpdateStats)>,
) -> Result<TrainSummary> {
    let cfg = &scenario.config;
    save_config(cfg)?;
    let ppo = sfc_agent::PpoConfig { seed: cfg.sub_seed("train", 0), ..cfg.ppo.clone() };

    let steps_path = cfg.out_dir.join(TRAIN_STEPS_FILE);
    let mut steps_out = create(&steps_path)?;
    for line in cfg.header_lines() {
        writeln!(steps_out, "# {line}").map_err(HarnessError::io(&steps_path))?;
    }
    writeln!(steps_out, "{STEP_TRACE_HEADER}").map_err(HarnessError::io(&steps_path))?;
    let mut rec = Recorder { steps: steps_out, io_error: None, progress };
    let out = train_with(|_| scenario.train_env().map_err(to_agent), &ppo, &mut rec)?;
    if let Some(e) = rec.io_error.take() {
        return Err(HarnessError::Io { path: steps_path, source: e });
    }
    rec.steps.flush().map_err(HarnessError::io(&steps_path))?;

    write_with_header(cfg, &cfg.out_dir.join(TRAIN_LOG_FILE), |w| write_train_log(w, &out.updates))?;
    write_with_header(cfg, &cfg.out_dir.join(TRAIN_EPISODES_FILE), |w| write_episode_log(w, &out.episodes))?;
    let checkpoint = cfg.out_dir.join(CHECKPOINT_FILE);
    Checkpoint::new(&out.net, cfg.hash(), ppo.seed, scenario.normalization).save(&checkpoint)?;
    Ok(TrainSummary {
        checkpoint,
        net: out.net,
        updates: out.updates,
        episodes: out.episodes,
        env_steps: out.env_steps,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalTarget {
    Checkpoint(PathBuf),
    Baseline(String),
}

/// Seed of evaluation run `run`; independent of the number of runs.
pub fn eval_seed(cfg: &ExperimentConfig, run: usize) -> u64 {
    cfg.sub_seed("eval", run as u64)
}

/// Output file names for an evaluation of `label`.
pub fn eval_files(label: &str) -> (String, String) {
    (format!("eval_{label}_steps.csv"), format!("eval_{label}_summary.csv"))
}

/// Runs `n_runs` seeded test-split episodes and writes the per-step and
/// summary CSVs.
pub fn cmd_eval(cfg: &ExperimentConfig, target: &EvalTarget, n_runs: usize) -> Result<EvalReport> {
    let scenario = Scenario::build(cfg)?;
    eval_scenario(&scenario, target, n_runs)
}

pub fn eval_scenario(scenario: &Scenario, target: &EvalTarget, n_runs: usize) -> Result<EvalReport> {
    let cfg = &scenario.config;
    if n_runs == 0 {
        return Err(HarnessError::Config("evaluation needs at least one run".into()));
    }
    let seeds: Vec<u64> = (0..n_runs).map(|r| eval_seed(cfg, r)).collect();
    let (report, label) = match target {
        EvalTarget::Checkpoint(path) => {
            let ck = Checkpoint::load(path)?;
            let probe = scenario.train_env()?;
            ck.check_compatible(probe.observation_len(), &probe.action_heads())?;
            let net = ck.to_net()?;
            let greedy = cfg.eval.greedy;
            let norm = if cfg.env.normalize_obs { ck.normalization } else { None };
            let report = evaluate_policy(
                || scenario.test_env_with(norm).map_err(to_agent),
                || {
                    let p = if greedy { PpoPolicy::greedy(net.clone()) } else { PpoPolicy::stochastic(net.clone()) };
                    Ok(Box::new(p) as Box<dyn SfcPolicy>)
                },
                &seeds,
            )?;
            (report, "ppo".to_string())
        }
        EvalTarget::Baseline(name) => {
            if baseline_by_name(name, 0).is_none() {
                return Err(HarnessError::Config(format!(
                    "unknown baseline {name:?}; expected one of {}",
                    BASELINES.join(", ")
                )));
            }
            let report = evaluate_policy(
                || scenario.test_env().map_err(to_agent),
                || Ok(baseline_by_name(name, 0).expect("checked above")),
                &seeds,
            )?;
            (report, name.clone())
        }
    };
    let (steps, summary) = eval_files(&label);
    write_with_header(cfg, &cfg.out_dir.join(steps), |w| report.write_step_stats(w))?;
    write_with_header(cfg, &cfg.out_dir.join(summary), |w| report.write_summary(w))?;
    Ok(report)
}

fn to_agent(e: HarnessError) -> sfc_agent::AgentError {
    match e {
        HarnessError::Agent(a) => a,
        HarnessError::Core(c) => c.into(),
        other => sfc_agent::AgentError::Config(other.to_string()),
    }
}
