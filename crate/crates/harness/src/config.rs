//! Experiment configuration: one TOML document with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sfc_agent::PpoConfig;
use sfc_core::clustering::KMeansConfig;
use sfc_core::env::EnvConfig;
use sfc_core::seed::derive_seed;
use sfc_core::sim::{EnergyModel, FailureModel, Topology};
use sfc_core::trace::{DiurnalProfile, MILAN_ORIGIN_MS};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Every random stream is derived from this value.
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub trace: TraceConfig,
    pub cluster: ClusterConfig,
    pub topology: Topology,
    pub failure: FailureModel,
    pub energy: EnergyModel,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            out_dir: PathBuf::from("out"),
            trace: TraceConfig::default(),
            cluster: ClusterConfig::default(),
            topology: Topology::default(),
            failure: FailureModel::default(),
            energy: EnergyModel::default(),
            env: EnvConfig::default(),
            ppo: PpoConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    Synthetic,
    /// Raw tab-separated CDR files, aggregated into steps.
    Cdr,
    /// A stepped trace previously written by `generate-trace`.
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    pub source: TraceSource,
    pub split_fraction: f64,
    /// Synthetic trace shape.
    pub n_cells: usize,
    pub n_steps: usize,
    pub profile: DiurnalProfile,
    pub cdr_files: Vec<PathBuf>,
    /// Start of the CDR horizon, epoch milliseconds.
    pub cdr_start_ms: i64,
    pub cdr_days: i64,
    pub csv_path: Option<PathBuf>,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            source: TraceSource::Synthetic,
            split_fraction: 0.9,
            n_cells: 276,
            n_steps: 8928,
            profile: DiurnalProfile::default(),
            cdr_files: Vec::new(),
            cdr_start_ms: MILAN_ORIGIN_MS,
            cdr_days: 62,
            csv_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k_min: usize,
    pub k_max: usize,
    /// Cluster count of the saved model.
    pub k: usize,
    pub utc_offset_hours: f64,
    pub kmeans: KMeansConfig,
    /// Cells the environment serves. Takes precedence over a cluster model.
    pub cells: Option<Vec<u32>>,
    /// A model written by `cluster`, plus the cluster to serve.
    pub model_path: Option<PathBuf>,
    pub cluster_index: Option<usize>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k_min: 1,
            k_max: 50,
            k: 12,
            utc_offset_hours: 1.0,
            kmeans: KMeansConfig::default(),
            cells: None,
            model_path: None,
            cluster_index: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_runs: usize,
    /// Runs used under `--quick`.
    pub quick_runs: usize,
    /// Act on the most likely action of each head rather than sampling.
    pub greedy: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_runs: 100,
            quick_runs: 10,
            greedy: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration always serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        let cfg = Self::from_toml_str(&text).map_err(|source| HarnessError::ConfigParse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.topology.validate()?;
        self.failure.validate()?;
        self.energy.validate()?;
        self.env.validate()?;
        self.ppo.validate()?;
        let t = &self.trace;
        if !(t.split_fraction > 0.0 && t.split_fraction < 1.0) {
            return bad(format!("trace.split_fraction {} is not in (0, 1)", t.split_fraction));
        }
        if t.source == TraceSource::Synthetic && t.profile.step_duration_s != self.env.step_duration_s {
            return bad(format!(
                "trace.profile.step_duration_s ({}) differs from env.step_duration_s ({})",
                t.profile.step_duration_s, self.env.step_duration_s
            ));
        }
        match t.source {
            TraceSource::Synthetic if t.n_cells == 0 || t.n_steps < 2 => {
                return bad("synthetic trace needs n_cells >= 1 and n_steps >= 2".into())
            }
            TraceSource::Cdr if t.cdr_files.is_empty() => {
                return bad("trace.source = \"cdr\" needs trace.cdr_files; set source = \"synthetic\" to run without the dataset".into())
            }
            TraceSource::Cdr if t.cdr_days < 1 => return bad("trace.cdr_days must be positive".into()),
            TraceSource::Csv if t.csv_path.is_none() => {
                return bad("trace.source = \"csv\" needs trace.csv_path".into())
            }
            _ => {}
        }
        let c = &self.cluster;
        if c.k_min == 0 || c.k_min > c.k_max || c.k == 0 {
            return bad(format!("cluster k range {}..={} (k = {}) is invalid", c.k_min, c.k_max, c.k));
        }
        if c.model_path.is_some() != c.cluster_index.is_some() && c.cells.is_none() {
            return bad("cluster.model_path and cluster.cluster_index must be given together".into());
        }
        if self.eval.n_runs == 0 || self.eval.quick_runs == 0 {
            return bad("eval run counts must be at least 1".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialisation, hex encoded. The output
    /// directory is not part of an experiment's identity and is left out.
    pub fn hash(&self) -> String {
        let canonical = Self { out_dir: PathBuf::new(), ..self.clone() };
        let digest = Sha256::digest(canonical.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `sub_seed = derive_seed(master_seed, component, index)`.
    pub fn sub_seed(&self, component: &str, index: u64) -> u64 {
        derive_seed(self.master_seed, component, index)
    }

    /// Comment lines that head every output file.
    pub fn header_lines(&self) -> Vec<String> {
        vec![format!("config_hash={} master_seed={}", self.hash(), self.master_seed)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml_string(), text);
    }

    #[test]
    fn round_trip_with_optional_fields() {
        let mut cfg = ExperimentConfig::default();
        cfg.env.episode_length = Some(256);
        cfg.cluster.cells = Some(vec![3, 1, 2]);
        cfg.trace.source = TraceSource::Csv;
        cfg.trace.csv_path = Some("t.csv".into());
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = ExperimentConfig::from_toml_str("master_seed = 5\n[ppo]\ntotal_steps = 10\n").unwrap();
        assert_eq!(cfg.master_seed, 5);
        assert_eq!(cfg.ppo.total_steps, 10);
        assert_eq!(cfg.ppo.gamma, 0.99);
        assert_eq!(cfg.eval.n_runs, 100);
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.env.w_e = 0.02;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let moved = ExperimentConfig { out_dir: "elsewhere".into(), ..a.clone() };
        assert_eq!(moved.hash(), a.hash());
    }

    #[test]
    fn invalid_sections_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.trace.source = TraceSource::Cdr;
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
        let mut cfg = ExperimentConfig::default();
        cfg.trace.split_fraction = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.ppo.gamma = 2.0;
        assert!(cfg.validate().is_err());
    }
}
