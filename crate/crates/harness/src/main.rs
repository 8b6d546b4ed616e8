use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sfc_harness::config::ExperimentConfig;
use sfc_harness::pipeline::{
    cmd_cluster, cmd_eval, cmd_generate_trace, cmd_train, EvalTarget, CHECKPOINT_FILE,
};
use sfc_harness::{HarnessError, Result};

#[derive(Parser, Debug)]
#[command(name = "sfc-rl", version, about = "SFC allocation experiments: traces, clustering, PPO training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Short profile: fewer evaluation runs.
    #[arg(long)]
    quick: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Elbow scan and K-means model of the trace's day-period profiles.
    Cluster(Common),
    /// Write the configured synthetic trace as CSV.
    GenerateTrace(Common),
    /// Train a PPO agent on the training split.
    Train(Common),
    /// Evaluate a checkpoint or a baseline on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (default: <out>/checkpoint.json).
        #[arg(long, conflicts_with = "baseline")]
        checkpoint: Option<PathBuf>,
        /// Baseline policy: random, noop or static_greedy.
        #[arg(long)]
        baseline: Option<String>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateTrace(common) => {
            let cfg = load(&common)?;
            let path = cmd_generate_trace(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Cluster(common) => {
            let cfg = load(&common)?;
            let out = cmd_cluster(&cfg)?;
            for (k, sse) in &out.elbow {
                println!("k={k:<3} sse={sse:.6e}");
            }
            if let Some(k) = out.suggested_k {
                println!("suggested elbow: k={k}");
            }
            println!("cluster sizes for k={}: {:?}", out.model.k, out.model.cluster_sizes());
            println!("wrote {}", cfg.out_dir.display());
        }
        Command::Train(common) => {
            let cfg = load(&common)?;
            let total = cfg.ppo.total_steps;
            let mut progress = |u: &sfc_agent::train::UpdateStats| {
                if u.update.is_multiple_of(50) {
                    eprintln!(
                        "update {:>6}  steps {:>9}/{total}  loss {:>9.4}  entropy {:.3}  kl {:.4}",
                        u.update, u.env_steps, u.loss.loss, u.loss.entropy, u.loss.approx_kl
                    );
                }
            };
            let summary = cmd_train(&cfg, Some(&mut progress))?;
            println!(
                "trained {} steps in {} updates; checkpoint {}",
                summary.env_steps,
                summary.updates.len(),
                summary.checkpoint.display()
            );
        }
        Command::Eval { common, checkpoint, baseline } => {
            let cfg = load(&common)?;
            let target = match (baseline, checkpoint) {
                (Some(name), _) => EvalTarget::Baseline(name),
                (None, Some(path)) => EvalTarget::Checkpoint(path),
                (None, None) => EvalTarget::Checkpoint(cfg.out_dir.join(CHECKPOINT_FILE)),
            };
            let n_runs = if common.quick { cfg.eval.quick_runs } else { cfg.eval.n_runs };
            let report = cmd_eval(&cfg, &target, n_runs)?;
            let (m, first) = report.mean_summary();
            println!("policy {} over {n_runs} runs", report.policy);
            println!("  total lost packets  {:.3}", m.total_lost);
            println!("  mean reward         {:.4}", m.mean_reward);
            println!("  mean energy (W)     {:.3}", m.mean_energy);
            println!("  SFC uptime          {:.4}", m.sfc_uptime);
            match first {
                Some(s) => println!("  first complete step {s:.1}"),
                None => println!("  first complete step never"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(HarnessError::exit_code(&e) as u8)
        }
    }
}
