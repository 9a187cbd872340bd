use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use trap_lab::defenses::DefenseSpec;
use trap_lab::envs::EnvKind;
use trap_lab::harness::{
    cmd_ablate, cmd_diagnose, cmd_evaluate, cmd_optimize_patch, cmd_sweep, cmd_train,
    ExperimentConfig, SweepAxis,
};
use trap_lab::planner::PlannerKind;

#[derive(Parser)]
#[command(
    name = "trap-lab",
    about = "Trigger-conditioned ranking attacks on world-model planners"
)]
struct Cli {
    /// JSON experiment config; flags below override its fields
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    episodes: Option<usize>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    patch_ratio: Option<f64>,
    /// none | median<k> | gaussian<sigma> | bitdepth<bits> | jpeg<quality>
    #[arg(long, global = true)]
    defense: Option<String>,
    /// imagination | mpc
    #[arg(long, global = true)]
    planner: Option<String>,
    /// grid_goal | push_line
    #[arg(long, global = true)]
    env: Option<String>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect rollouts and train the world model checkpoint
    TrainWm,
    /// Optimize the trigger patch against the trained model
    OptimizePatch,
    /// Run paired clean/triggered episodes and write metrics
    Evaluate,
    /// Re-optimize and evaluate along a budget axis
    Sweep {
        /// patch_ratio | epsilon
        #[arg(long)]
        axis: String,
        /// comma-separated axis values
        #[arg(long)]
        values: String,
    },
    /// Component ablation grid at epsilon 32/255
    Ablate,
    /// Emit divergence, rank-transition, and score-share diagnostics
    Diagnose,
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(env) = &cli.env {
        let kind = EnvKind::parse(env)?;
        // re-derive the planner pairing and env-specific training knobs
        let derived = ExperimentConfig::for_env(kind);
        cfg.env = trap_lab::harness::EnvSection { kind };
        cfg.planner = derived.planner;
        cfg.model.train.dyn_refine_horizon = derived.model.train.dyn_refine_horizon;
        cfg.model.train.dyn_refine_epochs = derived.model.train.dyn_refine_epochs;
    }
    if let Some(seed) = cli.seed {
        cfg.eval.seed = seed;
        cfg.model.train.seed = seed;
    }
    if let Some(e) = cli.episodes {
        cfg.eval.episodes = e;
    }
    if let Some(eps) = cli.epsilon {
        cfg.patch.epsilon = eps;
    }
    if let Some(r) = cli.patch_ratio {
        cfg.patch.ratio = r;
    }
    if let Some(d) = &cli.defense {
        cfg.defense = DefenseSpec::parse(d).map_err(anyhow::Error::msg)?;
    }
    if let Some(p) = &cli.planner {
        cfg.planner.kind = match p.as_str() {
            "imagination" => PlannerKind::Imagination,
            "mpc" => PlannerKind::Mpc,
            other => bail!("unknown planner {other:?} (expected imagination|mpc)"),
        };
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = build_config(&cli)?;
    let out = &cli.out_dir;
    match &cli.command {
        Command::TrainWm => cmd_train(&cfg, out)?,
        Command::OptimizePatch => cmd_optimize_patch(&cfg, out)?,
        Command::Evaluate => cmd_evaluate(&cfg, out)?,
        Command::Sweep { axis, values } => {
            let axis = SweepAxis::parse(axis)
                .with_context(|| format!("unknown sweep axis {axis:?}"))?;
            let values: Vec<f64> = values
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(anyhow::Error::from))
                .collect::<Result<_>>()?;
            if values.is_empty() {
                bail!("--values must be nonempty");
            }
            cmd_sweep(&cfg, out, axis, &values)?;
        }
        Command::Ablate => cmd_ablate(&cfg, out)?,
        Command::Diagnose => cmd_diagnose(&cfg, out)?,
    }
    Ok(())
}
