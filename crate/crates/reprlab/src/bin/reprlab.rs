//! Command-line front end for the continual-learning laboratory.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use reprlab::baselines::ConditionId;
use reprlab::harness::{self, ExperimentPlan, Profile};

#[derive(Parser)]
#[command(name = "reprlab", version, about = "Dual-memory pseudo-rehearsal laboratory for continual RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment plan from scratch.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed (defaults to every seed in the plan).
        #[arg(long)]
        seed: Option<u64>,
        /// Override the plan's condition.
        #[arg(long)]
        condition: Option<String>,
        /// Override the plan's profile (desk | atari).
        #[arg(long)]
        profile: Option<String>,
        /// Override the plan's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continue an interrupted run from its last completed phase.
    Resume {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a run's long-term network on one task.
    Evaluate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 30)]
        episodes: usize,
    },
    /// Write per-task score-curve CSVs for external plotting.
    ExportPlots {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the pairwise Fisher overlap of a finished run.
    FisherOverlap {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List the retention conditions the harness accepts.
    ListConditions,
}

fn apply_overrides(
    mut plan: ExperimentPlan,
    seed: Option<u64>,
    condition: Option<String>,
    profile: Option<String>,
    out: Option<PathBuf>,
) -> Result<(ExperimentPlan, PathBuf)> {
    if let Some(c) = condition {
        plan.condition = ConditionId::parse(&c)?;
    }
    if let Some(p) = profile {
        plan.profile = match p.as_str() {
            "desk" => Profile::Desk,
            "atari" => Profile::Atari,
            other => bail!("unknown profile '{other}' (expected desk or atari)"),
        };
        if plan.profile == Profile::Atari {
            bail!(
                "the atari profile is a documentation profile: it parses and validates, \
                 but no built-in task produces 4x84x84 observations, so it cannot run"
            );
        }
    }
    if let Some(s) = seed {
        plan.seeds = vec![s];
    }
    let out_dir = out.unwrap_or_else(|| PathBuf::from(&plan.out_dir));
    Ok((plan, out_dir))
}

/// Locate the resolved plan inside a run directory (any seed subdir).
fn load_run_plan(out: &PathBuf) -> Result<ExperimentPlan> {
    let mut candidates = vec![out.join("plan.resolved.toml")];
    if let Ok(entries) = std::fs::read_dir(out) {
        for e in entries.flatten() {
            candidates.push(e.path().join("plan.resolved.toml"));
        }
    }
    for c in &candidates {
        if c.exists() {
            return Ok(harness::load_plan(c)?);
        }
    }
    bail!("no plan.resolved.toml found under {}", out.display())
}

fn seeds_in(plan: &ExperimentPlan, seed: Option<u64>) -> Vec<u64> {
    match seed {
        Some(s) => vec![s],
        None => plan.seeds.clone(),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, seed, condition, profile, out } => {
            let plan = harness::load_plan(&config).context("loading plan")?;
            let (plan, out_dir) = apply_overrides(plan, seed, condition, profile, out)?;
            let summaries = harness::run_plan(&plan, &out_dir, false)?;
            for s in &summaries {
                println!("seed {} complete: {}", s.seed, s.seed_dir.display());
                for o in &s.overlaps {
                    println!("  overlap {} / {} = {:.3}", o.task_a, o.task_b, o.overlap);
                }
            }
        }
        Command::Resume { out, seed } => {
            let plan = load_run_plan(&out)?;
            let seeds = seeds_in(&plan, seed);
            for s in seeds {
                let summary = harness::run_seed(&plan, s, &out, true)?;
                println!("seed {} complete: {}", summary.seed, summary.seed_dir.display());
            }
        }
        Command::Evaluate { out, task, seed, episodes } => {
            let plan = load_run_plan(&out)?;
            for s in seeds_in(&plan, seed) {
                let (mean, std) = harness::evaluate_run(&out, s, &plan, &task, episodes)?;
                println!("seed {s} {task}: mean {mean:.3} stdev {std:.3} over {episodes} episodes");
            }
        }
        Command::ExportPlots { out, seed } => {
            let plan = load_run_plan(&out)?;
            let boundaries = harness::task_boundaries(&plan);
            for s in seeds_in(&plan, seed) {
                let seed_dir = out.join(format!("seed-{s}"));
                let files = harness::export_plot_data(&seed_dir, &boundaries)?;
                for f in files {
                    println!("wrote {}", f.display());
                }
            }
        }
        Command::FisherOverlap { out, seed } => {
            let plan = load_run_plan(&out)?;
            for s in seeds_in(&plan, seed) {
                let path = out.join(format!("seed-{s}")).join("overlap.csv");
                if !path.exists() {
                    bail!(
                        "no overlap.csv for seed {s}; run with `fisher_analysis = true` in the plan \
                         so the analysis phase computes it"
                    );
                }
                print!("{}", std::fs::read_to_string(&path)?);
            }
        }
        Command::ListConditions => {
            for c in ConditionId::ALL {
                println!("{c}");
            }
        }
    }
    Ok(())
}
