use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use diffpolicy::envbench::{summarize, write_metrics_csv, EnvConfig, SamplerKind, EARLY_FRACTION};
use diffpolicy::hvts::{ScheduleRanges, SchedulerConfig};
use serde::{Deserialize, Serialize};

use crate::config::{self, overlay};
use crate::policy::{evaluate_policy, load_policy, ScheduleSpec};

pub const REPORT: &str = "report.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SamplerArg {
    Ddpm,
    Ddim,
}

impl From<SamplerArg> for SamplerKind {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::Ddpm => SamplerKind::Ddpm,
            SamplerArg::Ddim => SamplerKind::Ddim,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by train.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Episodes per seed.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// fixed:<N_a>,<N_d> | table:<path> | oracle-hvts
    #[arg(long)]
    pub schedule: Option<ScheduleSpec>,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerArg>,
    /// Comma-separated evaluation seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Confidence gap for a deterministic stage pick.
    #[arg(long)]
    pub gap: Option<f64>,
    /// JSON config or a manifest.json from an earlier run; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub policy: Option<PathBuf>,
    pub episodes: usize,
    pub schedule: ScheduleSpec,
    pub sampler: SamplerKind,
    pub seeds: Vec<u64>,
    pub ranges: ScheduleRanges,
    pub scheduler: SchedulerConfig,
    pub env: EnvConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            policy: None,
            episodes: 50,
            schedule: ScheduleSpec::Fixed {
                n_action_steps: 8,
                num_inference_steps: 100,
            },
            sampler: SamplerKind::Ddpm,
            seeds: vec![0, 1, 2],
            ranges: ScheduleRanges::default(),
            scheduler: SchedulerConfig::default(),
            env: EnvConfig::default(),
        }
    }
}

pub fn run(args: &EvalArgs) -> Result<()> {
    let mut cfg: EvalConfig = config::load("eval", args.config.as_deref())?;
    overlay!(cfg, args; episodes, schedule, seeds);
    if let Some(p) = &args.policy {
        cfg.policy = Some(p.clone());
    }
    if let Some(s) = args.sampler {
        cfg.sampler = s.into();
    }
    if let Some(g) = args.gap {
        cfg.scheduler.gap = g;
    }
    execute(&mut cfg, &args.out)
}

pub fn label(sampler: SamplerKind, schedule: &ScheduleSpec) -> String {
    let kind = match sampler {
        SamplerKind::Ddpm => "ddpm",
        SamplerKind::Ddim => "ddim",
    };
    match schedule {
        ScheduleSpec::Fixed {
            n_action_steps,
            num_inference_steps,
        } => format!("{kind}-fixed-{n_action_steps}-{num_inference_steps}"),
        ScheduleSpec::Table(_) => format!("{kind}-table"),
        ScheduleSpec::OracleHvts => format!("{kind}-hvts"),
    }
}

pub fn execute(cfg: &mut EvalConfig, out: &Path) -> Result<()> {
    let policy = cfg.policy.as_deref().context("--policy is required (a checkpoint written by train)")?;
    cfg.policy = Some(config::resolve(policy)?);
    cfg.schedule = cfg.schedule.resolved()?;
    anyhow::ensure!(!cfg.seeds.is_empty(), "at least one seed is required");
    config::prepare_out(out)?;
    let (params, schedule) = load_policy(cfg.policy.as_deref().expect("set above"))?;
    let budget = cfg.schedule.budget(cfg.ranges, cfg.scheduler)?;
    let name = label(cfg.sampler, &cfg.schedule);
    let rows = evaluate_policy(&params, &schedule, cfg.sampler, &budget, cfg.env, cfg.episodes, &cfg.seeds, &name)?;
    write_metrics_csv(&rows, BufWriter::new(File::create(out.join(REPORT))?))?;
    config::write_manifest(out, "eval", cfg)?;
    let s = summarize(&rows);
    println!(
        "{name}: success {:.1} ± {:.1}%, early success (within {:.0}% of the horizon) {:.1} ± {:.1}%, {:.2} denoiser calls per step",
        100.0 * s.success_mean,
        100.0 * s.success_std,
        100.0 * EARLY_FRACTION,
        100.0 * s.early_success_mean,
        100.0 * s.early_success_std,
        s.calls_per_step_mean
    );
    Ok(())
}
