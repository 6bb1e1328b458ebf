use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use diffpolicy::envbench::{compare_speedup, summarize, write_metrics_csv, EnvConfig, Metrics, SamplerKind};
use diffpolicy::hvts::{ScheduleRanges, SchedulerConfig};
use serde::{Deserialize, Serialize};

use crate::config::{self, overlay};
use crate::eval::label;
use crate::policy::{evaluate_policy, load_policy, ScheduleSpec};

pub const REPORT: &str = "report.csv";
pub const SPEEDUP: &str = "speedup.csv";
pub const TEXT: &str = "bench.txt";

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Checkpoint written by train.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Episodes per seed and row.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Comma-separated evaluation seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Action horizon of the two fixed rows.
    #[arg(long)]
    pub n_action_steps: Option<usize>,
    /// Denoising steps of the fixed DDPM row.
    #[arg(long)]
    pub ddpm_steps: Option<usize>,
    /// Denoising steps of the fixed DDIM row.
    #[arg(long)]
    pub ddim_steps: Option<usize>,
    /// Schedule of the two scheduled rows: fixed:<N_a>,<N_d> | table:<path> | oracle-hvts
    #[arg(long)]
    pub schedule: Option<ScheduleSpec>,
    /// JSON config or a manifest.json from an earlier run; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub policy: Option<PathBuf>,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub n_action_steps: usize,
    pub ddpm_steps: usize,
    pub ddim_steps: usize,
    pub schedule: ScheduleSpec,
    pub ranges: ScheduleRanges,
    pub scheduler: SchedulerConfig,
    pub env: EnvConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            policy: None,
            episodes: 50,
            seeds: vec![0, 1, 2],
            n_action_steps: 8,
            ddpm_steps: 100,
            ddim_steps: 50,
            schedule: ScheduleSpec::OracleHvts,
            ranges: ScheduleRanges::default(),
            scheduler: SchedulerConfig::default(),
            env: EnvConfig::default(),
        }
    }
}

/// One line of the comparison; speedup and success change are relative to
/// the first row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub success_mean: f64,
    pub success_std: f64,
    pub early_success_mean: f64,
    pub mean_inference_steps: f64,
    pub calls_per_step: f64,
    pub calls_per_episode: f64,
    pub speedup: f64,
    pub success_delta: f64,
}

pub fn run(args: &BenchArgs) -> Result<()> {
    let mut cfg: BenchConfig = config::load("bench", args.config.as_deref())?;
    overlay!(cfg, args; episodes, seeds, n_action_steps, ddpm_steps, ddim_steps, schedule);
    if let Some(p) = &args.policy {
        cfg.policy = Some(p.clone());
    }
    execute(&mut cfg, &args.out).map(|_| ())
}

pub fn execute(cfg: &mut BenchConfig, out: &Path) -> Result<Vec<BenchRow>> {
    let policy = cfg.policy.as_deref().context("--policy is required (a checkpoint written by train)")?;
    cfg.policy = Some(config::resolve(policy)?);
    cfg.schedule = cfg.schedule.resolved()?;
    anyhow::ensure!(!cfg.seeds.is_empty(), "at least one seed is required");
    config::prepare_out(out)?;
    let (params, schedule) = load_policy(cfg.policy.as_deref().expect("set above"))?;

    let fixed = |n_d| ScheduleSpec::Fixed {
        n_action_steps: cfg.n_action_steps,
        num_inference_steps: n_d,
    };
    let plan = [
        (SamplerKind::Ddpm, fixed(cfg.ddpm_steps)),
        (SamplerKind::Ddpm, cfg.schedule.clone()),
        (SamplerKind::Ddim, fixed(cfg.ddim_steps)),
        (SamplerKind::Ddim, cfg.schedule.clone()),
    ];
    let mut runs: Vec<Vec<Metrics>> = Vec::with_capacity(plan.len());
    for (kind, spec) in &plan {
        let budget = spec.budget(cfg.ranges, cfg.scheduler)?;
        let name = label(*kind, spec);
        log::info!("evaluating {name}");
        runs.push(evaluate_policy(&params, &schedule, *kind, &budget, cfg.env, cfg.episodes, &cfg.seeds, &name)?);
    }

    let rows = runs
        .iter()
        .map(|r| {
            let cmp = compare_speedup(&runs[0], r)?;
            let s = summarize(r);
            let n = r.len() as f64;
            let episodes: usize = r.iter().map(|m| m.episodes).sum();
            let calls: usize = r.iter().map(|m| m.total_calls).sum();
            Ok(BenchRow {
                label: cmp.candidate,
                success_mean: s.success_mean,
                success_std: s.success_std,
                early_success_mean: s.early_success_mean,
                mean_inference_steps: r.iter().map(|m| m.mean_inference_steps).sum::<f64>() / n,
                calls_per_step: cmp.candidate_calls_per_step,
                calls_per_episode: calls as f64 / episodes.max(1) as f64,
                speedup: cmp.speedup,
                success_delta: cmp.success_delta,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let all: Vec<Metrics> = runs.into_iter().flatten().collect();
    write_metrics_csv(&all, BufWriter::new(File::create(out.join(REPORT))?))?;
    let mut w = csv::Writer::from_path(out.join(SPEEDUP))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    let text = render(&rows);
    config::write_text(&out.join(TEXT), &text)?;
    config::write_manifest(out, "bench", cfg)?;
    print!("{text}");
    Ok(rows)
}

pub fn render(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:<20} {:>9} {:>9} {:>8} {:>10} {:>12} {:>9} {:>8}\n",
        "policy", "succ (%)", "early (%)", "mean N_d", "calls/step", "calls/episode", "speedup", "Δsucc"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<20} {:>9.1} {:>9.1} {:>8.1} {:>10.3} {:>12.1} {:>8.2}x {:>+8.1}",
            r.label,
            100.0 * r.success_mean,
            100.0 * r.early_success_mean,
            r.mean_inference_steps,
            r.calls_per_step,
            r.calls_per_episode,
            r.speedup,
            r.success_delta
        );
    }
    s
}
