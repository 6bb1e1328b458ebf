use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use diffpolicy::denoiser::{Checkpoint, DenoiserParams};
use diffpolicy::diffusion::NoiseSchedule;
use diffpolicy::envbench::{evaluate, Budget, DiffusionPlanner, EnvConfig, Metrics, SamplerKind, Stage};
use diffpolicy::hvts::{ScheduleEntry, ScheduleRanges, ScheduleTable, SchedulerConfig};
use serde::{Deserialize, Serialize};

use crate::config;

/// The stage that receives the hardest budget in the built-in table.
pub const HARDEST_STAGE: Stage = Stage::Approach;

/// How `(N_a, N_d)` is chosen during evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ScheduleSpec {
    /// `fixed:<N_a>,<N_d>`
    Fixed { n_action_steps: usize, num_inference_steps: usize },
    /// `table:<path>` to a schedule JSON file in stage order.
    Table(PathBuf),
    /// The built-in push-task table with ground-truth stages.
    OracleHvts,
}

impl FromStr for ScheduleSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "oracle-hvts" {
            return Ok(Self::OracleHvts);
        }
        if let Some(path) = s.strip_prefix("table:") {
            if path.is_empty() {
                bail!("table: needs a path");
            }
            return Ok(Self::Table(PathBuf::from(path)));
        }
        if let Some(pair) = s.strip_prefix("fixed:") {
            let (a, d) = pair
                .split_once(',')
                .ok_or_else(|| anyhow!("expected fixed:<N_a>,<N_d>, got {s:?}"))?;
            let n_action_steps: usize = a.trim().parse().context("N_a")?;
            let num_inference_steps: usize = d.trim().parse().context("N_d")?;
            if n_action_steps == 0 || num_inference_steps == 0 {
                bail!("N_a and N_d must be positive");
            }
            return Ok(Self::Fixed {
                n_action_steps,
                num_inference_steps,
            });
        }
        bail!("unknown schedule {s:?}; expected fixed:<N_a>,<N_d>, table:<path> or oracle-hvts")
    }
}

impl TryFrom<String> for ScheduleSpec {
    type Error = anyhow::Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ScheduleSpec> for String {
    fn from(s: ScheduleSpec) -> String {
        s.to_string()
    }
}

impl fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fixed {
                n_action_steps,
                num_inference_steps,
            } => write!(f, "fixed:{n_action_steps},{num_inference_steps}"),
            Self::Table(p) => write!(f, "table:{}", p.display()),
            Self::OracleHvts => f.write_str("oracle-hvts"),
        }
    }
}

impl ScheduleSpec {
    /// Same schedule with any table path made absolute.
    pub fn resolved(&self) -> Result<Self> {
        Ok(match self {
            Self::Table(p) => Self::Table(config::resolve(p)?),
            other => other.clone(),
        })
    }

    pub fn budget(&self, ranges: ScheduleRanges, scheduler: SchedulerConfig) -> Result<Budget> {
        Ok(match self {
            Self::Fixed {
                n_action_steps,
                num_inference_steps,
            } => Budget::fixed(*n_action_steps, *num_inference_steps),
            Self::Table(p) => {
                let table = ScheduleTable::load(p, ranges).with_context(|| format!("loading {}", p.display()))?;
                check_stage_count(&table)?;
                Budget::Scheduled { table, scheduler }
            }
            Self::OracleHvts => Budget::Scheduled {
                table: push_table(ranges)?,
                scheduler,
            },
        })
    }
}

fn check_stage_count(table: &ScheduleTable) -> Result<()> {
    if table.len() != Stage::ALL.len() {
        bail!(
            "the push task has {} stages but the table has {} entries",
            Stage::ALL.len(),
            table.len()
        );
    }
    for (entry, stage) in table.entries().iter().zip(Stage::ALL) {
        if entry.name != stage.name() {
            log::warn!("table entry {:?} is used for stage {:?}", entry.name, stage.name());
        }
    }
    Ok(())
}

/// One stage at `(a_min, i_max)`, every other stage at `(a_max, i_min)`.
pub fn push_table(ranges: ScheduleRanges) -> Result<ScheduleTable> {
    let entries = Stage::ALL
        .iter()
        .map(|&s| {
            let (n_action_steps, num_inference_steps) = if s == HARDEST_STAGE {
                ranges.hardest()
            } else {
                (ranges.a_max, ranges.i_min)
            };
            ScheduleEntry {
                name: s.name().to_string(),
                n_action_steps,
                num_inference_steps,
            }
        })
        .collect();
    Ok(ScheduleTable::new(entries, ranges)?)
}

pub fn load_policy(path: &Path) -> Result<(DenoiserParams, NoiseSchedule)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading policy {}", path.display()))?;
    let schedule = ck.schedule.build()?;
    Ok((ck.params, schedule))
}

/// Evaluates a policy on each seed; one row per seed.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    kind: SamplerKind,
    budget: &Budget,
    env: EnvConfig,
    episodes: usize,
    seeds: &[u64],
    label: &str,
) -> Result<Vec<Metrics>> {
    let mut planner = DiffusionPlanner::new(params.clone(), schedule.clone(), kind)?;
    seeds
        .iter()
        .map(|&seed| Ok(evaluate(&mut planner, label, env, budget, episodes, seed, None)?.0))
        .collect()
}
