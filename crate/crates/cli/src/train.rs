use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use diffpolicy::aln::{train_with_eval, SamplerUpdateMode, TrainConfig, TrainMode};
use diffpolicy::denoiser::{Checkpoint, DenoiserDims};
use diffpolicy::envbench::{evaluate, Budget, DemoDataset, DiffusionPlanner, SamplerKind};
use serde::{Deserialize, Serialize};

use crate::config::{self, overlay};

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const REPORT: &str = "report.csv";
pub const SAMPLER_SNAPSHOTS: &str = "sampler_snapshots.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Uniform,
    Aln,
}

impl From<Mode> for TrainMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Uniform => TrainMode::UniformBaseline,
            Mode::Aln => TrainMode::Aln,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UpdateArg {
    PerBatch,
    PerElement,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Uniform step sampling or the adaptive sampler.
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Gradient steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Seed for initialisation and minibatch draws.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Demonstration file written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Minibatch size.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Learning rate of the denoiser optimizer.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Hidden width of the denoiser.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Steps before the sampler and trajectory weights start adapting.
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Whether the step sampler updates once per batch or once per element.
    #[arg(long, value_enum)]
    pub sampler_update: Option<UpdateArg>,
    /// Evaluate the policy every this many steps; 0 disables evaluation.
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Episodes per periodic evaluation.
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    /// JSON config or a manifest.json from an earlier run; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Periodic evaluation during training, in the environment the
/// demonstrations were recorded in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainEval {
    pub episodes: usize,
    pub n_action_steps: usize,
    pub num_inference_steps: usize,
    pub sampler: SamplerKind,
    pub seed: u64,
}

impl Default for TrainEval {
    fn default() -> Self {
        Self {
            episodes: 50,
            n_action_steps: 8,
            num_inference_steps: 10,
            sampler: SamplerKind::Ddim,
            seed: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCmdConfig {
    pub mode: Mode,
    pub data: Option<PathBuf>,
    pub train: TrainConfig,
    pub eval: TrainEval,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Uniform,
            data: None,
            train: TrainConfig {
                dims: DenoiserDims {
                    hidden: 128,
                    ..DenoiserDims::default()
                },
                ..TrainConfig::default()
            },
            eval: TrainEval::default(),
        }
    }
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let mut cfg: TrainCmdConfig = config::load("train", args.config.as_deref())?;
    overlay!(cfg, args; mode);
    if let Some(d) = &args.data {
        cfg.data = Some(d.clone());
    }
    let t = &mut cfg.train;
    if let Some(v) = args.steps {
        t.total_steps = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.batch {
        t.batch_size = v;
    }
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.hidden {
        t.dims.hidden = v;
    }
    if let Some(v) = args.warmup {
        t.warmup_steps = v;
    }
    if let Some(v) = args.eval_every {
        t.eval_every = v;
    }
    if let Some(v) = args.sampler_update {
        t.sampler_update = match v {
            UpdateArg::PerBatch => SamplerUpdateMode::PerBatch,
            UpdateArg::PerElement => SamplerUpdateMode::PerElement,
        };
    }
    if let Some(v) = args.eval_episodes {
        cfg.eval.episodes = v;
    }
    execute(&mut cfg, &args.out)
}

pub fn execute(cfg: &mut TrainCmdConfig, out: &Path) -> Result<()> {
    let data_path = cfg
        .data
        .as_deref()
        .context("--data is required (a file written by gen-data)")?;
    let data_path = config::resolve(data_path)?;
    cfg.data = Some(data_path.clone());
    let data = DemoDataset::load(&data_path)?;
    cfg.train.dims.obs_dim = data.obs_dim();
    cfg.train.dims.action_dim = data.action_dim();
    cfg.train.dims.horizon = data.horizon;
    cfg.train.validate(cfg.mode.into())?;
    config::prepare_out(out)?;

    let schedule = cfg.train.schedule.build()?;
    let ev = cfg.eval.clone();
    let env = data.env;
    let budget = Budget::fixed(ev.n_action_steps, ev.num_inference_steps);
    let mut eval_error = None;
    let (params, report) = train_with_eval(&cfg.train, &data, cfg.mode.into(), |step, params| {
        if ev.episodes == 0 || eval_error.is_some() {
            return None;
        }
        let run = DiffusionPlanner::new(params.clone(), schedule.clone(), ev.sampler)
            .and_then(|mut p| evaluate(&mut p, "train-eval", env, &budget, ev.episodes, ev.seed, None));
        match run {
            Ok((m, _)) => {
                log::info!("step {step}: success {:.3}", m.success_rate);
                Some(m.success_rate)
            }
            Err(e) => {
                eval_error = Some(e);
                None
            }
        }
    })?;
    if let Some(e) = eval_error {
        return Err(e.into());
    }

    Checkpoint {
        params,
        schedule: cfg.train.schedule,
    }
    .save(&out.join(CHECKPOINT))?;
    report.write_csv(BufWriter::new(File::create(out.join(REPORT))?))?;
    report.write_sampler_snapshots(BufWriter::new(File::create(out.join(SAMPLER_SNAPSHOTS))?))?;
    config::write_manifest(out, "train", cfg)?;
    log::info!(
        "trained {} steps in {:?} mode; final loss {:.5}",
        report.gradient_steps,
        cfg.mode,
        report.losses().last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}
