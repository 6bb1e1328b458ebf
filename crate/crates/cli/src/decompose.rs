use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use clap::Args;
use diffpolicy::hvts::{
    build_classification_prompt, build_decomposition_prompt, build_schedule_prompt, parse_schedule,
    parse_stage_templates, stages_to_json, ChatBackend, ChatRequest, HttpChat, ScheduleRanges, ScriptedChat,
    SchedulerConfig, UreqTransport,
};
use serde::{Deserialize, Serialize};

use crate::config::{self, overlay};

pub const STAGES: &str = "stages.json";
pub const SCHEDULE: &str = "schedule.json";
pub const DECOMPOSITION_PROMPT: &str = "decomposition_prompt.txt";
pub const SCHEDULE_PROMPT: &str = "schedule_prompt.txt";
pub const CLASSIFICATION_PROMPT: &str = "classification_prompt.txt";
/// Canned replies read from the `--mock` directory.
pub const MOCK_STAGES: &str = "stages_response.txt";
pub const MOCK_SCHEDULE: &str = "schedule_response.txt";

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// Natural-language task description.
    #[arg(long)]
    pub task: Option<String>,
    /// Number of stages to request.
    #[arg(long)]
    pub num_stages: Option<usize>,
    /// Number of keyframes announced in the prompt; defaults to the number of --frames.
    #[arg(long)]
    pub num_images: Option<usize>,
    /// Keyframe image files sent along with the decomposition request.
    #[arg(long, value_delimiter = ',')]
    pub frames: Option<Vec<PathBuf>>,
    /// Directory holding stages_response.txt and schedule_response.txt; no network access.
    #[arg(long)]
    pub mock: Option<PathBuf>,
    /// Smallest allowed action horizon N_a.
    #[arg(long)]
    pub a_min: Option<usize>,
    /// Largest allowed action horizon N_a.
    #[arg(long)]
    pub a_max: Option<usize>,
    /// Smallest allowed number of denoising steps N_d.
    #[arg(long)]
    pub i_min: Option<usize>,
    /// Largest allowed number of denoising steps N_d.
    #[arg(long)]
    pub i_max: Option<usize>,
    /// Per-request timeout of the remote model.
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    /// JSON config or a manifest.json from an earlier run; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecomposeConfig {
    pub task: String,
    pub num_stages: usize,
    pub num_images: Option<usize>,
    pub frames: Vec<PathBuf>,
    pub mock: Option<PathBuf>,
    pub ranges: ScheduleRanges,
    pub timeout_ms: u64,
    pub top_k: usize,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        Self {
            task: "Push the T-shaped block into the target region".into(),
            num_stages: 5,
            num_images: None,
            frames: Vec::new(),
            mock: None,
            ranges: ScheduleRanges::default(),
            timeout_ms: 30_000,
            top_k: SchedulerConfig::default().top_k,
        }
    }
}

pub fn run(args: &DecomposeArgs) -> Result<()> {
    let mut cfg: DecomposeConfig = config::load("decompose", args.config.as_deref())?;
    overlay!(cfg, args; task, num_stages, frames, timeout_ms);
    if args.num_images.is_some() {
        cfg.num_images = args.num_images;
    }
    if let Some(m) = &args.mock {
        cfg.mock = Some(m.clone());
    }
    let r = &mut cfg.ranges;
    for (flag, slot) in [
        (args.a_min, &mut r.a_min),
        (args.a_max, &mut r.a_max),
        (args.i_min, &mut r.i_min),
        (args.i_max, &mut r.i_max),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    execute(&mut cfg, &args.out)
}

fn backend(cfg: &DecomposeConfig) -> Result<Box<dyn ChatBackend>> {
    match &cfg.mock {
        Some(dir) => {
            let read = |name: &str| {
                let path = dir.join(name);
                fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))
            };
            Ok(Box::new(ScriptedChat::new([read(MOCK_STAGES)?, read(MOCK_SCHEDULE)?])))
        }
        None => Ok(Box::new(HttpChat::from_env(
            UreqTransport,
            Duration::from_millis(cfg.timeout_ms),
        )?)),
    }
}

pub fn execute(cfg: &mut DecomposeConfig, out: &Path) -> Result<()> {
    cfg.frames = cfg.frames.iter().map(|f| config::resolve(f)).collect::<Result<_>>()?;
    if let Some(m) = &cfg.mock {
        cfg.mock = Some(config::resolve(m)?);
    }
    cfg.ranges.validate()?;
    let images = cfg
        .frames
        .iter()
        .map(|f| fs::read(f).with_context(|| format!("reading {}", f.display())))
        .collect::<Result<Vec<_>>>()?;
    let num_images = cfg.num_images.unwrap_or(images.len());
    let decomposition_prompt = build_decomposition_prompt(&cfg.task, num_images, cfg.num_stages)?;
    let mut chat = backend(cfg)?;
    config::prepare_out(out)?;
    config::write_text(&out.join(DECOMPOSITION_PROMPT), &decomposition_prompt)?;

    let reply = chat
        .complete(&ChatRequest {
            prompt: decomposition_prompt,
            images,
        })
        .context("decomposition request")?;
    let stages = parse_stage_templates(&reply, cfg.num_stages).context("decomposition response")?;
    config::write_text(&out.join(STAGES), &format!("{}\n", stages_to_json(&stages)))?;

    let schedule_prompt = build_schedule_prompt(&stages, &cfg.ranges)?;
    config::write_text(&out.join(SCHEDULE_PROMPT), &schedule_prompt)?;
    let reply = chat
        .complete(&ChatRequest {
            prompt: schedule_prompt,
            images: Vec::new(),
        })
        .context("schedule request")?;
    let table = parse_schedule(&reply, &stages, &cfg.ranges).context("schedule response")?;
    table.save(&out.join(SCHEDULE))?;
    config::write_text(
        &out.join(CLASSIFICATION_PROMPT),
        &build_classification_prompt(&stages, cfg.top_k)?,
    )?;
    config::write_manifest(out, "decompose", cfg)?;
    for e in table.entries() {
        println!("{:<40} N_a {:>3}  N_d {:>3}", e.name, e.n_action_steps, e.num_inference_steps);
    }
    Ok(())
}
