use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use diffpolicy::envbench::{generate_demos, DemoConfig, EnvConfig};
use serde::{Deserialize, Serialize};

use crate::config::{self, overlay};

pub const DEMOS: &str = "demos.bin";

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of successful demonstrations.
    #[arg(long)]
    pub n: Option<usize>,
    /// Seed of the episode and noise stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Standard deviation of the noise added to expert actions.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Action window length.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// JSON configuration or manifest of an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataConfig {
    pub n: usize,
    pub seed: u64,
    pub noise: f64,
    pub horizon: usize,
    pub env: EnvConfig,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        let d = DemoConfig::default();
        Self {
            n: d.episodes,
            seed: d.seed,
            noise: d.noise_level,
            horizon: d.horizon,
            env: d.env,
        }
    }
}

pub fn run(args: &GenDataArgs) -> Result<()> {
    let mut cfg: GenDataConfig = config::load("gen-data", args.config.as_deref())?;
    overlay!(cfg, args; n, seed, noise, horizon);
    execute(&cfg, &args.out)
}

pub fn execute(cfg: &GenDataConfig, out: &Path) -> Result<()> {
    config::prepare_out(out)?;
    let data = generate_demos(&DemoConfig {
        episodes: cfg.n,
        seed: cfg.seed,
        noise_level: cfg.noise,
        horizon: cfg.horizon,
        env: cfg.env,
        ..DemoConfig::default()
    })?;
    data.save(&out.join(DEMOS))?;
    config::write_manifest(out, "gen-data", cfg)?;
    log::info!(
        "wrote {} demonstrations ({} windows) to {}",
        data.trajectories().len(),
        data.total_windows(),
        out.join(DEMOS).display()
    );
    Ok(())
}
