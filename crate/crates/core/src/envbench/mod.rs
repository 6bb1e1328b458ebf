//! Toy multi-stage push task, scripted demonstrations, receding-horizon
//! rollouts of a trained denoiser (optionally stage-scheduled) and the
//! metrics used to compare inference budgets.

mod demos;
mod env;
mod metrics;
mod rollout;

use thiserror::Error;

pub use demos::{generate_demos, replay, DemoConfig, DemoDataset, Trajectory};
pub use env::{
    run_expert, scripted_expert, EnvConfig, PushEnv, Stage, ACTION_DIM, ALIGN_RADIUS,
    CONTACT_SLACK, OBS_DIM, OFFSET_SCALE, PUSH_COS, REACH_RADIUS, SPAWN_HALF_ANGLE,
};
pub use metrics::{
    compare_speedup, episode_seeds, evaluate, summarize, write_metrics_csv, Metrics,
    SpeedupReport, Summary, EARLY_FRACTION,
};
pub use rollout::{
    rollout, Budget, DiffusionPlanner, EpisodeResult, ExpertPlanner, Planner, RandomPlanner,
    SamplerKind, TraceEntry,
};

use crate::denoiser::DenoiserError;
use crate::diffusion::DiffusionError;
use crate::hvts::HvtsError;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step called on a finished episode")]
    StepAfterDone,
    #[error("expected a {ACTION_DIM}-dimensional action, got {0}")]
    ActionWidth(usize),
    #[error("expected a {OBS_DIM}-dimensional observation, got {0}")]
    ObservationWidth(usize),
    #[error("action contains a non-finite value")]
    NonFiniteAction,
    #[error("expert reached only {found} of {wanted} successful episodes in {attempts} attempts")]
    ExpertBudget {
        wanted: usize,
        found: usize,
        attempts: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("denoising steps {requested} exceed the trained {steps}")]
    TooManySteps { requested: usize, steps: usize },
    #[error("dataset file: {0}")]
    Format(String),
    #[error("metrics were computed on different episodes")]
    SeedMismatch,
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Hvts(#[from] HvtsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
