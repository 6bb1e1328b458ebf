//! Stage-aware inference scheduling: task decomposition into named stages,
//! per-stage `(N_a, N_d)` schedule tables, the text protocol used to obtain
//! them from a vision-language model, and the runtime scheduler that picks a
//! stage and its budget during a rollout.

mod classify;
mod parse;
mod prompts;
mod schedule;
mod select;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use classify::{
    ChatBackend, ChatRequest, ClassifyContext, HttpChat, OracleClassifier, RemoteClassifier,
    ScriptedChat, StageClassifier, Transport, TransportError, UreqTransport, DEFAULT_MAX_NEW_TOKENS,
    DEFAULT_TEMPERATURE, DEFAULT_TOP_P, ENDPOINT_ENV,
};
pub use parse::{parse_schedule, parse_stage_probs, parse_stage_templates, sanitize_json};
pub use prompts::{build_classification_prompt, build_decomposition_prompt, build_schedule_prompt};
pub use schedule::{stages_from_json, stages_to_json, ScheduleRanges, ScheduleTable};
pub use select::{select_stage, SchedulerConfig, SchedulerState, StageBelief, TickOutcome};

#[derive(Debug, Error)]
pub enum HvtsError {
    #[error("task description is empty")]
    EmptyTask,
    #[error("at least one stage is required")]
    NoStages,
    #[error("no bracketed JSON array found in response")]
    NoJsonArray,
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("expected {expected} stages, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("duplicate stage name {0:?}")]
    DuplicateName(String),
    #[error("entry {index}: {reason}")]
    BadEntry { index: usize, reason: String },
    #[error("unknown stage {0:?}")]
    UnknownStage(String),
    #[error("no schedule entry for stage {0:?}")]
    MissingStage(String),
    #[error("schedule value out of range: {0}")]
    OutOfRange(String),
    #[error("invalid ranges: {0}")]
    InvalidRanges(String),
    #[error("no recognised stage in classifier output")]
    NoRecognizedStages,
    #[error("stage index {index} out of range for {len} stages")]
    StageIndex { index: usize, len: usize },
    #[error("classifier request timed out")]
    Timeout,
    #[error("network failure: {0}")]
    Network(String),
    #[error("unusable classifier response: {0}")]
    Response(String),
    #[error("classifier needs {0}")]
    MissingInput(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A named semantic stage of a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTemplate {
    pub name: String,
    pub description: String,
}

impl StageTemplate {
    pub fn new(name: &str, description: &str) -> Result<Self, HvtsError> {
        let name = normalize_name(name);
        if name.is_empty() {
            return Err(HvtsError::BadEntry {
                index: 0,
                reason: "empty stage name".into(),
            });
        }
        Ok(Self {
            name,
            description: normalize_description(description),
        })
    }
}

/// Per-stage inference budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub name: String,
    pub n_action_steps: usize,
    pub num_inference_steps: usize,
}

pub(crate) const DESCRIPTION_PREFIX: &str = "Action features:";

/// Trims and joins whitespace runs with underscores.
pub(crate) fn normalize_name(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join("_")
}

pub(crate) fn normalize_description(raw: &str) -> String {
    let trimmed = raw.trim();
    if trimmed.starts_with(DESCRIPTION_PREFIX) {
        trimmed.to_string()
    } else {
        format!("{DESCRIPTION_PREFIX} {trimmed}")
    }
}
