use super::{HvtsError, ScheduleRanges, StageTemplate};

const DECOMPOSITION_SCHEMA: &str = r#"[
  {
    "name": "<stage_name>",
    "description": "Action features: <desc>"
  }
]"#;

const SCHEDULE_SCHEMA: &str = r#"[
  {
    "name": "<stage_name>",
    "n_action_steps": <N_a>,
    "num_inference_steps": <N_d>
  }
]"#;

/// Prompt asking for a fixed number of named stages from keyframes.
pub fn build_decomposition_prompt(
    task_desc: &str,
    num_images: usize,
    num_stages: usize,
) -> Result<String, HvtsError> {
    let task = task_desc.trim();
    if task.is_empty() {
        return Err(HvtsError::EmptyTask);
    }
    if num_stages == 0 {
        return Err(HvtsError::NoStages);
    }
    Ok(format!(
        "Task: {task}\n\
         \n\
         You are given {num_images} images showing the progression of the task. \
         Decompose the task into exactly {num_stages} stages based on visual changes.\n\
         Each stage should describe the pixel-level visual change between states.\n\
         Naming rule: task/stage names should use underscores instead of spaces\n\
         \n\
         Return exactly {num_stages} stages in JSON with schema:\n\
         {DECOMPOSITION_SCHEMA}\n"
    ))
}

fn stage_lines(stages: &[StageTemplate]) -> String {
    stages
        .iter()
        .map(|s| format!("- {}: {}", s.name, s.description))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Prompt asking for an `(n_action_steps, num_inference_steps)` pair per stage.
pub fn build_schedule_prompt(
    stages: &[StageTemplate],
    ranges: &ScheduleRanges,
) -> Result<String, HvtsError> {
    if stages.is_empty() {
        return Err(HvtsError::NoStages);
    }
    ranges.validate()?;
    let ScheduleRanges {
        a_min,
        a_max,
        i_min,
        i_max,
    } = *ranges;
    Ok(format!(
        "Task stages (total {n}):\n{defs}\n\
         Assign two parameters for each stage:\n\
         - n_action_steps: integer in [{a_min}, {a_max}]\n\
         - num_inference_steps: integer in [{i_min}, {i_max}]\n\
         Choose n_action_steps and num_inference_steps based on the relative difficulty of each stage.\n\
         Use smaller values for simple stages and larger values for more precise stages.\n\
         Do not assign the same values to all stages.\n\
         \n\
         Return JSON for all stages:\n\
         {SCHEDULE_SCHEMA}\n",
        n = stages.len(),
        defs = stage_lines(stages),
    ))
}

/// Prompt asking for the `top_k` most likely current stages.
pub fn build_classification_prompt(
    stages: &[StageTemplate],
    top_k: usize,
) -> Result<String, HvtsError> {
    if stages.is_empty() || top_k == 0 {
        return Err(HvtsError::NoStages);
    }
    let format_lines = vec!["stage_name: probability"; top_k].join("\n");
    Ok(format!(
        "Task: You are given several consecutive frames from a robotic manipulation task.\n\
         The images are ordered chronologically from earliest to most recent.\n\
         \n\
         Analyze the visual progression and determine the current stage of the task.\n\
         Focus primarily on the most recent frame while considering the temporal evolution.\n\
         \n\
         Stages:\n\
         {defs}\n\
         \n\
         Return the top-{top_k} most likely stages ranked by probability.\n\
         \n\
         Output format:\n\
         \n\
         {format_lines}\n\
         \n\
         Only output the stage names and probabilities without additional explanations.\n",
        defs = stage_lines(stages),
    ))
}
