use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::env::{scripted_expert, EnvConfig, PushEnv, Stage, ACTION_DIM};
use super::EnvError;
use crate::denoiser::{DenoiserParams, DenoiserQuery};
use crate::diffusion::{
    clip_noise_prediction, ddim_reverse_step, ddpm_reverse_step, spaced_timesteps, ActionSeq,
    NoiseSchedule,
};
use crate::hvts::{ClassifyContext, OracleClassifier, ScheduleTable, SchedulerConfig, SchedulerState, StageClassifier};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

/// Produces an action sequence for an observation.
pub trait Planner {
    fn horizon(&self) -> usize;

    /// Plans with `num_inference_steps` denoising steps; returns the plan and
    /// the number of denoiser evaluations it took.
    fn plan(
        &mut self,
        obs: &[f64],
        num_inference_steps: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ActionSeq, usize), EnvError>;
}

/// Samples from a trained noise-prediction network.
///
/// DDPM with fewer steps than the schedule runs ancestral sampling on the
/// schedule collapsed onto evenly spaced steps; DDIM (`eta = 0`) jumps
/// between the same evenly spaced steps. By default every intermediate
/// clean estimate is clipped to the action range `[-1, 1]`.
pub struct DiffusionPlanner {
    params: DenoiserParams,
    schedule: NoiseSchedule,
    kind: SamplerKind,
    clip: Option<f64>,
    respaced: HashMap<usize, (Vec<usize>, NoiseSchedule)>,
    calls: usize,
}

impl DiffusionPlanner {
    pub fn new(params: DenoiserParams, schedule: NoiseSchedule, kind: SamplerKind) -> Result<Self, EnvError> {
        if params.steps != schedule.steps() {
            return Err(EnvError::Config(format!(
                "network embeds {} steps but the schedule has {}",
                params.steps,
                schedule.steps()
            )));
        }
        Ok(Self {
            params,
            schedule,
            kind,
            clip: Some(1.0),
            respaced: HashMap::new(),
            calls: 0,
        })
    }

    pub fn kind(&self) -> SamplerKind {
        self.kind
    }

    /// Sets the bound on intermediate clean estimates; `None` disables it.
    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip = clip;
        self
    }

    pub fn params(&self) -> &DenoiserParams {
        &self.params
    }

    /// Denoiser evaluations since construction.
    pub fn total_calls(&self) -> usize {
        self.calls
    }

    fn steps_for(&mut self, n: usize) -> Result<&(Vec<usize>, NoiseSchedule), EnvError> {
        let total = self.schedule.steps();
        if n > total {
            return Err(EnvError::TooManySteps {
                requested: n,
                steps: total,
            });
        }
        if !self.respaced.contains_key(&n) {
            let taus = spaced_timesteps(total, n)?;
            let sub = self.schedule.respaced(&taus)?;
            self.respaced.insert(n, (taus, sub));
        }
        Ok(&self.respaced[&n])
    }

    fn predict(&mut self, obs: &[f64], a: &ActionSeq, k: usize) -> Result<ActionSeq, EnvError> {
        self.calls += 1;
        let noisy = a.as_flat();
        let out = self.params.predict_batch(&[DenoiserQuery { obs, noisy: &noisy, k }])?;
        Ok(ActionSeq::from_flat(
            self.params.dims.horizon,
            self.params.dims.action_dim,
            out.into_raw_vec_and_offset().0,
        )?)
    }
}

impl Planner for DiffusionPlanner {
    fn horizon(&self) -> usize {
        self.params.dims.horizon
    }

    fn plan(
        &mut self,
        obs: &[f64],
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ActionSeq, usize), EnvError> {
        let (h, d) = (self.params.dims.horizon, self.params.dims.action_dim);
        let (taus, sub) = self.steps_for(n)?.clone();
        let start = self.calls;
        let mut a = ActionSeq::gaussian(h, d, rng);
        for j in (1..=n).rev() {
            let k = taus[j - 1];
            let mut eps = self.predict(obs, &a, k)?;
            if let Some(bound) = self.clip {
                eps = clip_noise_prediction(&self.schedule, &a, &eps, k, bound)?;
            }
            a = match self.kind {
                SamplerKind::Ddpm => {
                    let z = (j > 1).then(|| ActionSeq::gaussian(h, d, rng));
                    ddpm_reverse_step(&sub, &eps, &a, j, z.as_ref())?
                }
                SamplerKind::Ddim => {
                    let k_prev = if j > 1 { taus[j - 2] } else { 0 };
                    ddim_reverse_step(&self.schedule, &eps, &a, k, k_prev, 0.0, None)?
                }
            };
        }
        Ok((a.clamp(-1.0, 1.0), self.calls - start))
    }
}

/// Plans by simulating the scripted expert from the observed state.
pub struct ExpertPlanner {
    pub env: EnvConfig,
    pub horizon: usize,
}

impl Planner for ExpertPlanner {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn plan(&mut self, obs: &[f64], _: usize, _: &mut ChaCha8Rng) -> Result<(ActionSeq, usize), EnvError> {
        let mut sim = PushEnv::from_observation(
            EnvConfig {
                max_steps: usize::MAX,
                ..self.env
            },
            obs,
        )?;
        let mut flat = Vec::with_capacity(self.horizon * ACTION_DIM);
        for _ in 0..self.horizon {
            let a = scripted_expert(&sim);
            flat.extend_from_slice(&a);
            if !sim.is_done() {
                sim.step(&a)?;
            }
        }
        Ok((ActionSeq::from_flat(self.horizon, ACTION_DIM, flat)?, 0))
    }
}

/// Uniform random actions.
pub struct RandomPlanner {
    pub horizon: usize,
}

impl Planner for RandomPlanner {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn plan(&mut self, _: &[f64], _: usize, rng: &mut ChaCha8Rng) -> Result<(ActionSeq, usize), EnvError> {
        let flat = (0..self.horizon * ACTION_DIM)
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect();
        Ok((ActionSeq::from_flat(self.horizon, ACTION_DIM, flat)?, 0))
    }
}

/// How `(N_a, N_d)` is chosen at each replan.
#[derive(Debug, Clone, PartialEq)]
pub enum Budget {
    Fixed {
        n_action_steps: usize,
        num_inference_steps: usize,
    },
    /// Stage-dependent budgets from a table, with the stage supplied by a
    /// classifier (the environment's ground truth unless overridden).
    Scheduled {
        table: ScheduleTable,
        scheduler: SchedulerConfig,
    },
}

impl Budget {
    pub fn fixed(n_action_steps: usize, num_inference_steps: usize) -> Self {
        Budget::Fixed {
            n_action_steps,
            num_inference_steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Control step at which the plan was made.
    pub step: usize,
    pub stage: usize,
    pub n_action_steps: usize,
    pub num_inference_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub success: bool,
    pub success_step: Option<usize>,
    pub control_steps: usize,
    /// Counted inside the planner, one per network evaluation.
    pub denoiser_calls: usize,
    pub classifier_calls: usize,
    /// Seconds spent planning.
    pub wall_time: f64,
    pub trace: Vec<TraceEntry>,
}

impl EpisodeResult {
    pub fn calls_per_step(&self) -> f64 {
        if self.control_steps == 0 {
            0.0
        } else {
            self.denoiser_calls as f64 / self.control_steps as f64
        }
    }

    /// Sum of the planned `N_d` over replans.
    pub fn scheduled_calls(&self) -> usize {
        self.trace.iter().map(|t| t.num_inference_steps).sum()
    }
}

/// Runs one receding-horizon episode from the initial condition `episode_seed`.
///
/// Each replan draws a fresh plan and executes its first `N_a` actions. With
/// a scheduled budget the scheduler is ticked once per control step, so a
/// classification made mid-plan takes effect at the next replan. Sampling
/// noise comes from `noise_seed` only.
pub fn rollout<P: Planner + ?Sized>(
    planner: &mut P,
    env_config: EnvConfig,
    episode_seed: u64,
    budget: &Budget,
    classifier: Option<&mut dyn StageClassifier>,
    noise_seed: u64,
) -> Result<EpisodeResult, EnvError> {
    let mut env = PushEnv::reset(env_config, episode_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut oracle = OracleClassifier::new(Stage::ALL.len());
    let classifier: &mut dyn StageClassifier = match classifier {
        Some(c) => c,
        None => &mut oracle,
    };
    let mut scheduler = match budget {
        Budget::Scheduled { table, scheduler } => Some(SchedulerState::new(*scheduler, table)?),
        Budget::Fixed { .. } => None,
    };
    let horizon = planner.horizon();
    let mut result = EpisodeResult {
        seed: episode_seed,
        success: false,
        success_step: None,
        control_steps: 0,
        denoiser_calls: 0,
        classifier_calls: 0,
        wall_time: 0.0,
        trace: Vec::new(),
    };

    let mut decide = |env: &PushEnv, state: &mut Option<SchedulerState>| -> Result<(usize, usize, usize), EnvError> {
        match (budget, state) {
            (
                Budget::Fixed {
                    n_action_steps,
                    num_inference_steps,
                },
                _,
            ) => Ok((env.stage().index(), *n_action_steps, *num_inference_steps)),
            (Budget::Scheduled { table, .. }, Some(st)) => {
                let o = st.tick(&ClassifyContext::with_stage(env.stage().index()), classifier, table)?;
                Ok((o.stage, o.n_action_steps, o.num_inference_steps))
            }
            (Budget::Scheduled { .. }, None) => unreachable!("scheduler built for scheduled budgets"),
        }
    };

    while !env.is_done() {
        let (stage, n_a, n_d) = decide(&env, &mut scheduler)?;
        if n_a == 0 || n_a > horizon {
            return Err(EnvError::Config(format!("action steps {n_a} outside 1..={horizon}")));
        }
        result.trace.push(TraceEntry {
            step: env.steps(),
            stage,
            n_action_steps: n_a,
            num_inference_steps: n_d,
        });
        let started = Instant::now();
        let (plan, calls) = planner.plan(&env.observation(), n_d, &mut rng)?;
        result.wall_time += started.elapsed().as_secs_f64();
        result.denoiser_calls += calls;
        for i in 0..n_a {
            if i > 0 {
                // keep the scheduler's step counter in sync with control steps
                decide(&env, &mut scheduler)?;
            }
            env.step(&plan.row(i))?;
            if env.is_done() {
                break;
            }
        }
    }
    result.control_steps = env.steps();
    result.success = env.is_success();
    result.success_step = env.success_step();
    result.classifier_calls = scheduler.as_ref().map_or(0, |s| s.classifier_calls());
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserDims;
    use crate::diffusion::ScheduleConfig;
    use crate::hvts::ScheduleRanges;

    fn zero_planner(kind: SamplerKind) -> DiffusionPlanner {
        let dims = DenoiserDims {
            embed_dim: 8,
            hidden: 8,
            hidden_layers: 1,
            ..Default::default()
        };
        let cfg = ScheduleConfig::default();
        DiffusionPlanner::new(DenoiserParams::zeros(dims, cfg.steps).unwrap(), cfg.build().unwrap(), kind).unwrap()
    }

    fn never_done() -> EnvConfig {
        EnvConfig {
            max_steps: 64,
            target_tolerance: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn fixed_budget_call_count() {
        let mut p = zero_planner(SamplerKind::Ddpm);
        let r = rollout(&mut p, never_done(), 1, &Budget::fixed(8, 100), None, 0).unwrap();
        assert_eq!(r.trace.len(), 8);
        assert_eq!(r.denoiser_calls, 800);
        assert_eq!(r.denoiser_calls, r.scheduled_calls());
        assert_eq!(p.total_calls(), 800);
    }

    #[test]
    fn too_many_steps_is_rejected() {
        let mut p = zero_planner(SamplerKind::Ddim);
        assert!(matches!(
            rollout(&mut p, never_done(), 1, &Budget::fixed(8, 101), None, 0),
            Err(EnvError::TooManySteps { .. })
        ));
    }

    #[test]
    fn rollout_is_deterministic() {
        let mut p = zero_planner(SamplerKind::Ddpm);
        let a = rollout(&mut p, EnvConfig::default(), 5, &Budget::fixed(8, 20), None, 3).unwrap();
        let b = rollout(&mut p, EnvConfig::default(), 5, &Budget::fixed(8, 20), None, 3).unwrap();
        assert_eq!(
            (a.success, a.control_steps, a.denoiser_calls, &a.trace),
            (b.success, b.control_steps, b.denoiser_calls, &b.trace)
        );
    }

    #[test]
    fn scheduled_budget_follows_table() {
        let pairs = [(8, 40), (16, 20), (16, 20), (16, 20), (16, 20)];
        let table = ScheduleTable::from_pairs(&pairs, ScheduleRanges::default()).unwrap();
        let budget = Budget::Scheduled {
            table: table.clone(),
            scheduler: SchedulerConfig {
                gap: 0.0,
                ..Default::default()
            },
        };
        let mut p = ExpertPlanner {
            env: EnvConfig::default(),
            horizon: 16,
        };
        let r = rollout(&mut p, EnvConfig::default(), 2, &budget, None, 0).unwrap();
        assert!(r.success);
        for t in &r.trace {
            assert_eq!((t.n_action_steps, t.num_inference_steps), pairs[t.stage]);
        }
        assert!(r.classifier_calls <= r.control_steps.div_ceil(8) + 1);
    }

    #[test]
    fn expert_planner_matches_closed_loop_expert() {
        let mut p = ExpertPlanner {
            env: EnvConfig::default(),
            horizon: 16,
        };
        for seed in 0..10 {
            let r = rollout(&mut p, EnvConfig::default(), seed, &Budget::fixed(16, 1), None, 0).unwrap();
            let mut env = PushEnv::reset(EnvConfig::default(), seed);
            crate::envbench::run_expert(&mut env).unwrap();
            assert_eq!(r.success_step, env.success_step());
        }
    }
}
