use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::{StepRecord, TrainReport};
use super::sampler::{SamplerConfig, TimestepSampler};
use super::weights::{AlphaSchedule, TrajectoryWeights, WEIGHT_FLOOR};
use super::{normalize_rewards, AlnError};
use crate::denoiser::{init_params, DenoiserDims, DenoiserParams, DenoiserQuery, OutputMap};
use crate::diffusion::{ActionSeq, NoiseSchedule, ScheduleConfig};
use crate::nn::{AdamConfig, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Uniform timesteps and uniform trajectories throughout.
    UniformBaseline,
    /// Learned timestep sampler plus trajectory re-weighting after warmup.
    Aln,
}

/// Sign applied to the standardised loss before it is used as a reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RewardSign {
    /// `r = +(l - mean) / (std + eps)`: high-loss samples are favoured.
    #[default]
    LossSeeking,
    /// `r = -(l - mean) / (std + eps)`.
    LossAverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerUpdateMode {
    /// One optimizer step per batch on `sum_b -r_b log pi(k_b) - lambda H`.
    #[default]
    PerBatch,
    /// One optimizer step per batch element on `-r_b log pi(k_b) - lambda H`.
    PerElement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub dims: DenoiserDims,
    pub lr: f64,
    pub warmup_steps: usize,
    pub entropy_coef: f64,
    pub sampler_hidden: usize,
    pub sampler_embed_dim: usize,
    pub sampler_lr: f64,
    pub sampler_update: SamplerUpdateMode,
    pub reward_eps: f64,
    pub reward_sign: RewardSign,
    pub alpha_max: f64,
    pub alpha_min: f64,
    pub seed: u64,
    /// Sampler/weight snapshot period in steps.
    pub snapshot_every: usize,
    /// Evaluation period in steps; 0 disables evaluation.
    pub eval_every: usize,
    /// Decay of the weight average used for evaluation and the returned
    /// parameters; 0 uses the raw weights.
    pub ema_decay: f64,
    /// Data scale of the denoiser's output preconditioning; `None` leaves the
    /// network output as the noise estimate.
    pub sigma_data: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 5000,
            batch_size: 32,
            schedule: ScheduleConfig::default(),
            dims: DenoiserDims::default(),
            lr: 1e-3,
            warmup_steps: 500,
            entropy_coef: 10.0,
            sampler_hidden: 256,
            sampler_embed_dim: 128,
            sampler_lr: 1e-3,
            sampler_update: SamplerUpdateMode::PerBatch,
            reward_eps: 1e-8,
            reward_sign: RewardSign::LossSeeking,
            alpha_max: 0.1,
            alpha_min: 0.01,
            seed: 0,
            snapshot_every: 1000,
            eval_every: 0,
            ema_decay: 0.995,
            sigma_data: Some(0.25),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, mode: TrainMode) -> Result<(), AlnError> {
        if self.batch_size == 0 {
            return Err(AlnError::Config("batch_size must be at least 1".into()));
        }
        if mode == TrainMode::Aln && self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(AlnError::Config(format!(
                "warmup ({}) must be shorter than total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.alpha_min > 0.0 && self.alpha_min <= self.alpha_max && self.alpha_max <= 1.0) {
            return Err(AlnError::Config(
                "need 0 < alpha_min <= alpha_max <= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(AlnError::Config("ema_decay must lie in [0, 1)".into()));
        }
        if self.reward_eps <= 0.0 {
            return Err(AlnError::Config("reward_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.schedule.steps,
            embed_dim: self.sampler_embed_dim,
            hidden: self.sampler_hidden,
            entropy_coef: self.entropy_coef,
            warmup_steps: self.warmup_steps,
            lr: self.sampler_lr,
        }
    }
}

/// Windows of demonstration data addressable by trajectory.
pub trait TrainingData {
    fn num_trajectories(&self) -> usize;
    fn num_windows(&self, trajectory: usize) -> usize;
    /// Observation at the window start and the flattened action block.
    fn window(&self, trajectory: usize, index: usize) -> (&[f64], &[f64]);
}

/// One element of a training batch, as chosen by the adaptive loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchItem {
    pub trajectory: usize,
    pub k: usize,
}

/// Whatever is being trained: computes one loss per batch element and
/// applies its own parameter update.
pub trait LossModel {
    fn train_batch(&mut self, items: &[BatchItem]) -> Result<Vec<f64>, AlnError>;
}

/// Per-iteration bookkeeping of the adaptive training procedure, independent
/// of what produces the losses.
///
/// Each iteration draws a batch of trajectories by weight and timesteps
/// (uniform during warmup, from the sampler afterwards), lets the model train
/// on it, then, in the adaptive phase only, standardises the losses into
/// rewards, updates the sampler and the drawn trajectories' weights.
pub struct AdaptiveLoop {
    config: TrainConfig,
    mode: TrainMode,
    sampler: Option<TimestepSampler>,
    weights: TrajectoryWeights,
    trajectory_rng: ChaCha8Rng,
    timestep_rng: ChaCha8Rng,
    step: usize,
    report: TrainReport,
    last_batch: Vec<BatchItem>,
}

impl AdaptiveLoop {
    pub fn new(config: TrainConfig, mode: TrainMode, trajectories: usize) -> Result<Self, AlnError> {
        config.validate(mode)?;
        let weights = TrajectoryWeights::uniform(
            trajectories,
            AlphaSchedule {
                alpha_max: config.alpha_max,
                alpha_min: config.alpha_min,
                total_steps: config.total_steps,
            },
        )?;
        let sampler = match mode {
            TrainMode::Aln => Some(TimestepSampler::new(
                config.sampler_config(),
                config.seed.wrapping_add(0x5a17),
            )?),
            TrainMode::UniformBaseline => None,
        };
        Ok(Self {
            trajectory_rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7a1)),
            timestep_rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x71e)),
            config,
            mode,
            sampler,
            weights,
            step: 0,
            report: TrainReport::default(),
            last_batch: Vec::new(),
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    pub fn sampler(&self) -> Option<&TimestepSampler> {
        self.sampler.as_ref()
    }

    pub fn weights(&self) -> &TrajectoryWeights {
        &self.weights
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn into_report(self) -> TrainReport {
        self.report
    }

    pub fn last_batch(&self) -> &[BatchItem] {
        &self.last_batch
    }

    fn in_warmup(&self) -> bool {
        self.step < self.config.warmup_steps
    }

    fn sampler_entropy(&self) -> f64 {
        match &self.sampler {
            Some(s) => s.entropy(),
            None => (self.config.schedule.steps as f64).ln(),
        }
    }

    /// Runs one iteration and returns the mean batch loss.
    pub fn step<M: LossModel + ?Sized>(&mut self, model: &mut M) -> Result<f64, AlnError> {
        if self.is_done() {
            return Err(AlnError::Config("training already finished".into()));
        }
        if let Some(s) = &mut self.sampler {
            s.observe_step(self.step);
        }
        let steps = self.config.schedule.steps;
        let mut items = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let trajectory = self.weights.sample_index(&mut self.trajectory_rng);
            let k = match &self.sampler {
                Some(s) => s.sample(&mut self.timestep_rng, self.step),
                None => self.timestep_rng.random_range(1..=steps),
            };
            items.push(BatchItem { trajectory, k });
        }
        let losses = model.train_batch(&items)?;
        if losses.len() != items.len() {
            return Err(AlnError::Config("one loss per batch element expected".into()));
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;

        if self.mode == TrainMode::Aln && !self.in_warmup() {
            let mut rewards = normalize_rewards(&losses, self.config.reward_eps);
            if self.config.reward_sign == RewardSign::LossAverse {
                rewards.iter_mut().for_each(|r| *r = -*r);
            }
            let ks: Vec<usize> = items.iter().map(|it| it.k).collect();
            let sampler = self.sampler.as_mut().expect("aln mode has a sampler");
            match self.config.sampler_update {
                SamplerUpdateMode::PerBatch => sampler.update(&ks, &rewards)?,
                SamplerUpdateMode::PerElement => {
                    for (k, r) in ks.iter().zip(&rewards) {
                        sampler.update(&[*k], &[*r])?;
                    }
                }
            }
            let alpha = self.weights.alpha.at(self.step)?;
            for (it, r) in items.iter().zip(&rewards) {
                self.weights.update(it.trajectory, *r, alpha)?;
            }
            debug_assert!(self.weights.values().iter().all(|&w| w >= WEIGHT_FLOOR));
        }

        self.step += 1;
        self.report.gradient_steps = self.step;
        self.report.records.push(StepRecord {
            step: self.step,
            loss: mean_loss,
            eval_success: None,
            sampler_entropy: self.sampler_entropy(),
        });
        if self.config.snapshot_every > 0 && self.step % self.config.snapshot_every == 0 {
            let dist = match &self.sampler {
                Some(s) => s.distribution(),
                None => vec![1.0 / steps as f64; steps],
            };
            self.report.sampler_snapshots.push((self.step, dist));
            self.report
                .weight_snapshots
                .push((self.step, self.weights.values().to_vec()));
        }
        self.last_batch = items;
        Ok(mean_loss)
    }

    /// Attaches an evaluation result to the most recent step.
    pub fn record_eval(&mut self, success: f64) {
        if let Some(last) = self.report.records.last_mut() {
            last.eval_success = Some(success);
        }
    }
}

/// The noise-prediction network as a [`LossModel`]: for each batch element
/// it picks a window of the drawn trajectory, corrupts it at the drawn step
/// and regresses the injected noise.
pub struct DenoiserModel<'a, D: TrainingData + ?Sized> {
    pub params: DenoiserParams,
    pub opt: OptimizerState,
    ema: Option<(f64, DenoiserParams)>,
    updates: usize,
    schedule: NoiseSchedule,
    data: &'a D,
    rng: ChaCha8Rng,
}

impl<'a, D: TrainingData + ?Sized> DenoiserModel<'a, D> {
    pub fn new(config: &TrainConfig, data: &'a D) -> Result<Self, AlnError> {
        let schedule = config.schedule.build()?;
        let params = init_params(config.seed, config.dims, config.schedule.steps)?
            .with_output(OutputMap::for_schedule(&schedule, config.sigma_data)?)?;
        let opt = OptimizerState::new(
            &params.net,
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            ema: (config.ema_decay > 0.0).then(|| (config.ema_decay, params.clone())),
            updates: 0,
            params,
            opt,
            schedule,
            data,
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9015e)),
        })
    }

    /// Weights used for inference: the running average when enabled.
    pub fn inference_params(&self) -> &DenoiserParams {
        self.ema.as_ref().map_or(&self.params, |(_, p)| p)
    }

    pub fn into_inference_params(self) -> DenoiserParams {
        self.ema.map_or(self.params, |(_, p)| p)
    }

    fn update_average(&mut self) {
        self.updates += 1;
        if let Some((decay, avg)) = &mut self.ema {
            let n = self.updates as f64;
            let d = decay.min((1.0 + n) / (10.0 + n));
            for (a, &w) in avg.net.params_mut().zip(self.params.net.params()) {
                *a = d * *a + (1.0 - d) * w;
            }
        }
    }
}

impl<D: TrainingData + ?Sized> LossModel for DenoiserModel<'_, D> {
    fn train_batch(&mut self, items: &[BatchItem]) -> Result<Vec<f64>, AlnError> {
        let dims = self.params.dims;
        let mut obs = Vec::with_capacity(items.len());
        let mut noisy = Vec::with_capacity(items.len());
        let mut targets = Array2::zeros((items.len(), dims.action_len()));
        for (row, it) in items.iter().enumerate() {
            let windows = self.data.num_windows(it.trajectory);
            let j = self.rng.random_range(0..windows);
            let (o, a) = self.data.window(it.trajectory, j);
            let a0 = ActionSeq::from_flat(dims.horizon, dims.action_dim, a.to_vec())?;
            let eps = ActionSeq::gaussian(dims.horizon, dims.action_dim, &mut self.rng);
            let ak = crate::diffusion::forward_noise(&self.schedule, &a0, it.k, &eps)?;
            targets
                .row_mut(row)
                .assign(&ndarray::ArrayView1::from(eps.as_array().as_slice().expect("standard layout")));
            obs.push(o);
            noisy.push(ak.as_flat());
        }
        let queries: Vec<DenoiserQuery<'_>> = items
            .iter()
            .zip(obs.iter().zip(&noisy))
            .map(|(it, (o, n))| DenoiserQuery {
                obs: o,
                noisy: n,
                k: it.k,
            })
            .collect();
        let g = self.params.loss_and_grad(&queries, &targets)?;
        self.opt.apply(&mut self.params.net, &g.grads)?;
        self.update_average();
        Ok(g.per_example)
    }
}

/// Trains a denoiser on `data` without intermediate evaluation.
pub fn train<D: TrainingData + ?Sized>(
    config: &TrainConfig,
    data: &D,
    mode: TrainMode,
) -> Result<(DenoiserParams, TrainReport), AlnError> {
    train_with_eval(config, data, mode, |_, _| None)
}

/// Trains a denoiser, calling `eval` every `config.eval_every` steps; a
/// returned success rate is recorded on that step.
pub fn train_with_eval<D, F>(
    config: &TrainConfig,
    data: &D,
    mode: TrainMode,
    mut eval: F,
) -> Result<(DenoiserParams, TrainReport), AlnError>
where
    D: TrainingData + ?Sized,
    F: FnMut(usize, &DenoiserParams) -> Option<f64>,
{
    if data.num_trajectories() == 0 {
        return Err(AlnError::EmptyDataset);
    }
    if let Some(i) = (0..data.num_trajectories()).find(|&i| data.num_windows(i) == 0) {
        return Err(AlnError::Config(format!("trajectory {i} has no windows")));
    }
    let mut model = DenoiserModel::new(config, data)?;
    let mut lp = AdaptiveLoop::new(config.clone(), mode, data.num_trajectories())?;
    while !lp.is_done() {
        lp.step(&mut model)?;
        let step = lp.step_count();
        if config.eval_every > 0 && step % config.eval_every == 0 {
            if let Some(success) = eval(step, model.inference_params()) {
                lp.record_eval(success);
            }
        }
    }
    Ok((model.into_inference_params(), lp.into_report()))
}
