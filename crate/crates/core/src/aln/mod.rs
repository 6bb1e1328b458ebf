//! Adaptive training: a learnable timestep sampler driven by REINFORCE with
//! entropy regularisation, per-trajectory hard-example re-weighting, and the
//! training loop that ties them to the denoiser.

mod report;
mod sampler;
mod train;
mod weights;

use thiserror::Error;

pub use report::{StepRecord, TrainReport};
pub use sampler::{
    entropy, sample_categorical, sample_timestep, sampler_distribution, sampler_update, softmax,
    Phase, SamplerConfig, TimestepSampler,
};
pub use train::{
    train, train_with_eval, AdaptiveLoop, BatchItem, DenoiserModel, LossModel, RewardSign,
    SamplerUpdateMode, TrainConfig, TrainMode, TrainingData,
};
pub use weights::{
    anneal_alpha, update_traj_weight, weighted_sample_index, AlphaSchedule, TrajectoryWeights,
    WEIGHT_FLOOR,
};

use crate::denoiser::DenoiserError;
use crate::diffusion::DiffusionError;
use crate::nn::NetError;

#[derive(Debug, Error)]
pub enum AlnError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("the dataset has no trajectories")]
    EmptyDataset,
    #[error("sampler updates are not allowed during warmup")]
    UpdateDuringWarmup,
    #[error("step {k} is outside 1..={steps}")]
    StepOutOfRange { k: usize, steps: usize },
    #[error("trajectory index {index} out of range for {len} trajectories")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("annealing step {step} exceeds total {total}")]
    AnnealOutOfRange { step: usize, total: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Standardises a batch of losses: `(l - mean) / (std + eps)` with the
/// population standard deviation. A constant batch maps to zeros.
pub fn normalize_rewards(losses: &[f64], eps: f64) -> Vec<f64> {
    if losses.is_empty() {
        return Vec::new();
    }
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + eps;
    losses.iter().map(|l| (l - mean) / denom).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_batch_gives_zero_rewards() {
        assert_eq!(normalize_rewards(&[1.0, 1.0, 1.0], 1e-8), vec![0.0; 3]);
        assert_eq!(normalize_rewards(&[4.2], 1e-8), vec![0.0]);
    }

    #[test]
    fn hand_computed_rewards() {
        let r = normalize_rewards(&[2.0, 4.0, 6.0], 1e-8);
        let expected = 1.5f64.sqrt();
        assert!((r[0] + expected).abs() < 1e-7);
        assert_eq!(r[1], 0.0);
        assert!((r[2] - expected).abs() < 1e-7);
    }
}
