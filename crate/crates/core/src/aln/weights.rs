use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sampler::sample_categorical;
use super::AlnError;

pub const WEIGHT_FLOOR: f64 = 1e-4;

/// Cosine-annealed EMA rate for trajectory re-weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub alpha_max: f64,
    pub alpha_min: f64,
    pub total_steps: usize,
}

impl AlphaSchedule {
    pub fn at(&self, step: usize) -> Result<f64, AlnError> {
        anneal_alpha(step, self.total_steps, self.alpha_max, self.alpha_min)
    }
}

/// `alpha_min + (alpha_max - alpha_min) (1 + cos(pi step / total)) / 2`.
pub fn anneal_alpha(step: usize, total: usize, alpha_max: f64, alpha_min: f64) -> Result<f64, AlnError> {
    if step > total {
        return Err(AlnError::AnnealOutOfRange { step, total });
    }
    if total == 0 {
        return Ok(alpha_max);
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(alpha_min + 0.5 * (alpha_max - alpha_min) * (1.0 + phase.cos()))
}

/// Per-trajectory sampling weights, floored and kept at mean 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryWeights {
    w: Vec<f64>,
    pub alpha: AlphaSchedule,
    pub floor: f64,
}

impl TrajectoryWeights {
    pub fn uniform(n: usize, alpha: AlphaSchedule) -> Result<Self, AlnError> {
        if n == 0 {
            return Err(AlnError::EmptyDataset);
        }
        Ok(Self {
            w: vec![1.0; n],
            alpha,
            floor: WEIGHT_FLOOR,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// EMA towards `r + 1`, floor, then renormalise to mean 1.
    ///
    /// Returns the floored value before renormalisation.
    pub fn update(&mut self, i: usize, reward: f64, alpha: f64) -> Result<f64, AlnError> {
        if i >= self.w.len() {
            return Err(AlnError::IndexOutOfRange { index: i, len: self.w.len() });
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(AlnError::Config(format!("alpha {alpha} outside (0, 1]")));
        }
        let raw = ((1.0 - alpha) * self.w[i] + alpha * (reward + 1.0)).max(self.floor);
        self.w[i] = raw;
        normalize_with_floor(&mut self.w, self.floor);
        Ok(raw)
    }

    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.w, rng)
    }
}

pub fn update_traj_weight(
    w: &TrajectoryWeights,
    i: usize,
    r_i: f64,
    alpha: f64,
) -> Result<TrajectoryWeights, AlnError> {
    let mut next = w.clone();
    next.update(i, r_i, alpha)?;
    Ok(next)
}

pub fn weighted_sample_index<R: Rng + ?Sized>(w: &TrajectoryWeights, rng: &mut R) -> usize {
    w.sample_index(rng)
}

/// Rescales so that the mean is exactly 1 while no entry drops below
/// `floor`: entries that would fall under the floor are pinned to it and the
/// remaining mass is shared proportionally by the rest.
fn normalize_with_floor(w: &mut [f64], floor: f64) {
    let n = w.len() as f64;
    let mut pinned = vec![false; w.len()];
    loop {
        let free: f64 = w
            .iter()
            .zip(&pinned)
            .filter(|(_, p)| !**p)
            .map(|(v, _)| v)
            .sum();
        let pinned_count = pinned.iter().filter(|p| **p).count() as f64;
        let scale = (n - pinned_count * floor) / free;
        let mut changed = false;
        for (v, p) in w.iter_mut().zip(pinned.iter_mut()) {
            if !*p && *v * scale < floor {
                *p = true;
                changed = true;
            }
        }
        if !changed {
            for (v, p) in w.iter_mut().zip(&pinned) {
                *v = if *p { floor } else { *v * scale };
            }
            return;
        }
    }
}
