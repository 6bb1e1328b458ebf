use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AlnError;
use crate::denoiser::sinusoidal_embed;
use crate::nn::{AdamConfig, ForwardCache, Mlp, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub entropy_coef: f64,
    pub warmup_steps: usize,
    pub lr: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            embed_dim: 128,
            hidden: 256,
            entropy_coef: 10.0,
            warmup_steps: 500,
            lr: 1e-3,
        }
    }
}

/// Learnable categorical distribution over diffusion steps.
///
/// Each step `k` is embedded sinusoidally and mapped by a three-layer network
/// to a scalar logit; the distribution is the softmax over all `T` logits.
/// The output layer starts at zero, so the initial distribution is uniform.
#[derive(Debug, Clone)]
pub struct TimestepSampler {
    config: SamplerConfig,
    net: Mlp,
    embeddings: Array2<f64>,
    logits: Vec<f64>,
    /// Activations of the last forward pass, valid until the network changes.
    cache: Option<ForwardCache>,
    opt: OptimizerState,
    phase: Phase,
}

impl TimestepSampler {
    pub fn new(config: SamplerConfig, seed: u64) -> Result<Self, AlnError> {
        if config.steps == 0 {
            return Err(AlnError::Config("sampler needs at least one step".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::init(&[config.embed_dim, config.hidden, config.hidden, 1], &mut rng)?;
        let out = net.layers_mut().last_mut().expect("three layers");
        out.weight.fill(0.0);
        out.bias.fill(0.0);
        let mut embeddings = Array2::zeros((config.steps, config.embed_dim));
        for k in 1..=config.steps {
            let e = sinusoidal_embed(k, config.embed_dim, config.steps)
                .map_err(|e| AlnError::Config(e.to_string()))?;
            embeddings.row_mut(k - 1).assign(&ndarray::Array1::from(e));
        }
        let opt = OptimizerState::new(
            &net,
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
        );
        let mut sampler = Self {
            config,
            net,
            embeddings,
            logits: Vec::new(),
            cache: None,
            opt,
            phase: Phase::Warmup,
        };
        sampler.refresh_logits();
        Ok(sampler)
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        self.cache = None;
        &mut self.net
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn phase_at(&self, step_count: usize) -> Phase {
        if step_count < self.config.warmup_steps {
            Phase::Warmup
        } else {
            Phase::Adaptive
        }
    }

    /// Moves the sampler to the phase implied by the global training step.
    pub fn observe_step(&mut self, step_count: usize) {
        self.phase = self.phase_at(step_count);
    }

    /// Recomputes the cached logits after a change to the network.
    pub fn refresh_logits(&mut self) {
        let (out, cache) = self
            .net
            .forward_cached(self.embeddings.view())
            .expect("embedding width matches the network");
        self.logits = out.column(0).to_vec();
        self.cache = Some(cache);
    }

    /// Overrides the cached logits directly (tests and diagnostics).
    pub fn set_logits(&mut self, logits: Vec<f64>) -> Result<(), AlnError> {
        if logits.len() != self.config.steps {
            return Err(AlnError::Config(format!(
                "expected {} logits, got {}",
                self.config.steps,
                logits.len()
            )));
        }
        self.logits = logits;
        Ok(())
    }

    pub fn distribution(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.distribution())
    }

    /// Warmup draws are uniform over `1..=T`; adaptive draws invert the CDF
    /// of the current distribution.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, step_count: usize) -> usize {
        match self.phase_at(step_count) {
            Phase::Warmup => rng.random_range(1..=self.config.steps),
            Phase::Adaptive => sample_categorical(&self.distribution(), rng) + 1,
        }
    }

    /// `sum_b -r_b log pi(k_b) - lambda H(pi)` at the current parameters.
    pub fn objective(&self, ks: &[usize], rewards: &[f64]) -> f64 {
        let p = self.distribution();
        let reinforce: f64 = ks
            .iter()
            .zip(rewards)
            .map(|(&k, &r)| -r * p[k - 1].ln())
            .sum();
        reinforce - self.config.entropy_coef * entropy(&p)
    }

    /// Gradient of [`Self::objective`] with respect to the network parameters.
    pub fn objective_grad(&self, ks: &[usize], rewards: &[f64]) -> Result<Mlp, AlnError> {
        if ks.len() != rewards.len() {
            return Err(AlnError::Config("one reward per sampled step".into()));
        }
        if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > self.config.steps) {
            return Err(AlnError::StepOutOfRange {
                k,
                steps: self.config.steps,
            });
        }
        let p = self.distribution();
        let h = entropy(&p);
        let lambda = self.config.entropy_coef;
        // d/dz_j of -lambda H = lambda p_j (ln p_j + H)
        let mut dz: Vec<f64> = p.iter().map(|&pj| lambda * pj * (pj.ln() + h)).collect();
        // d/dz_j of -r ln p_k = -r (delta_jk - p_j)
        let total_r: f64 = rewards.iter().sum();
        for (j, d) in dz.iter_mut().enumerate() {
            *d += total_r * p[j];
        }
        for (&k, &r) in ks.iter().zip(rewards) {
            dz[k - 1] -= r;
        }
        let fresh;
        let cache = match &self.cache {
            Some(c) => c,
            None => {
                fresh = self.net.forward_cached(self.embeddings.view())?.1;
                &fresh
            }
        };
        let grad_out = Array2::from_shape_vec((self.config.steps, 1), dz).expect("T x 1");
        let (grads, _) = self.net.backward(cache, grad_out);
        Ok(grads)
    }

    /// One optimizer step on the REINFORCE-with-entropy objective for the
    /// given sampled steps and rewards.
    pub fn update(&mut self, ks: &[usize], rewards: &[f64]) -> Result<(), AlnError> {
        if self.phase == Phase::Warmup {
            return Err(AlnError::UpdateDuringWarmup);
        }
        let grads = self.objective_grad(ks, rewards)?;
        self.opt.apply(&mut self.net, &grads)?;
        self.refresh_logits();
        Ok(())
    }
}

/// Single-sample form of [`TimestepSampler::update`].
pub fn sampler_update(ts: &mut TimestepSampler, k: usize, r: f64) -> Result<(), AlnError> {
    ts.update(&[k], &[r])
}

pub fn sampler_distribution(ts: &TimestepSampler) -> Vec<f64> {
    ts.distribution()
}

pub fn sample_timestep<R: Rng + ?Sized>(ts: &TimestepSampler, rng: &mut R, step_count: usize) -> usize {
    ts.sample(rng, step_count)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Zero-based index drawn with probability proportional to `weights`.
pub fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding slack past the last partial sum
    weights
        .iter()
        .rposition(|&w| w > 0.0)
        .unwrap_or(weights.len() - 1)
}
