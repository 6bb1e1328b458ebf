//! Diffusion-policy engine with adaptive training and stage-conditioned
//! inference.
//!
//! * [`diffusion`]: noise schedules, corruption, DDPM/DDIM reverse steps and losses.
//! * [`nn`] / [`denoiser`]: the noise-prediction network, its gradients and optimizer.
//! * [`aln`]: learnable timestep sampler, hard-trajectory re-weighting and the training loop.
//! * [`hvts`]: stage templates, schedule tables, prompts, response parsing and the runtime scheduler.
//! * [`envbench`]: a synthetic multi-stage push task, scripted expert, rollouts and metrics.

pub mod aln;
pub mod denoiser;
pub mod diffusion;
pub mod envbench;
pub mod hvts;
pub mod nn;
