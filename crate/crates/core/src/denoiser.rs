//! Noise-prediction network `eps(obs, a_k, k)`.
//!
//! A fully connected stand-in for the usual U-Net/Transformer backbone: the
//! input is the concatenation of the observation, the flattened noisy action
//! block and a sinusoidal embedding of the step index. The network output is
//! turned into a predicted noise block by a fixed per-step affine map
//! ([`OutputMap`]), which is the identity unless a data scale is given.

use std::io::{Read, Write};

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{ActionSeq, DiffusionError, NoiseSchedule, Observation, ScheduleConfig};
use crate::nn::{Mlp, NetError};

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("embedding dimension must be even and positive, got {0}")]
    OddEmbedding(usize),
    #[error("step {k} exceeds the schedule length {steps}")]
    StepOutOfRange { k: usize, steps: usize },
    #[error("observation has {found} features, expected {expected}")]
    ObservationWidth { expected: usize, found: usize },
    #[error("action block is {found:?}, expected {expected:?}")]
    ActionShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("data scale must be positive and finite, got {0}")]
    SigmaData(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DenoiserError>;

/// Sinusoidal embedding of step `k`: the first half holds `sin(k f_i)`, the
/// second half `cos(k f_i)`, with frequencies `f_i = 10000^(-i / half)`.
pub fn sinusoidal_embed(k: usize, dim: usize, steps: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(DenoiserError::OddEmbedding(dim));
    }
    if k > steps {
        return Err(DenoiserError::StepOutOfRange { k, steps });
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let angle = k as f64 * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserDims {
    pub obs_dim: usize,
    pub horizon: usize,
    pub action_dim: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl Default for DenoiserDims {
    fn default() -> Self {
        Self {
            obs_dim: 6,
            horizon: 16,
            action_dim: 2,
            embed_dim: 128,
            hidden: 256,
            hidden_layers: 3,
        }
    }
}

impl DenoiserDims {
    pub fn action_len(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn input_width(&self) -> usize {
        self.obs_dim + self.action_len() + self.embed_dim
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_width()];
        sizes.extend(std::iter::repeat_n(self.hidden, self.hidden_layers));
        sizes.push(self.action_len());
        sizes
    }
}

/// Per-step map `eps_hat = skip[k] * a_k + scale[k] * net(obs, a_k, k)`.
///
/// With data scale `s` and `sigma_k^2 = (1 - ab_k) / ab_k`, the
/// preconditioned map uses `skip = sigma_k / ((sigma_k^2 + s^2) sqrt(ab_k))`
/// and `scale = -s / sqrt(sigma_k^2 + s^2)`: the skip term is the exact noise
/// estimate for zero-mean data of variance `s^2`, and the network output
/// stays of unit scale at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputMap {
    sigma_data: Option<f64>,
    skip: Vec<f64>,
    scale: Vec<f64>,
}

impl OutputMap {
    pub fn identity(steps: usize) -> Self {
        Self {
            sigma_data: None,
            skip: vec![0.0; steps],
            scale: vec![1.0; steps],
        }
    }

    pub fn preconditioned(schedule: &NoiseSchedule, sigma_data: f64) -> Result<Self> {
        if !(sigma_data > 0.0 && sigma_data.is_finite()) {
            return Err(DenoiserError::SigmaData(sigma_data));
        }
        let s2 = sigma_data * sigma_data;
        let (skip, scale) = (1..=schedule.steps())
            .map(|k| {
                let ab = schedule.alpha_bar(k);
                let var = (1.0 - ab) / ab;
                let total = var + s2;
                (var.sqrt() / (total * ab.sqrt()), -sigma_data / total.sqrt())
            })
            .unzip();
        Ok(Self {
            sigma_data: Some(sigma_data),
            skip,
            scale,
        })
    }

    /// Builds the identity map for `None`, the preconditioned one otherwise.
    pub fn for_schedule(schedule: &NoiseSchedule, sigma_data: Option<f64>) -> Result<Self> {
        match sigma_data {
            None => Ok(Self::identity(schedule.steps())),
            Some(s) => Self::preconditioned(schedule, s),
        }
    }

    pub fn sigma_data(&self) -> Option<f64> {
        self.sigma_data
    }

    pub fn steps(&self) -> usize {
        self.skip.len()
    }

    /// `(skip, scale)` at step `k`.
    pub fn coefficients(&self, k: usize) -> (f64, f64) {
        (self.skip[k - 1], self.scale[k - 1])
    }
}

/// Network weights together with the shapes they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub dims: DenoiserDims,
    /// Number of diffusion steps the step embedding is defined over.
    pub steps: usize,
    pub net: Mlp,
    pub output: OutputMap,
}

/// One training or inference query.
#[derive(Debug, Clone)]
pub struct DenoiserQuery<'a> {
    pub obs: &'a [f64],
    pub noisy: &'a [f64],
    pub k: usize,
}

/// Loss of a batch together with the per-example contributions.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub per_example: Vec<f64>,
    pub mean_loss: f64,
    pub grads: Mlp,
}

pub fn init_params(seed: u64, dims: DenoiserDims, steps: usize) -> Result<DenoiserParams> {
    if dims.embed_dim == 0 || dims.embed_dim % 2 != 0 {
        return Err(DenoiserError::OddEmbedding(dims.embed_dim));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Mlp::init(&dims.layer_sizes(), &mut rng)?;
    Ok(DenoiserParams {
        dims,
        steps,
        net,
        output: OutputMap::identity(steps),
    })
}

impl DenoiserParams {
    pub fn zeros(dims: DenoiserDims, steps: usize) -> Result<Self> {
        Ok(Self {
            dims,
            steps,
            net: Mlp::zeros(&dims.layer_sizes())?,
            output: OutputMap::identity(steps),
        })
    }

    pub fn with_output(mut self, output: OutputMap) -> Result<Self> {
        if output.steps() != self.steps {
            return Err(DenoiserError::StepOutOfRange {
                k: output.steps(),
                steps: self.steps,
            });
        }
        self.output = output;
        Ok(self)
    }

    fn map_output(&self, queries: &[DenoiserQuery<'_>], out: &mut Array2<f64>) {
        for (q, mut row) in queries.iter().zip(out.axis_iter_mut(Axis(0))) {
            let (skip, scale) = self.output.coefficients(q.k);
            for (o, a) in row.iter_mut().zip(q.noisy) {
                *o = skip * a + scale * *o;
            }
        }
    }

    fn write_input_row(&self, q: &DenoiserQuery<'_>, row: &mut [f64]) -> Result<()> {
        let d = &self.dims;
        if q.obs.len() != d.obs_dim {
            return Err(DenoiserError::ObservationWidth {
                expected: d.obs_dim,
                found: q.obs.len(),
            });
        }
        if q.noisy.len() != d.action_len() {
            return Err(DenoiserError::ActionShape {
                expected: (d.horizon, d.action_dim),
                found: (q.noisy.len() / d.action_dim.max(1), d.action_dim),
            });
        }
        let embed = sinusoidal_embed(q.k, d.embed_dim, self.steps)?;
        let (o, rest) = row.split_at_mut(d.obs_dim);
        let (a, e) = rest.split_at_mut(d.action_len());
        o.copy_from_slice(q.obs);
        a.copy_from_slice(q.noisy);
        e.copy_from_slice(&embed);
        Ok(())
    }

    fn input_matrix(&self, queries: &[DenoiserQuery<'_>]) -> Result<Array2<f64>> {
        let mut x = Array2::zeros((queries.len(), self.dims.input_width()));
        for (q, mut row) in queries.iter().zip(x.axis_iter_mut(Axis(0))) {
            self.write_input_row(q, row.as_slice_mut().expect("standard layout"))?;
        }
        Ok(x)
    }

    /// Predicted noise for each query, one row per query.
    pub fn predict_batch(&self, queries: &[DenoiserQuery<'_>]) -> Result<Array2<f64>> {
        let x = self.input_matrix(queries)?;
        let mut out = self.net.forward(x.view())?;
        self.map_output(queries, &mut out);
        Ok(out)
    }

    /// Mean-squared noise-prediction loss over the batch and its exact
    /// gradient. `targets` holds one flattened noise block per row.
    pub fn loss_and_grad(
        &self,
        queries: &[DenoiserQuery<'_>],
        targets: &Array2<f64>,
    ) -> Result<BatchGradient> {
        let x = self.input_matrix(queries)?;
        if targets.dim() != (queries.len(), self.dims.action_len()) {
            return Err(DenoiserError::ActionShape {
                expected: (queries.len(), self.dims.action_len()),
                found: targets.dim(),
            });
        }
        let (mut out, cache) = self.net.forward_cached(x.view())?;
        self.map_output(queries, &mut out);
        let residual = &out - targets;
        let width = self.dims.action_len() as f64;
        let per_example: Vec<f64> = residual
            .axis_iter(Axis(0))
            .map(|r| r.iter().map(|v| v * v).sum::<f64>() / width)
            .collect();
        let batch = queries.len() as f64;
        let mean_loss = per_example.iter().sum::<f64>() / batch;
        let mut grad_out = residual * (2.0 / (width * batch));
        for (q, mut row) in queries.iter().zip(grad_out.axis_iter_mut(Axis(0))) {
            let (_, scale) = self.output.coefficients(q.k);
            row *= scale;
        }
        let (grads, _) = self.net.backward(&cache, grad_out);
        Ok(BatchGradient {
            per_example,
            mean_loss,
            grads,
        })
    }
}

/// `eps(obs, a_k, k)` for a single query.
pub fn denoiser_forward(
    p: &DenoiserParams,
    obs: &Observation,
    ak: &ActionSeq,
    k: usize,
) -> Result<ActionSeq> {
    check_action_shape(p, ak)?;
    let noisy = ak.as_flat();
    let out = p.predict_batch(&[DenoiserQuery {
        obs: obs.as_slice(),
        noisy: &noisy,
        k,
    }])?;
    Ok(ActionSeq::from_flat(
        p.dims.horizon,
        p.dims.action_dim,
        out.into_raw_vec_and_offset().0,
    )?)
}

/// Loss `mse(eps, eps_hat)` for a single example and its gradient.
pub fn denoiser_backward(
    p: &DenoiserParams,
    obs: &Observation,
    ak: &ActionSeq,
    k: usize,
    eps: &ActionSeq,
) -> Result<(f64, Mlp)> {
    check_action_shape(p, ak)?;
    check_action_shape(p, eps)?;
    let noisy = ak.as_flat();
    let target = Array2::from_shape_vec((1, p.dims.action_len()), eps.as_flat())
        .expect("shape checked");
    let g = p.loss_and_grad(
        &[DenoiserQuery {
            obs: obs.as_slice(),
            noisy: &noisy,
            k,
        }],
        &target,
    )?;
    Ok((g.mean_loss, g.grads))
}

fn check_action_shape(p: &DenoiserParams, a: &ActionSeq) -> Result<()> {
    let expected = (p.dims.horizon, p.dims.action_dim);
    if a.shape() != expected {
        return Err(DenoiserError::ActionShape {
            expected,
            found: a.shape(),
        });
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DPOLCKPT";
const CHECKPOINT_VERSION: u32 = 2;

/// Denoiser weights plus the noise schedule they were trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub schedule: ScheduleConfig,
}

impl Checkpoint {
    /// Layout (all little-endian):
    ///
    /// ```text
    /// magic        8 bytes  "DPOLCKPT"
    /// version      u32      2
    /// obs_dim, horizon, action_dim, embed_dim, hidden, hidden_layers: u32 each
    /// steps        u32
    /// beta_start   f64
    /// beta_end     f64
    /// sigma_data   f64      0 for the identity output map
    /// count        u64      number of parameters
    /// params       count x f64, per layer: weight (fan_in x fan_out, row-major) then bias
    /// ```
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let d = &self.params.dims;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [
            d.obs_dim,
            d.horizon,
            d.action_dim,
            d.embed_dim,
            d.hidden,
            d.hidden_layers,
            self.schedule.steps,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.schedule.beta_start.to_le_bytes())?;
        w.write_all(&self.schedule.beta_end.to_le_bytes())?;
        w.write_all(&self.params.output.sigma_data().unwrap_or(0.0).to_le_bytes())?;
        let flat = self.params.net.to_flat();
        w.write_all(&(flat.len() as u64).to_le_bytes())?;
        for v in flat {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(DenoiserError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(DenoiserError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let mut fields = [0usize; 7];
        for f in &mut fields {
            *f = read_u32(&mut r)? as usize;
        }
        let dims = DenoiserDims {
            obs_dim: fields[0],
            horizon: fields[1],
            action_dim: fields[2],
            embed_dim: fields[3],
            hidden: fields[4],
            hidden_layers: fields[5],
        };
        let schedule = ScheduleConfig {
            steps: fields[6],
            beta_start: read_f64(&mut r)?,
            beta_end: read_f64(&mut r)?,
            ..ScheduleConfig::default()
        };
        let sigma_data = read_f64(&mut r)?;
        let output = OutputMap::for_schedule(&schedule.build()?, (sigma_data != 0.0).then_some(sigma_data))?;
        let count = read_u64(&mut r)? as usize;
        let mut params = DenoiserParams::zeros(dims, schedule.steps)?.with_output(output)?;
        if count != params.net.num_params() {
            return Err(DenoiserError::Checkpoint(format!(
                "header declares {count} parameters, dims imply {}",
                params.net.num_params()
            )));
        }
        let mut flat = Vec::with_capacity(count);
        for _ in 0..count {
            flat.push(read_f64(&mut r)?);
        }
        params.net.load_flat(&flat)?;
        Ok(Self { params, schedule })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
