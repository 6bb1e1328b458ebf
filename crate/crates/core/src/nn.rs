//! Small fully connected networks with hand-written reverse mode, plus the
//! adaptive-moment optimizer used for both the denoiser and the timestep
//! sampler.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("layer sizes must all be positive, got {0:?}")]
    ZeroSizedLayer(Vec<usize>),
    #[error("a network needs at least an input and an output size")]
    TooFewLayers,
    #[error("input width {found} does not match network input {expected}")]
    InputWidth { expected: usize, found: usize },
    #[error("parameter layout mismatch")]
    LayoutMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(fan_in, fan_out)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// SiLU between layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn check_sizes(sizes: &[usize]) -> Result<(), NetError> {
    if sizes.len() < 2 {
        return Err(NetError::TooFewLayers);
    }
    if sizes.contains(&0) {
        return Err(NetError::ZeroSizedLayer(sizes.to_vec()));
    }
    Ok(())
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Result<Self, NetError> {
        check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| Linear {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Self { layers })
    }

    /// Gaussian fan-in initialisation: `sqrt(2 / fan_in)` for hidden layers,
    /// `sqrt(1 / fan_in)` for the output layer; zero biases.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self, NetError> {
        let mut net = Self::zeros(sizes)?;
        let last = net.layers.len() - 1;
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let fan_in = layer.weight.nrows() as f64;
            let std = if i == last { (1.0 / fan_in).sqrt() } else { (2.0 / fan_in).sqrt() };
            layer
                .weight
                .mapv_inplace(|_| std * rng.sample::<f64, _>(StandardNormal));
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("nonempty").weight.ncols()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_width()];
        sizes.extend(self.layers.iter().map(|l| l.weight.ncols()));
        sizes
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<(), NetError> {
        if x.ncols() != self.input_width() {
            return Err(NetError::InputWidth {
                expected: self.input_width(),
                found: x.ncols(),
            });
        }
        Ok(())
    }

    /// Row-batched forward pass.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NetError> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            if i != last {
                z.mapv_inplace(silu);
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_cached(
        &self,
        x: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, ForwardCache), NetError> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(last),
        };
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            cache.inputs.push(h);
            if i == last {
                h = z;
            } else {
                h = z.mapv(silu);
                cache.pre_activations.push(z);
            }
        }
        Ok((h, cache))
    }

    /// Reverse pass given `d loss / d output`. Returns parameter gradients in
    /// the shape of `self` and the gradient with respect to the input rows.
    pub fn backward(&self, cache: &ForwardCache, grad_out: Array2<f64>) -> (Mlp, Array2<f64>) {
        let mut grads: Vec<Linear> = Vec::with_capacity(self.layers.len());
        let mut dz = grad_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let weight = cache.inputs[i].t().dot(&dz);
            let bias = dz.sum_axis(Axis(0));
            let mut dh = dz.dot(&layer.weight.t());
            if i > 0 {
                Zip::from(&mut dh)
                    .and(&cache.pre_activations[i - 1])
                    .for_each(|d, &z| *d *= silu_grad(z));
            }
            grads.push(Linear { weight, bias });
            dz = dh;
        }
        grads.reverse();
        (Mlp { layers: grads }, dz)
    }

    /// Flattened parameters: each layer's weight (row-major) then its bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn load_flat(&mut self, values: &[f64]) -> Result<(), NetError> {
        if values.len() != self.num_params() {
            return Err(NetError::LayoutMismatch);
        }
        let mut it = values.iter();
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn same_layout(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.dim() == b.bias.dim())
    }

    pub fn scale(&mut self, factor: f64) {
        self.params_mut().for_each(|p| *p *= factor);
    }

    pub fn add_assign(&mut self, other: &Mlp) -> Result<(), NetError> {
        if !self.same_layout(other) {
            return Err(NetError::LayoutMismatch);
        }
        self.params_mut().zip(other.params()).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected adaptive-moment state for one network.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    first: Mlp,
    second: Mlp,
}

impl OptimizerState {
    pub fn new(params: &Mlp, config: AdamConfig) -> Self {
        let sizes = params.sizes();
        let zeros = Mlp::zeros(&sizes).expect("sizes come from a valid network");
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn apply(&mut self, params: &mut Mlp, grads: &Mlp) -> Result<(), NetError> {
        if !params.same_layout(grads) || !params.same_layout(&self.first) {
            return Err(NetError::LayoutMismatch);
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let update = |p: &mut f64, &g: &f64, m: &mut f64, v: &mut f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (((p, g), m), v) in params
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first.layers)
            .zip(&mut self.second.layers)
        {
            Zip::from(&mut p.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(update);
            Zip::from(&mut p.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(update);
        }
        Ok(())
    }
}

/// One adaptive-moment update; returns the new parameters and state.
pub fn optimizer_step(
    params: &Mlp,
    grads: &Mlp,
    state: &OptimizerState,
) -> Result<(Mlp, OptimizerState), NetError> {
    let mut p = params.clone();
    let mut st = state.clone();
    st.apply(&mut p, grads)?;
    Ok((p, st))
}
