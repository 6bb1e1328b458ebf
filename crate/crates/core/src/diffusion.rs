//! Discrete-time diffusion mathematics for action sequences.
//!
//! Steps are 1-based: `k = 1` is the least noisy level and `k = T` the
//! noisiest. Level `0` denotes clean data (`alpha_bar(0) == 1`). Every
//! function here is pure; randomness (Gaussian draws) is always supplied by
//! the caller.

use ndarray::{Array1, Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("a noise schedule needs at least one step")]
    NoSteps,
    #[error("beta[{index}] = {value} is outside the open interval (0, 1)")]
    BetaOutOfRange { index: usize, value: f64 },
    #[error("beta_start {start} must not exceed beta_end {end}")]
    BetaOrder { start: f64, end: f64 },
    #[error("step {k} is outside 1..={steps}")]
    StepOutOfRange { k: usize, steps: usize },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("the final reverse step (k = 1) must not inject noise")]
    NoiseAtFinalStep,
    #[error("previous step {k_prev} must be strictly below {k}")]
    StepOrder { k: usize, k_prev: usize },
    #[error("eta = {0} is outside [0, 1]")]
    EtaOutOfRange(f64),
    #[error("cannot pick {requested} sampling steps out of {steps}")]
    InvalidStepCount { requested: usize, steps: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

/// A `T_p x d_a` block of normalized actions (or a same-shaped noise draw).
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSeq(Array2<f64>);

impl ActionSeq {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFinite("action sequence"));
        }
        Ok(Self(data))
    }

    pub fn zeros(horizon: usize, dim: usize) -> Self {
        Self(Array2::zeros((horizon, dim)))
    }

    pub fn from_flat(horizon: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        let found = (values.len(), 1);
        let data = Array2::from_shape_vec((horizon, dim), values).map_err(|_| {
            DiffusionError::ShapeMismatch {
                expected: (horizon, dim),
                found,
            }
        })?;
        Self::new(data)
    }

    /// Standard normal draw of the given shape.
    pub fn gaussian<R: Rng + ?Sized>(horizon: usize, dim: usize, rng: &mut R) -> Self {
        Self(Array2::from_shape_simple_fn((horizon, dim), || {
            rng.sample(StandardNormal)
        }))
    }

    pub fn horizon(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// Row-major flattening, the layout the denoiser consumes.
    pub fn as_flat(&self) -> Vec<f64> {
        self.0.iter().copied().collect()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.0.row(i).to_vec()
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        Self(self.0.mapv(|v| v.clamp(lo, hi)))
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    fn check_same_shape(&self, other: &ActionSeq) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(DiffusionError::ShapeMismatch {
                expected: self.shape(),
                found: other.shape(),
            });
        }
        Ok(())
    }
}

/// Low-dimensional observation features. The feature extractor is the
/// identity at this scale, so this is the raw state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation(Array1<f64>);

impl Observation {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFinite("observation"));
        }
        Ok(Self(Array1::from(data)))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("observation is contiguous")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BetaScheduleKind {
    #[default]
    Linear,
}

/// Serializable description of a linear schedule.
///
/// The default spreads the usual 1000-step linear range (1e-4 to 0.02) over
/// 100 steps, which leaves `alpha_bar(T)` near 5e-5 so sampling can start
/// from pure noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub kind: BetaScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            kind: BetaScheduleKind::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_noise_schedule(self.steps, self.beta_start, self.beta_end, self.kind)
    }
}

/// Per-step coefficient tables shared by training and sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

/// Builds a schedule whose betas interpolate linearly from `beta_start` to
/// `beta_end`, both inclusive.
pub fn make_noise_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: BetaScheduleKind,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(DiffusionError::NoSteps);
    }
    for (index, value) in [(0, beta_start), (steps - 1, beta_end)] {
        if !(value > 0.0 && value < 1.0) {
            return Err(DiffusionError::BetaOutOfRange { index, value });
        }
    }
    if beta_start > beta_end {
        return Err(DiffusionError::BetaOrder {
            start: beta_start,
            end: beta_end,
        });
    }
    let betas = match kind {
        BetaScheduleKind::Linear => {
            if steps == 1 {
                vec![beta_start]
            } else {
                let span = (steps - 1) as f64;
                (0..steps)
                    .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
                    .collect()
            }
        }
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(DiffusionError::NoSteps);
        }
        if let Some((index, &value)) = betas
            .iter()
            .enumerate()
            .find(|(_, b)| !(**b > 0.0 && **b < 1.0))
        {
            return Err(DiffusionError::BetaOutOfRange { index, value });
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    /// Total number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(DiffusionError::StepOutOfRange {
                k,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    /// Cumulative product up to step `k`; level 0 is clean data.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bars[k - 1]
        }
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.sigmas[k - 1]
    }

    /// Coefficients of the affine action update
    /// `scale * (a_k - gamma * eps_hat) + sigma * z`.
    pub fn reverse_coefficients(&self, k: usize) -> Result<ReverseCoefficients> {
        self.check_step(k)?;
        let alpha = self.alpha(k);
        Ok(ReverseCoefficients {
            scale: 1.0 / alpha.sqrt(),
            gamma: (1.0 - alpha) / (1.0 - self.alpha_bar(k)).sqrt(),
            sigma: self.sigma(k),
        })
    }

    /// Collapses the schedule onto an increasing subset of its steps.
    ///
    /// Step `j` of the result corresponds to `steps[j - 1]` of `self` and
    /// keeps its cumulative signal level; the per-step betas are re-derived
    /// from consecutive cumulative ratios.
    pub fn respaced(&self, steps: &[usize]) -> Result<NoiseSchedule> {
        if steps.is_empty() {
            return Err(DiffusionError::NoSteps);
        }
        let mut prev = 0;
        let mut betas = Vec::with_capacity(steps.len());
        for &k in steps {
            self.check_step(k)?;
            if k <= prev {
                return Err(DiffusionError::StepOrder { k, k_prev: prev });
            }
            betas.push(1.0 - self.alpha_bar(k) / self.alpha_bar(prev));
            prev = k;
        }
        NoiseSchedule::from_betas(betas)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseCoefficients {
    pub scale: f64,
    pub gamma: f64,
    pub sigma: f64,
}

/// Applies `scale * (a_k - gamma * eps_hat) + sigma * z` elementwise.
pub fn affine_action_update(
    coeffs: ReverseCoefficients,
    ak: &ActionSeq,
    eps_hat: &ActionSeq,
    z: Option<&ActionSeq>,
) -> Result<ActionSeq> {
    ak.check_same_shape(eps_hat)?;
    let mut out = Zip::from(&ak.0)
        .and(&eps_hat.0)
        .map_collect(|&a, &e| coeffs.scale * (a - coeffs.gamma * e));
    if let Some(z) = z {
        ak.check_same_shape(z)?;
        out.scaled_add(coeffs.sigma, &z.0);
    }
    Ok(ActionSeq(out))
}

/// `n` evenly spaced steps out of `1..=T`, ascending, always ending at `T`.
pub fn spaced_timesteps(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(DiffusionError::InvalidStepCount {
            requested: n,
            steps: total,
        });
    }
    Ok((1..=n)
        .map(|j| ((j * total) as f64 / n as f64).round() as usize)
        .collect())
}

/// Closed-form corruption `sqrt(ab_k) * a0 + sqrt(1 - ab_k) * eps`.
pub fn forward_noise(
    s: &NoiseSchedule,
    a0: &ActionSeq,
    k: usize,
    eps: &ActionSeq,
) -> Result<ActionSeq> {
    s.check_step(k)?;
    a0.check_same_shape(eps)?;
    let ab = s.alpha_bar(k);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(ActionSeq(
        Zip::from(&a0.0)
            .and(&eps.0)
            .map_collect(|&a, &e| signal * a + noise * e),
    ))
}

/// One ancestral (DDPM) reverse step from level `k` to `k - 1`.
///
/// `z = None` means a zero draw; a nonzero draw at `k = 1` is rejected.
pub fn ddpm_reverse_step(
    s: &NoiseSchedule,
    eps_hat: &ActionSeq,
    ak: &ActionSeq,
    k: usize,
    z: Option<&ActionSeq>,
) -> Result<ActionSeq> {
    s.check_step(k)?;
    ak.check_same_shape(eps_hat)?;
    if let Some(z) = z {
        ak.check_same_shape(z)?;
        if k == 1 && !z.is_zero() {
            return Err(DiffusionError::NoiseAtFinalStep);
        }
    }
    let alpha = s.alpha(k);
    let eps_coef = s.beta(k) / (1.0 - s.alpha_bar(k)).sqrt();
    let inv_sqrt_alpha = alpha.sqrt().recip();
    let mut out = Zip::from(&ak.0)
        .and(&eps_hat.0)
        .map_collect(|&a, &e| (a - eps_coef * e) * inv_sqrt_alpha);
    if let Some(z) = z {
        out.scaled_add(s.sigma(k), &z.0);
    }
    Ok(ActionSeq(out))
}

/// Clean-sample estimate implied by a noise prediction at level `k`.
pub fn predicted_clean(
    s: &NoiseSchedule,
    ak: &ActionSeq,
    eps_hat: &ActionSeq,
    k: usize,
) -> Result<ActionSeq> {
    s.check_step(k)?;
    ak.check_same_shape(eps_hat)?;
    let ab = s.alpha_bar(k);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(ActionSeq(
        Zip::from(&ak.0)
            .and(&eps_hat.0)
            .map_collect(|&a, &e| (a - noise * e) / signal),
    ))
}

/// Noise prediction consistent with the clean estimate clipped to
/// `[-bound, bound]`; unchanged where the estimate already lies inside.
pub fn clip_noise_prediction(
    s: &NoiseSchedule,
    ak: &ActionSeq,
    eps_hat: &ActionSeq,
    k: usize,
    bound: f64,
) -> Result<ActionSeq> {
    let x0 = predicted_clean(s, ak, eps_hat, k)?;
    let ab = s.alpha_bar(k);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(ActionSeq(
        Zip::from(&ak.0)
            .and(&eps_hat.0)
            .and(&x0.0)
            .map_collect(|&a, &e, &x| {
                let c = x.clamp(-bound, bound);
                if c == x {
                    e
                } else {
                    (a - signal * c) / noise
                }
            }),
    ))
}

/// Implicit (DDIM) step from level `k` to any lower level `k_prev`
/// (`0` = clean). `eta = 0` is deterministic; `eta = 1` at adjacent levels
/// reproduces the ancestral posterior mean with variance
/// `beta_k * (1 - ab_{k-1}) / (1 - ab_k)`.
pub fn ddim_reverse_step(
    s: &NoiseSchedule,
    eps_hat: &ActionSeq,
    ak: &ActionSeq,
    k: usize,
    k_prev: usize,
    eta: f64,
    z: Option<&ActionSeq>,
) -> Result<ActionSeq> {
    s.check_step(k)?;
    if k_prev >= k {
        return Err(DiffusionError::StepOrder { k, k_prev });
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(DiffusionError::EtaOutOfRange(eta));
    }
    let x0 = predicted_clean(s, ak, eps_hat, k)?;
    let ab = s.alpha_bar(k);
    let ab_prev = s.alpha_bar(k_prev);
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = Zip::from(&x0.0)
        .and(&eps_hat.0)
        .map_collect(|&x, &e| ab_prev.sqrt() * x + dir * e);
    if let Some(z) = z {
        ak.check_same_shape(z)?;
        out.scaled_add(sigma, &z.0);
    }
    Ok(ActionSeq(out))
}

/// Mean of squared differences over all `T_p * d_a` entries.
pub fn mse_loss(eps: &ActionSeq, eps_hat: &ActionSeq) -> Result<f64> {
    eps.check_same_shape(eps_hat)?;
    let n = eps.0.len() as f64;
    let sum = Zip::from(&eps.0)
        .and(&eps_hat.0)
        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
    Ok(sum / n)
}

/// Per-step weights `w_k = beta_k^2 / (2 alpha_k (1 - ab_k))` and the proposal
/// distribution they induce.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepWeights {
    pub w: Vec<f64>,
    pub q: Vec<f64>,
}

pub fn loss_weight(s: &NoiseSchedule, k: usize) -> Result<f64> {
    s.check_step(k)?;
    let beta = s.beta(k);
    Ok(beta * beta / (2.0 * s.alpha(k) * (1.0 - s.alpha_bar(k))))
}

pub fn theoretical_weights(s: &NoiseSchedule) -> TimestepWeights {
    let w: Vec<f64> = (1..=s.steps())
        .map(|k| loss_weight(s, k).expect("step in range"))
        .collect();
    let total: f64 = w.iter().sum();
    let q = w.iter().map(|x| x / total).collect();
    TimestepWeights { w, q }
}

/// `w_k * mse_loss(eps, eps_hat)`; the squared norm is taken as a mean over
/// entries, consistently with [`mse_loss`].
pub fn weighted_loss(
    s: &NoiseSchedule,
    eps: &ActionSeq,
    eps_hat: &ActionSeq,
    k: usize,
) -> Result<f64> {
    Ok(loss_weight(s, k)? * mse_loss(eps, eps_hat)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn seq(rows: Vec<Vec<f64>>) -> ActionSeq {
        let h = rows.len();
        let d = rows[0].len();
        ActionSeq::from_flat(h, d, rows.into_iter().flatten().collect()).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = make_noise_schedule(1, 0.5, 0.5, BetaScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
        assert!(close(s.sigma(1), 0.5f64.sqrt(), 1e-15));
    }

    #[test]
    fn two_step_hand_products() {
        let s = make_noise_schedule(2, 0.1, 0.2, BetaScheduleKind::Linear).unwrap();
        assert!(close(s.alpha_bar(1), 0.9, 1e-15));
        assert!(close(s.alpha_bar(2), 0.72, 1e-15));
    }

    #[test]
    fn hundred_step_schedule_matches_direct_product() {
        let s = make_noise_schedule(100, 1e-4, 0.02, BetaScheduleKind::Linear).unwrap();
        let mut prod = 1.0;
        for i in 0..100 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 99.0;
            prod *= 1.0 - beta;
            assert!(close(s.alpha_bar(i + 1), prod, 1e-14));
            assert!(close(s.sigmas()[i].powi(2), s.betas()[i], 1e-12));
            assert_eq!(s.alphas()[i], 1.0 - s.betas()[i]);
        }
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(close(s.betas()[0], 1e-4, 1e-18));
        assert!(close(s.betas()[99], 0.02, 1e-15));
    }

    #[test]
    fn schedule_rejects_bad_input() {
        assert_eq!(
            make_noise_schedule(0, 0.1, 0.2, BetaScheduleKind::Linear),
            Err(DiffusionError::NoSteps)
        );
        assert!(make_noise_schedule(3, 0.0, 0.2, BetaScheduleKind::Linear).is_err());
        assert!(make_noise_schedule(3, 0.1, 1.0, BetaScheduleKind::Linear).is_err());
        assert!(make_noise_schedule(3, 0.3, 0.2, BetaScheduleKind::Linear).is_err());
    }

    #[test]
    fn forward_noise_limits() {
        let s = make_noise_schedule(2, 0.1, 0.2, BetaScheduleKind::Linear).unwrap();
        let eps = seq(vec![vec![1.0, -2.0], vec![0.5, 3.0]]);
        let zero = ActionSeq::zeros(2, 2);
        let out = forward_noise(&s, &zero, 2, &eps).unwrap();
        let scale = (1.0 - 0.72f64).sqrt();
        for (o, e) in out.as_array().iter().zip(eps.as_array()) {
            assert!(close(*o, scale * e, 1e-15));
        }
        let bad = ActionSeq::zeros(3, 2);
        assert!(matches!(
            forward_noise(&s, &bad, 1, &eps),
            Err(DiffusionError::ShapeMismatch { .. })
        ));
        assert!(forward_noise(&s, &zero, 3, &eps).is_err());
    }

    #[test]
    fn forward_noise_variance_monte_carlo() {
        let s = make_noise_schedule(100, 1e-4, 0.02, BetaScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a0 = ActionSeq::gaussian(1, 1, &mut rng);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let eps = ActionSeq::gaussian(1, 1, &mut rng);
                forward_noise(&s, &a0, 100, &eps).unwrap().as_array()[[0, 0]]
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expected = 1.0 - s.alpha_bar(100);
        // sampling std of the variance estimate is ~ expected * sqrt(2/n)
        assert!((var - expected).abs() < 5.0 * expected * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn ddpm_step_hand_value() {
        let s = make_noise_schedule(2, 0.1, 0.2, BetaScheduleKind::Linear).unwrap();
        // level 2 has beta 0.2; check level 1 of a schedule whose second step is 0.1
        let s2 = NoiseSchedule::from_betas(vec![0.2, 0.1]).unwrap();
        assert!(close(s2.alpha_bar(2), 0.72, 1e-15));
        let ones = seq(vec![vec![1.0]]);
        let out = ddpm_reverse_step(&s2, &ones, &ones, 2, None).unwrap();
        let expected = (1.0 / 0.9f64.sqrt()) * (1.0 - 0.1 / 0.28f64.sqrt());
        assert!(close(out.as_array()[[0, 0]], expected, 1e-14));
        assert!(ddpm_reverse_step(&s, &ones, &ones, 1, Some(&ones)).is_err());
        assert!(ddpm_reverse_step(&s, &ones, &ones, 1, Some(&seq(vec![vec![0.0]]))).is_ok());
    }

    #[test]
    fn ddpm_near_identity_for_tiny_beta() {
        let s = NoiseSchedule::from_betas(vec![0.1, 1e-15]).unwrap();
        let ak = seq(vec![vec![0.3, -0.7]]);
        let eps = seq(vec![vec![1.0, 1.0]]);
        let out = ddpm_reverse_step(&s, &eps, &ak, 2, None).unwrap();
        for (o, a) in out.as_array().iter().zip(ak.as_array()) {
            assert!(close(*o, *a, 1e-12));
        }
    }

    #[test]
    fn affine_update_matches_ddpm_step() {
        let s = make_noise_schedule(50, 1e-3, 0.2, BetaScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let k = rng.random_range(2..=50);
            let ak = ActionSeq::gaussian(4, 2, &mut rng);
            let eps = ActionSeq::gaussian(4, 2, &mut rng);
            let z = ActionSeq::gaussian(4, 2, &mut rng);
            let a = ddpm_reverse_step(&s, &eps, &ak, k, Some(&z)).unwrap();
            let coeffs = s.reverse_coefficients(k).unwrap();
            let b = affine_action_update(coeffs, &ak, &eps, Some(&z)).unwrap();
            for (x, y) in a.as_array().iter().zip(b.as_array()) {
                assert!(close(*x, *y, 1e-12));
            }
        }
    }

    #[test]
    fn ddim_recovers_clean_sample_with_exact_noise() {
        let s = make_noise_schedule(100, 1e-3, 0.2, BetaScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0 = ActionSeq::gaussian(16, 2, &mut rng);
        let eps = ActionSeq::gaussian(16, 2, &mut rng);
        let ak = forward_noise(&s, &a0, 60, &eps).unwrap();
        let out = ddim_reverse_step(&s, &eps, &ak, 60, 0, 0.0, None).unwrap();
        for (x, y) in out.as_array().iter().zip(a0.as_array()) {
            assert!(close(*x, *y, 1e-12));
        }
        assert!(ddim_reverse_step(&s, &eps, &ak, 60, 60, 0.0, None).is_err());
        assert!(ddim_reverse_step(&s, &eps, &ak, 60, 10, 1.5, None).is_err());
    }

    #[test]
    fn ddim_eta_one_is_ancestral_posterior() {
        let s = make_noise_schedule(100, 1e-3, 0.2, BetaScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in [2usize, 17, 50, 99, 100] {
            let ak = ActionSeq::gaussian(3, 2, &mut rng);
            let eps = ActionSeq::gaussian(3, 2, &mut rng);
            let z = ActionSeq::gaussian(3, 2, &mut rng);
            let mean_ddim = ddim_reverse_step(&s, &eps, &ak, k, k - 1, 1.0, None).unwrap();
            let mean_ddpm = ddpm_reverse_step(&s, &eps, &ak, k, None).unwrap();
            for (x, y) in mean_ddim.as_array().iter().zip(mean_ddpm.as_array()) {
                assert!(close(*x, *y, 1e-10), "k={k}: {x} vs {y}");
            }
            let noisy = ddim_reverse_step(&s, &eps, &ak, k, k - 1, 1.0, Some(&z)).unwrap();
            let var = s.beta(k) * (1.0 - s.alpha_bar(k - 1)) / (1.0 - s.alpha_bar(k));
            for ((n, m), zz) in noisy
                .as_array()
                .iter()
                .zip(mean_ddim.as_array())
                .zip(z.as_array())
            {
                assert!(close(n - m, var.sqrt() * zz, 1e-12));
            }
        }
    }

    #[test]
    fn mse_cases() {
        let a = seq(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let b = ActionSeq::new(a.as_array() - 1.0).unwrap();
        assert_eq!(mse_loss(&a, &b).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = ActionSeq::gaussian(5, 3, &mut rng);
        let y = ActionSeq::gaussian(5, 3, &mut rng);
        let mut naive = 0.0;
        for i in 0..5 {
            for j in 0..3 {
                let d = x.as_array()[[i, j]] - y.as_array()[[i, j]];
                naive += d * d;
            }
        }
        assert!(close(mse_loss(&x, &y).unwrap(), naive / 15.0, 1e-14));
        assert!(mse_loss(&x, &ActionSeq::zeros(3, 5)).is_err());
    }

    #[test]
    fn theoretical_weight_cases() {
        let one = make_noise_schedule(1, 0.3, 0.3, BetaScheduleKind::Linear).unwrap();
        assert_eq!(theoretical_weights(&one).q, vec![1.0]);

        let s = make_noise_schedule(2, 0.1, 0.2, BetaScheduleKind::Linear).unwrap();
        let tw = theoretical_weights(&s);
        let w1 = 0.01 / (2.0 * 0.9 * 0.1);
        let w2 = 0.04 / (2.0 * 0.8 * 0.28);
        assert!(close(tw.w[0], w1, 1e-14));
        assert!(close(tw.w[1], w2, 1e-14));
        assert!(close(tw.q[0], w1 / (w1 + w2), 1e-14));

        let a = array![[1.0], [2.0]];
        let eps = ActionSeq::new(a.clone()).unwrap();
        let eps_hat = ActionSeq::new(a - 2.0).unwrap();
        let wl = weighted_loss(&s, &eps, &eps_hat, 2).unwrap();
        assert!(close(wl, w2 * 4.0, 1e-14));
        assert!(weighted_loss(&s, &eps, &eps_hat, 3).is_err());
    }

    #[test]
    fn theoretical_weights_streaming_agrees() {
        let s = make_noise_schedule(100, 1e-4, 0.02, BetaScheduleKind::Linear).unwrap();
        let tw = theoretical_weights(&s);
        // independent streaming pass that rebuilds ab_k on the fly
        let mut ab = 1.0;
        let mut ws = Vec::new();
        for &beta in s.betas() {
            let alpha = 1.0 - beta;
            ab *= alpha;
            ws.push(beta * beta / (2.0 * alpha * (1.0 - ab)));
        }
        let total: f64 = ws.iter().sum();
        for (q, w) in tw.q.iter().zip(&ws) {
            assert!(close(*q, w / total, 1e-12));
        }
        assert!(close(tw.q.iter().sum::<f64>(), 1.0, 1e-12));
    }

    #[test]
    fn weight_one_reduces_to_mse() {
        // choose beta so that w_1 = beta / (2 (1 - beta)) = 1  =>  beta = 2/3
        let s = NoiseSchedule::from_betas(vec![2.0 / 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = ActionSeq::gaussian(2, 2, &mut rng);
        let b = ActionSeq::gaussian(2, 2, &mut rng);
        assert!(close(
            weighted_loss(&s, &a, &b, 1).unwrap(),
            mse_loss(&a, &b).unwrap(),
            1e-14
        ));
    }

    #[test]
    fn respaced_keeps_cumulative_levels() {
        let s = make_noise_schedule(100, 1e-3, 0.2, BetaScheduleKind::Linear).unwrap();
        let steps = spaced_timesteps(100, 20).unwrap();
        assert_eq!(steps.first(), Some(&5));
        assert_eq!(steps.last(), Some(&100));
        let r = s.respaced(&steps).unwrap();
        for (j, &k) in steps.iter().enumerate() {
            assert!(close(r.alpha_bar(j + 1), s.alpha_bar(k), 1e-12));
        }
        assert_eq!(spaced_timesteps(100, 100).unwrap(), (1..=100).collect::<Vec<_>>());
        assert!(spaced_timesteps(10, 11).is_err());
        let odd = spaced_timesteps(100, 37).unwrap();
        assert!(odd.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(odd.len(), 37);
    }
}
