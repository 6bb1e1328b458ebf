use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::env::{scripted_expert, EnvConfig, PushEnv, ACTION_DIM, OBS_DIM};
use super::EnvError;
use crate::aln::TrainingData;

const MAGIC: &[u8; 4] = b"DPDS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Standard deviation of Gaussian noise added to expert actions.
    pub noise_level: f64,
    /// Action window length.
    pub horizon: usize,
    pub env: EnvConfig,
    /// Attempts allowed per requested episode before giving up.
    pub attempts_per_episode: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            seed: 0,
            noise_level: 0.1,
            horizon: 16,
            env: EnvConfig::default(),
            attempts_per_episode: 20,
        }
    }
}

/// One successful demonstration.
///
/// `observations[t]` is seen before `actions[t]` is executed. After the
/// success step the record is padded with `horizon - 1` zero actions (the
/// state no longer changes), so every executed step starts a full window and
/// the window count is `len - horizon + 1 = success_step`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub success_step: usize,
    observations: Vec<f64>,
    actions: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len() / ACTION_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn observation(&self, t: usize) -> &[f64] {
        &self.observations[t * OBS_DIM..(t + 1) * OBS_DIM]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.actions[t * ACTION_DIM..(t + 1) * ACTION_DIM]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub horizon: usize,
    pub noise_level: f64,
    pub seed: u64,
    pub env: EnvConfig,
    trajectories: Vec<Trajectory>,
}

impl DemoDataset {
    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn obs_dim(&self) -> usize {
        OBS_DIM
    }

    pub fn action_dim(&self) -> usize {
        ACTION_DIM
    }

    pub fn total_windows(&self) -> usize {
        (0..self.trajectories.len()).map(|i| self.num_windows(i)).sum()
    }

    /// Keeps only the given trajectories, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            trajectories: indices.iter().map(|&i| self.trajectories[i].clone()).collect(),
            ..self.clone()
        }
    }

    /// Layout (little-endian):
    ///
    /// ```text
    /// magic "DPDS" | version u32 | obs_dim u32 | action_dim u32 | horizon u32
    /// noise f64 | seed u64 | contact_radius f64 | target_tolerance f64
    /// max_steps u64 | step_size f64 | count u64
    /// per trajectory: seed u64 | success_step u64 | len u64
    ///                 len*obs_dim f64 observations | len*action_dim f64 actions
    /// ```
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), EnvError> {
        w.write_all(MAGIC)?;
        for v in [VERSION, OBS_DIM as u32, ACTION_DIM as u32, self.horizon as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.noise_level.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.env.contact_radius.to_le_bytes())?;
        w.write_all(&self.env.target_tolerance.to_le_bytes())?;
        w.write_all(&(self.env.max_steps as u64).to_le_bytes())?;
        w.write_all(&self.env.step_size.to_le_bytes())?;
        w.write_all(&(self.trajectories.len() as u64).to_le_bytes())?;
        for t in &self.trajectories {
            for v in [t.seed, t.success_step as u64, t.len() as u64] {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in t.observations.iter().chain(&t.actions) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, EnvError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(EnvError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(EnvError::Format(format!("unsupported version {version}")));
        }
        let (obs_dim, action_dim) = (read_u32(&mut r)? as usize, read_u32(&mut r)? as usize);
        if obs_dim != OBS_DIM || action_dim != ACTION_DIM {
            return Err(EnvError::Format(format!("dims {obs_dim}/{action_dim} do not match this environment")));
        }
        let horizon = read_u32(&mut r)? as usize;
        if horizon == 0 {
            return Err(EnvError::Format("zero horizon".into()));
        }
        let noise_level = read_f64(&mut r)?;
        let seed = read_u64(&mut r)?;
        let env = EnvConfig {
            contact_radius: read_f64(&mut r)?,
            target_tolerance: read_f64(&mut r)?,
            max_steps: read_u64(&mut r)? as usize,
            step_size: read_f64(&mut r)?,
        };
        let count = read_u64(&mut r)? as usize;
        if count == 0 {
            return Err(EnvError::Format("no trajectories".into()));
        }
        let mut trajectories = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let tseed = read_u64(&mut r)?;
            let success_step = read_u64(&mut r)? as usize;
            let len = read_u64(&mut r)? as usize;
            if len < horizon || success_step != len + 1 - horizon {
                return Err(EnvError::Format(format!("inconsistent trajectory length {len}")));
            }
            let observations = read_f64s(&mut r, len * OBS_DIM)?;
            let actions = read_f64s(&mut r, len * ACTION_DIM)?;
            trajectories.push(Trajectory {
                seed: tseed,
                success_step,
                observations,
                actions,
            });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(EnvError::Format(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            horizon,
            noise_level,
            seed,
            env,
            trajectories,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
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
    Ok(f64::from_bits(read_u64(r)?))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    (0..n).map(|_| read_f64(r)).collect()
}

impl TrainingData for DemoDataset {
    fn num_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    fn num_windows(&self, trajectory: usize) -> usize {
        self.trajectories[trajectory].len() + 1 - self.horizon
    }

    fn window(&self, trajectory: usize, index: usize) -> (&[f64], &[f64]) {
        let t = &self.trajectories[trajectory];
        (
            t.observation(index),
            &t.actions[index * ACTION_DIM..(index + self.horizon) * ACTION_DIM],
        )
    }
}

/// Records `config.episodes` successful noisy-expert episodes.
///
/// Each attempt uses a fresh initial condition; failed attempts are dropped.
/// The recorded action is the perturbed, clipped action actually executed.
pub fn generate_demos(config: &DemoConfig) -> Result<DemoDataset, EnvError> {
    if config.episodes == 0 {
        return Err(EnvError::Config("at least one episode is required".into()));
    }
    if config.horizon == 0 {
        return Err(EnvError::Config("horizon must be at least 1".into()));
    }
    if !(config.noise_level >= 0.0 && config.noise_level.is_finite()) {
        return Err(EnvError::Config("noise level must be finite and non-negative".into()));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
    let budget = config.episodes * config.attempts_per_episode.max(1);
    let mut trajectories = Vec::with_capacity(config.episodes);
    let mut attempts = 0;
    while trajectories.len() < config.episodes {
        if attempts == budget {
            return Err(EnvError::ExpertBudget {
                wanted: config.episodes,
                found: trajectories.len(),
                attempts,
            });
        }
        attempts += 1;
        let seed: u64 = seeds.random();
        if let Some(t) = record_episode(config, seed)? {
            trajectories.push(t);
        }
    }
    Ok(DemoDataset {
        horizon: config.horizon,
        noise_level: config.noise_level,
        seed: config.seed,
        env: config.env,
        trajectories,
    })
}

fn record_episode(config: &DemoConfig, seed: u64) -> Result<Option<Trajectory>, EnvError> {
    let mut env = PushEnv::reset(config.env, seed);
    let mut noise = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_6531);
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    while !env.is_done() {
        observations.extend_from_slice(&env.observation());
        let mut a = scripted_expert(&env);
        if config.noise_level > 0.0 {
            for v in &mut a {
                let z: f64 = noise.sample(StandardNormal);
                *v = (*v + config.noise_level * z).clamp(-1.0, 1.0);
            }
        }
        actions.extend_from_slice(&a);
        env.step(&a)?;
    }
    let Some(success_step) = env.success_step() else {
        return Ok(None);
    };
    if success_step == 0 {
        return Ok(None);
    }
    let last = env.observation();
    for _ in 1..config.horizon {
        observations.extend_from_slice(&last);
        actions.extend_from_slice(&[0.0; ACTION_DIM]);
    }
    Ok(Some(Trajectory {
        seed,
        success_step,
        observations,
        actions,
    }))
}

/// Re-executes the recorded actions open loop from the recorded initial
/// condition; returns the resulting environment.
pub fn replay(dataset: &DemoDataset, index: usize) -> Result<PushEnv, EnvError> {
    let t = &dataset.trajectories[index];
    let mut env = PushEnv::reset(dataset.env, t.seed);
    for step in 0..t.success_step {
        if env.is_done() {
            break;
        }
        env.step(t.action(step))?;
    }
    Ok(env)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(noise: f64) -> DemoConfig {
        DemoConfig {
            episodes: 5,
            seed: 4,
            noise_level: noise,
            ..Default::default()
        }
    }

    #[test]
    fn window_count_matches_slicing() {
        let d = generate_demos(&small(0.1)).unwrap();
        for (i, t) in d.trajectories().iter().enumerate() {
            assert_eq!(d.num_windows(i), t.len() - d.horizon + 1);
            assert_eq!(d.num_windows(i), t.success_step);
            let (o, a) = d.window(i, d.num_windows(i) - 1);
            assert_eq!(o.len(), OBS_DIM);
            assert_eq!(a.len(), d.horizon * ACTION_DIM);
        }
    }

    #[test]
    fn noiseless_demos_replay_to_success() {
        let d = generate_demos(&small(0.0)).unwrap();
        for i in 0..d.trajectories().len() {
            assert!(replay(&d, i).unwrap().is_success());
        }
    }

    #[test]
    fn file_round_trip() {
        let d = generate_demos(&small(0.2)).unwrap();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DPDS");
        assert_eq!(DemoDataset::read_from(buf.as_slice()).unwrap(), d);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(DemoDataset::read_from(bad.as_slice()).is_err());
        assert!(DemoDataset::read_from(&buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(generate_demos(&small(0.3)).unwrap(), generate_demos(&small(0.3)).unwrap());
        assert!(generate_demos(&DemoConfig { episodes: 0, ..small(0.0) }).is_err());
    }
}
