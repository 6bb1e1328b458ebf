use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EnvError;

pub const OBS_DIM: usize = 6;
pub const ACTION_DIM: usize = 2;

/// Block-to-target distance below which the task is in its final reach.
pub const REACH_RADIUS: f64 = 0.1;
/// Agent-to-block distance below which the agent counts as aligning.
pub const ALIGN_RADIUS: f64 = 0.15;
/// Extra distance beyond the contact radius still counted as touching.
pub const CONTACT_SLACK: f64 = 0.015;
/// Minimum cosine between agent-to-block and block-to-target for a push.
pub const PUSH_COS: f64 = 0.9;
/// Gain applied to the relative offsets in observations.
pub const OFFSET_SCALE: f64 = 4.0;
/// Half-width, in radians, of the cone behind the block where the agent starts.
pub const SPAWN_HALF_ANGLE: f64 = std::f64::consts::FRAC_PI_3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub contact_radius: f64,
    pub target_tolerance: f64,
    pub max_steps: usize,
    /// Displacement per unit action per step.
    pub step_size: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            contact_radius: 0.05,
            target_tolerance: 0.03,
            max_steps: 200,
            step_size: 0.015,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Approach,
    Align,
    Push,
    Reach,
    Complete,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Approach,
        Stage::Align,
        Stage::Push,
        Stage::Reach,
        Stage::Complete,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Stage> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Approach => "approach",
            Stage::Align => "align",
            Stage::Push => "push",
            Stage::Reach => "reach",
            Stage::Complete => "complete",
        }
    }
}

type Vec2 = [f64; 2];

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn add_scaled(a: Vec2, b: Vec2, s: f64) -> Vec2 {
    [a[0] + s * b[0], a[1] + s * b[1]]
}

fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn norm(a: Vec2) -> f64 {
    dot(a, a).sqrt()
}

fn clamp_unit_square(a: Vec2) -> Vec2 {
    [a[0].clamp(0.0, 1.0), a[1].clamp(0.0, 1.0)]
}

/// Point agent pushing a disc-shaped block towards a target on `[0, 1]^2`.
///
/// The agent moves by `step_size * clip(action, -1, 1)`. A move that ends
/// closer than `contact_radius` to the block while heading into it carries
/// the block along by the same displacement (full-friction contact); any
/// remaining overlap is resolved along the agent-to-block line.
#[derive(Debug, Clone, PartialEq)]
pub struct PushEnv {
    pub config: EnvConfig,
    pub agent: Vec2,
    pub block: Vec2,
    pub target: Vec2,
    steps: usize,
    success_step: Option<usize>,
}

impl PushEnv {
    pub fn from_state(config: EnvConfig, agent: Vec2, block: Vec2, target: Vec2) -> Self {
        let mut env = Self {
            config,
            agent,
            block,
            target,
            steps: 0,
            success_step: None,
        };
        if env.block_distance() < config.target_tolerance {
            env.success_step = Some(0);
        }
        env
    }

    /// Random initial condition drawn from `seed`: target and block inside
    /// `[0.2, 0.8]^2` between 0.2 and 0.5 apart, agent 0.15 to 0.3 from the
    /// block within [`SPAWN_HALF_ANGLE`] of the side facing away from the
    /// target.
    pub fn reset(config: EnvConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let point = |rng: &mut ChaCha8Rng| -> Vec2 { [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)] };
        let target = point(&mut rng);
        let block = loop {
            let b = point(&mut rng);
            if (0.2..=0.5).contains(&norm(sub(b, target))) {
                break b;
            }
        };
        let away = sub(block, target);
        let back = away[1].atan2(away[0]);
        let agent = loop {
            let angle = back + rng.random_range(-SPAWN_HALF_ANGLE..SPAWN_HALF_ANGLE);
            let dist = rng.random_range(0.15..0.3);
            let a = [block[0] + dist * angle.cos(), block[1] + dist * angle.sin()];
            if a.iter().all(|v| (0.05..=0.95).contains(v)) {
                break a;
            }
        };
        Self::from_state(config, agent, block, target)
    }

    /// Rebuilds the state encoded by an observation.
    pub fn from_observation(config: EnvConfig, obs: &[f64]) -> Result<Self, EnvError> {
        if obs.len() != OBS_DIM {
            return Err(EnvError::ObservationWidth(obs.len()));
        }
        let agent = [(obs[0] + 1.0) / 2.0, (obs[1] + 1.0) / 2.0];
        let block = add_scaled(agent, [obs[2], obs[3]], 1.0 / OFFSET_SCALE);
        let target = add_scaled(block, [obs[4], obs[5]], 1.0 / OFFSET_SCALE);
        Ok(Self::from_state(config, agent, block, target))
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn success_step(&self) -> Option<usize> {
        self.success_step
    }

    pub fn is_success(&self) -> bool {
        self.success_step.is_some()
    }

    pub fn is_done(&self) -> bool {
        self.is_success() || self.steps >= self.config.max_steps
    }

    pub fn block_distance(&self) -> f64 {
        norm(sub(self.block, self.target))
    }

    /// Agent position mapped to `[-1, 1]`, followed by the block-from-agent
    /// and target-from-block offsets scaled by [`OFFSET_SCALE`].
    pub fn observation(&self) -> [f64; OBS_DIM] {
        let ab = sub(self.block, self.agent);
        let bt = sub(self.target, self.block);
        [
            2.0 * self.agent[0] - 1.0,
            2.0 * self.agent[1] - 1.0,
            OFFSET_SCALE * ab[0],
            OFFSET_SCALE * ab[1],
            OFFSET_SCALE * bt[0],
            OFFSET_SCALE * bt[1],
        ]
    }

    /// Geometric stage:
    ///
    /// | stage    | condition (first match wins)                                   |
    /// |----------|----------------------------------------------------------------|
    /// | complete | block within `target_tolerance` of the target                  |
    /// | reach    | block within [`REACH_RADIUS`] of the target                    |
    /// | push     | agent touching the block from behind (cosine >= [`PUSH_COS`])  |
    /// | align    | agent within [`ALIGN_RADIUS`] of the block                     |
    /// | approach | otherwise                                                      |
    pub fn stage(&self) -> Stage {
        let bt = self.block_distance();
        if bt < self.config.target_tolerance {
            return Stage::Complete;
        }
        if bt < REACH_RADIUS {
            return Stage::Reach;
        }
        let ab = sub(self.block, self.agent);
        let dist = norm(ab);
        let to_target = sub(self.target, self.block);
        if dist <= self.config.contact_radius + CONTACT_SLACK
            && dist > 0.0
            && dot(ab, to_target) >= PUSH_COS * dist * bt
        {
            return Stage::Push;
        }
        if dist < ALIGN_RADIUS {
            return Stage::Align;
        }
        Stage::Approach
    }

    pub fn step(&mut self, action: &[f64]) -> Result<([f64; OBS_DIM], bool), EnvError> {
        if self.is_done() {
            return Err(EnvError::StepAfterDone);
        }
        if action.len() != ACTION_DIM {
            return Err(EnvError::ActionWidth(action.len()));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction);
        }
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let before = self.agent;
        self.agent = clamp_unit_square(add_scaled(before, a, self.config.step_size));
        let moved = sub(self.agent, before);
        let r = self.config.contact_radius;
        if norm(sub(self.block, self.agent)) < r && dot(moved, sub(self.block, before)) > 0.0 {
            self.block = clamp_unit_square(add_scaled(self.block, moved, 1.0));
        }
        let rel = sub(self.block, self.agent);
        let dist = norm(rel);
        if dist < r {
            let dir = if dist > 1e-12 {
                [rel[0] / dist, rel[1] / dist]
            } else {
                let n = norm(a).max(1e-12);
                [a[0] / n, a[1] / n]
            };
            self.block = clamp_unit_square(add_scaled(self.agent, dir, r));
        }
        self.steps += 1;
        if self.block_distance() < self.config.target_tolerance {
            self.success_step = Some(self.steps);
        }
        Ok((self.observation(), self.is_done()))
    }
}

/// Proportional controller: gets behind the block (detouring around it when
/// the direct path would bump it), then drives it along the block-to-target
/// line. Deterministic; the returned action has norm at most one.
pub fn scripted_expert(env: &PushEnv) -> [f64; ACTION_DIM] {
    let r = env.config.contact_radius;
    let to_target = sub(env.target, env.block);
    let dist_bt = norm(to_target);
    if dist_bt < env.config.target_tolerance || dist_bt < 1e-12 {
        return [0.0, 0.0];
    }
    let d = [to_target[0] / dist_bt, to_target[1] / dist_bt];
    let rel = sub(env.agent, env.block);
    let along = dot(rel, d);
    let lateral = norm(add_scaled(rel, d, -along));
    let aligned = along < 0.0 && lateral < 0.015 && norm(rel) < r + 0.03;

    let goal = if aligned {
        add_scaled(env.target, d, -r)
    } else {
        let behind = add_scaled(env.block, d, -(r + 0.02));
        if segment_distance(env.agent, behind, env.block) < r + 0.005 {
            let n0 = [-d[1], d[0]];
            let n = if dot(rel, n0) >= 0.0 { n0 } else { [-n0[0], -n0[1]] };
            add_scaled(add_scaled(env.block, n, r + 0.05), d, -0.03)
        } else {
            behind
        }
    };
    let delta = sub(goal, env.agent);
    let scaled = [delta[0] / env.config.step_size, delta[1] / env.config.step_size];
    let n = norm(scaled);
    if n > 1.0 {
        [scaled[0] / n, scaled[1] / n]
    } else {
        scaled
    }
}

/// Distance from `p` to the segment `a`-`b`.
fn segment_distance(a: Vec2, b: Vec2, p: Vec2) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 {
        (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    norm(sub(p, add_scaled(a, ab, t)))
}

/// Runs the expert from `env` until the episode ends.
pub fn run_expert(env: &mut PushEnv) -> Result<(), EnvError> {
    while !env.is_done() {
        let a = scripted_expert(env);
        env.step(&a)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EnvConfig {
        EnvConfig::default()
    }

    #[test]
    fn zero_action_changes_nothing() {
        let mut env = PushEnv::reset(cfg(), 3);
        let before = env.clone();
        env.step(&[0.0, 0.0]).unwrap();
        assert_eq!(env.agent, before.agent);
        assert_eq!(env.block, before.block);
        assert_eq!(env.steps(), 1);
    }

    #[test]
    fn contact_pushes_block_to_contact_distance() {
        let wide = EnvConfig { step_size: 0.03, ..cfg() };
        let mut env = PushEnv::from_state(wide, [0.4, 0.5], [0.47, 0.5], [0.8, 0.5]);
        env.step(&[1.0, 0.0]).unwrap();
        assert!((env.agent[0] - 0.43).abs() < 1e-12);
        assert!((env.block[0] - 0.50).abs() < 1e-12);
        assert_eq!(env.block[1], 0.5);
    }

    #[test]
    fn oblique_contact_carries_block_along() {
        let wide = EnvConfig { step_size: 0.03, ..cfg() };
        let mut env = PushEnv::from_state(wide, [0.4, 0.5], [0.46, 0.53], [0.8, 0.5]);
        env.step(&[1.0, 0.0]).unwrap();
        assert!((env.block[0] - 0.49).abs() < 1e-12);
        assert!((env.block[1] - 0.53).abs() < 1e-12);
    }

    #[test]
    fn moving_away_leaves_block() {
        let mut env = PushEnv::from_state(cfg(), [0.46, 0.5], [0.5, 0.5], [0.8, 0.5]);
        env.step(&[-1.0, 0.0]).unwrap();
        assert_eq!(env.block, [0.5, 0.5]);
    }

    #[test]
    fn step_after_done_is_an_error() {
        let mut env = PushEnv::from_state(
            EnvConfig {
                max_steps: 1,
                ..cfg()
            },
            [0.1, 0.1],
            [0.5, 0.5],
            [0.8, 0.8],
        );
        env.step(&[0.0, 0.0]).unwrap();
        assert!(matches!(env.step(&[0.0, 0.0]), Err(EnvError::StepAfterDone)));
    }

    #[test]
    fn stage_thresholds_on_hand_built_states() {
        let t = [0.8, 0.5];
        let at = |agent, block| PushEnv::from_state(cfg(), agent, block, t).stage();
        assert_eq!(at([0.1, 0.1], [0.5, 0.5]), Stage::Approach);
        assert_eq!(at([0.5, 0.62], [0.5, 0.5]), Stage::Align);
        assert_eq!(at([0.45, 0.5], [0.5, 0.5]), Stage::Push);
        // touching, but from the target side
        assert_eq!(at([0.55, 0.5], [0.5, 0.5]), Stage::Align);
        assert_eq!(at([0.1, 0.1], [0.72, 0.5]), Stage::Reach);
        assert_eq!(at([0.1, 0.1], [0.79, 0.5]), Stage::Complete);
    }

    #[test]
    fn expert_at_target_is_idle_and_bounded() {
        let env = PushEnv::from_state(cfg(), [0.2, 0.2], [0.8, 0.5], [0.8, 0.5]);
        assert_eq!(scripted_expert(&env), [0.0, 0.0]);
        for seed in 0..50 {
            let a = scripted_expert(&PushEnv::reset(cfg(), seed));
            assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn expert_solves_every_seed() {
        for seed in 0..100 {
            let mut env = PushEnv::reset(cfg(), seed);
            run_expert(&mut env).unwrap();
            assert!(env.is_success(), "seed {seed} failed at {:?}", env);
        }
    }

    #[test]
    fn observation_round_trip() {
        let env = PushEnv::reset(cfg(), 9);
        let back = PushEnv::from_observation(cfg(), &env.observation()).unwrap();
        for (a, b) in back.agent.iter().chain(&back.block).zip(env.agent.iter().chain(&env.block)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
