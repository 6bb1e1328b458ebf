use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::env::EnvConfig;
use super::rollout::{rollout, Budget, EpisodeResult, Planner};
use super::EnvError;
use crate::hvts::StageClassifier;

/// Episodes succeeding within this fraction of `max_steps` count as early
/// successes.
pub const EARLY_FRACTION: f64 = 0.6;

/// `n` initial-condition seeds derived from `seed`.
pub fn episode_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}

/// Aggregate over the episodes of one evaluation seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub label: String,
    pub seed: u64,
    pub episode_seeds: Vec<u64>,
    pub episodes: usize,
    pub success_rate: f64,
    pub early_success_rate: f64,
    /// Pooled denoiser calls over pooled control steps.
    pub calls_per_step: f64,
    pub total_calls: usize,
    pub total_control_steps: usize,
    /// Mean `N_d` over replans.
    pub mean_inference_steps: f64,
    pub classifier_calls: usize,
    /// Seconds spent planning, summed over episodes.
    pub wall_time: f64,
}

impl Metrics {
    pub fn from_results(label: &str, seed: u64, max_steps: usize, results: &[EpisodeResult]) -> Self {
        let n = results.len().max(1) as f64;
        let early_limit = (EARLY_FRACTION * max_steps as f64).floor() as usize;
        let successes = results.iter().filter(|r| r.success).count();
        let early = results
            .iter()
            .filter(|r| r.success_step.is_some_and(|s| s <= early_limit))
            .count();
        let total_calls: usize = results.iter().map(|r| r.denoiser_calls).sum();
        let total_steps: usize = results.iter().map(|r| r.control_steps).sum();
        let replans: usize = results.iter().map(|r| r.trace.len()).sum();
        let planned: usize = results.iter().map(|r| r.scheduled_calls()).sum();
        Self {
            label: label.to_string(),
            seed,
            episode_seeds: results.iter().map(|r| r.seed).collect(),
            episodes: results.len(),
            success_rate: successes as f64 / n,
            early_success_rate: early as f64 / n,
            calls_per_step: if total_steps == 0 {
                0.0
            } else {
                total_calls as f64 / total_steps as f64
            },
            total_calls,
            total_control_steps: total_steps,
            mean_inference_steps: if replans == 0 {
                0.0
            } else {
                planned as f64 / replans as f64
            },
            classifier_calls: results.iter().map(|r| r.classifier_calls).sum(),
            wall_time: results.iter().map(|r| r.wall_time).sum(),
        }
    }
}

/// Runs `episodes` rollouts whose initial conditions and sampling noise are
/// both derived from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<P: Planner + ?Sized>(
    planner: &mut P,
    label: &str,
    env: EnvConfig,
    budget: &Budget,
    episodes: usize,
    seed: u64,
    mut classifier: Option<&mut dyn StageClassifier>,
) -> Result<(Metrics, Vec<EpisodeResult>), EnvError> {
    if episodes == 0 {
        return Err(EnvError::Config("at least one episode is required".into()));
    }
    let seeds = episode_seeds(seed, episodes);
    let noise = episode_seeds(seed ^ 0x6e6f_6973_65, episodes);
    let mut results = Vec::with_capacity(episodes);
    for (&s, &z) in seeds.iter().zip(&noise) {
        let c: Option<&mut dyn StageClassifier> = match classifier {
            Some(ref mut c) => Some(&mut **c),
            None => None,
        };
        results.push(rollout(planner, env, s, budget, c, z)?);
    }
    Ok((Metrics::from_results(label, seed, env.max_steps, &results), results))
}

/// Mean and population standard deviation across evaluation seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: usize,
    pub success_mean: f64,
    pub success_std: f64,
    pub early_success_mean: f64,
    pub early_success_std: f64,
    pub calls_per_step_mean: f64,
}

pub fn summarize(runs: &[Metrics]) -> Summary {
    let n = runs.len().max(1) as f64;
    let mean = |f: &dyn Fn(&Metrics) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let std = |f: &dyn Fn(&Metrics) -> f64, m: f64| {
        (runs.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / n).sqrt()
    };
    let sm = mean(&|r| r.success_rate);
    let em = mean(&|r| r.early_success_rate);
    Summary {
        seeds: runs.len(),
        success_mean: sm,
        success_std: std(&|r| r.success_rate, sm),
        early_success_mean: em,
        early_success_std: std(&|r| r.early_success_rate, em),
        calls_per_step_mean: mean(&|r| r.calls_per_step),
    }
}

/// Efficiency of a candidate relative to a baseline on the same episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub baseline: String,
    pub candidate: String,
    pub baseline_calls_per_step: f64,
    pub candidate_calls_per_step: f64,
    /// Ratio of denoiser calls per control step, baseline over candidate.
    pub speedup: f64,
    /// Ratio of planning wall time, baseline over candidate.
    pub wall_speedup: f64,
    /// Candidate minus baseline success rate, in percentage points.
    pub success_delta: f64,
}

impl SpeedupReport {
    pub fn row(&self, success_rate: f64, mean_inference_steps: f64) -> String {
        format!(
            "{:<14} {:>8.1} {:>8.1} {:>10.2} {:>8.2}x",
            self.candidate,
            100.0 * success_rate,
            mean_inference_steps,
            self.candidate_calls_per_step,
            self.speedup
        )
    }
}

/// Compares pooled metrics (one entry per seed) of two configurations.
pub fn compare_speedup(baseline: &[Metrics], candidate: &[Metrics]) -> Result<SpeedupReport, EnvError> {
    if baseline.is_empty()
        || baseline.len() != candidate.len()
        || baseline
            .iter()
            .zip(candidate)
            .any(|(b, c)| b.seed != c.seed || b.episode_seeds != c.episode_seeds)
    {
        return Err(EnvError::SeedMismatch);
    }
    let pooled = |runs: &[Metrics]| {
        let calls: usize = runs.iter().map(|m| m.total_calls).sum();
        let steps: usize = runs.iter().map(|m| m.total_control_steps).sum();
        let wall: f64 = runs.iter().map(|m| m.wall_time).sum();
        let succ = runs.iter().map(|m| m.success_rate).sum::<f64>() / runs.len() as f64;
        (if steps == 0 { 0.0 } else { calls as f64 / steps as f64 }, wall, succ)
    };
    let (b_cps, b_wall, b_succ) = pooled(baseline);
    let (c_cps, c_wall, c_succ) = pooled(candidate);
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else if num > 0.0 { f64::INFINITY } else { 1.0 };
    Ok(SpeedupReport {
        baseline: baseline[0].label.clone(),
        candidate: candidate[0].label.clone(),
        baseline_calls_per_step: b_cps,
        candidate_calls_per_step: c_cps,
        speedup: ratio(b_cps, c_cps),
        wall_speedup: ratio(b_wall, c_wall),
        success_delta: 100.0 * (c_succ - b_succ),
    })
}

/// `label,seed,episodes,success_rate,early_success_rate,calls_per_step,
/// total_calls,control_steps,mean_inference_steps,classifier_calls`.
///
/// Wall time is left out so that reruns produce identical files.
pub fn write_metrics_csv<W: Write>(rows: &[Metrics], w: W) -> Result<(), EnvError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "label",
        "seed",
        "episodes",
        "success_rate",
        "early_success_rate",
        "calls_per_step",
        "total_calls",
        "control_steps",
        "mean_inference_steps",
        "classifier_calls",
    ])?;
    for m in rows {
        out.write_record([
            m.label.clone(),
            m.seed.to_string(),
            m.episodes.to_string(),
            m.success_rate.to_string(),
            m.early_success_rate.to_string(),
            m.calls_per_step.to_string(),
            m.total_calls.to_string(),
            m.total_control_steps.to_string(),
            m.mean_inference_steps.to_string(),
            m.classifier_calls.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envbench::{ExpertPlanner, RandomPlanner};

    #[test]
    fn expert_succeeds_and_random_fails() {
        let env = EnvConfig::default();
        let mut expert = ExpertPlanner { env, horizon: 16 };
        let (m, _) = evaluate(&mut expert, "expert", env, &Budget::fixed(8, 1), 20, 0, None).unwrap();
        assert_eq!(m.success_rate, 1.0);
        assert!(m.early_success_rate <= m.success_rate);
        let mut random = RandomPlanner { horizon: 16 };
        let (m, _) = evaluate(&mut random, "random", env, &Budget::fixed(8, 1), 20, 0, None).unwrap();
        assert_eq!(m.success_rate, 0.0);
    }

    #[test]
    fn speedup_arithmetic() {
        let mk = |label: &str, calls: usize| Metrics {
            label: label.into(),
            seed: 1,
            episode_seeds: vec![1, 2],
            episodes: 2,
            success_rate: 1.0,
            early_success_rate: 1.0,
            calls_per_step: calls as f64 / 100.0,
            total_calls: calls,
            total_control_steps: 100,
            mean_inference_steps: 0.0,
            classifier_calls: 0,
            wall_time: calls as f64,
        };
        let same = compare_speedup(&[mk("a", 1000)], &[mk("b", 1000)]).unwrap();
        assert_eq!(same.speedup, 1.0);
        let half = compare_speedup(&[mk("a", 1000)], &[mk("b", 500)]).unwrap();
        assert_eq!(half.speedup, 2.0);
        assert_eq!(half.wall_speedup, 2.0);
        let mut other = mk("b", 500);
        other.episode_seeds = vec![9, 9];
        assert!(matches!(compare_speedup(&[mk("a", 1)], &[other]), Err(EnvError::SeedMismatch)));
    }

    #[test]
    fn summary_statistics() {
        let mk = |s: f64| Metrics {
            label: "x".into(),
            seed: 0,
            episode_seeds: vec![],
            episodes: 1,
            success_rate: s,
            early_success_rate: s / 2.0,
            calls_per_step: 1.0,
            total_calls: 0,
            total_control_steps: 0,
            mean_inference_steps: 0.0,
            classifier_calls: 0,
            wall_time: 0.0,
        };
        let s = summarize(&[mk(0.5), mk(1.0)]);
        assert!((s.success_mean - 0.75).abs() < 1e-15);
        assert!((s.success_std - 0.25).abs() < 1e-15);
    }
}
