use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classify::{ClassifyContext, StageClassifier};
use super::{HvtsError, ScheduleTable};

/// Ranked `(stage index, probability)` candidates, most likely first.
#[derive(Debug, Clone, PartialEq)]
pub struct StageBelief(Vec<(usize, f64)>);

impl StageBelief {
    /// Sorts by probability (stable) and checks the probability constraints.
    pub fn new(mut entries: Vec<(usize, f64)>) -> Result<Self, HvtsError> {
        if entries.is_empty() {
            return Err(HvtsError::NoRecognizedStages);
        }
        if entries.iter().any(|(_, p)| !(0.0..=1.0).contains(p)) {
            return Err(HvtsError::Response("probability outside [0, 1]".into()));
        }
        if entries.iter().map(|(_, p)| p).sum::<f64>() > 1.0 + 1e-6 {
            return Err(HvtsError::Response("probabilities sum above 1".into()));
        }
        entries.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(Self(entries))
    }

    pub fn one_hot(stage: usize) -> Self {
        Self(vec![(stage, 1.0)])
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn top(&self) -> usize {
        self.0[0].0
    }
}

/// Picks the top stage when it leads the runner-up by at least `gap`,
/// otherwise samples among the candidates in proportion to probability.
pub fn select_stage<R: Rng + ?Sized>(belief: &StageBelief, gap: f64, rng: &mut R) -> usize {
    let e = belief.entries();
    if e.len() == 1 || e[0].1 - e[1].1 >= gap {
        return e[0].0;
    }
    let total: f64 = e.iter().map(|(_, p)| p).sum();
    if total <= 0.0 {
        return e[0].0;
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for &(stage, p) in e {
        acc += p;
        if u < acc {
            return stage;
        }
    }
    e.iter().rev().find(|(_, p)| *p > 0.0).map_or(e[0].0, |(s, _)| *s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    /// Minimum lead of the top candidate for a deterministic pick.
    pub gap: f64,
    /// Control steps between classifications; `None` follows the active
    /// stage's `N_a`.
    pub period: Option<usize>,
    pub top_k: usize,
    pub initial_stage: usize,
    pub seed: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            gap: 0.2,
            period: None,
            top_k: 3,
            initial_stage: 0,
            seed: 0,
        }
    }
}

/// What one tick decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TickOutcome {
    pub stage: usize,
    pub n_action_steps: usize,
    pub num_inference_steps: usize,
    /// The classifier was consulted on this tick.
    pub classified: bool,
    /// The most recent classification attempt failed.
    pub degraded: bool,
}

/// Per-rollout stage tracking with periodic classification.
#[derive(Debug, Clone)]
pub struct SchedulerState {
    config: SchedulerConfig,
    active: usize,
    since: Option<usize>,
    belief: Option<StageBelief>,
    degraded: bool,
    calls: usize,
    failures: usize,
    rng: ChaCha8Rng,
}

impl SchedulerState {
    pub fn new(config: SchedulerConfig, table: &ScheduleTable) -> Result<Self, HvtsError> {
        table.budget(config.initial_stage)?;
        if config.period == Some(0) {
            return Err(HvtsError::InvalidRanges("classification period must be at least 1".into()));
        }
        Ok(Self {
            active: config.initial_stage,
            since: None,
            belief: None,
            degraded: false,
            calls: 0,
            failures: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
        })
    }

    pub fn active_stage(&self) -> usize {
        self.active
    }

    pub fn belief(&self) -> Option<&StageBelief> {
        self.belief.as_ref()
    }

    pub fn is_degraded(&self) -> bool {
        self.degraded
    }

    pub fn classifier_calls(&self) -> usize {
        self.calls
    }

    pub fn failures(&self) -> usize {
        self.failures
    }

    pub fn period(&self, table: &ScheduleTable) -> usize {
        self.config
            .period
            .unwrap_or_else(|| table.budget(self.active).map_or(1, |(a, _)| a.max(1)))
    }

    /// Advances one control step. Classifies on the first tick and then once
    /// every period; in between, and after a failed classification, the
    /// cached stage's budget is returned.
    pub fn tick<C: StageClassifier + ?Sized>(
        &mut self,
        ctx: &ClassifyContext<'_>,
        classifier: &mut C,
        table: &ScheduleTable,
    ) -> Result<TickOutcome, HvtsError> {
        let due = match self.since {
            None => true,
            Some(s) => s >= self.period(table),
        };
        if due {
            self.calls += 1;
            match classifier.classify(ctx) {
                Ok(belief) => {
                    let stage = select_stage(&belief, self.config.gap, &mut self.rng);
                    if stage < table.len() {
                        self.active = stage;
                        self.belief = Some(belief);
                        self.degraded = false;
                    } else {
                        log::warn!("classifier chose stage {stage} outside the table");
                        self.degraded = true;
                        self.failures += 1;
                    }
                }
                Err(e) => {
                    log::warn!("stage classification failed, keeping stage {}: {e}", self.active);
                    self.degraded = true;
                    self.failures += 1;
                }
            }
            self.since = Some(1);
        } else if let Some(s) = &mut self.since {
            *s += 1;
        }
        let (n_a, n_d) = table.budget(self.active)?;
        Ok(TickOutcome {
            stage: self.active,
            n_action_steps: n_a,
            num_inference_steps: n_d,
            classified: due,
            degraded: self.degraded,
        })
    }
}
