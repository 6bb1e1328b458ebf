use std::io::Write;

use serde::{Deserialize, Serialize};

use super::AlnError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Gradient steps completed, starting at 1.
    pub step: usize,
    pub loss: f64,
    pub eval_success: Option<f64>,
    pub sampler_entropy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    /// `(step, distribution over 1..=T)`
    pub sampler_snapshots: Vec<(usize, Vec<f64>)>,
    /// `(step, per-trajectory weights)`
    pub weight_snapshots: Vec<(usize, Vec<f64>)>,
    pub gradient_steps: usize,
}

impl TrainReport {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn eval_trace(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.eval_success.map(|s| (r.step, s)))
            .collect()
    }

    /// `step,loss,eval_success,sampler_entropy`; `eval_success` is empty on
    /// steps without an evaluation.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), AlnError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "loss", "eval_success", "sampler_entropy"])?;
        for r in &self.records {
            out.write_record([
                r.step.to_string(),
                r.loss.to_string(),
                r.eval_success.map(|s| s.to_string()).unwrap_or_default(),
                r.sampler_entropy.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// `step,p_1,...,p_T`, one row per snapshot.
    pub fn write_sampler_snapshots<W: Write>(&self, w: W) -> Result<(), AlnError> {
        let mut out = csv::Writer::from_writer(w);
        let width = self.sampler_snapshots.first().map_or(0, |(_, p)| p.len());
        let mut header = vec!["step".to_string()];
        header.extend((1..=width).map(|k| format!("p_{k}")));
        out.write_record(&header)?;
        for (step, p) in &self.sampler_snapshots {
            let mut row = vec![step.to_string()];
            row.extend(p.iter().map(|v| v.to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}
