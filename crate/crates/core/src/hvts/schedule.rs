use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{normalize_name, HvtsError, ScheduleEntry, StageTemplate};

/// Inclusive bounds on the action horizon and the denoising step count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleRanges {
    pub a_min: usize,
    pub a_max: usize,
    pub i_min: usize,
    pub i_max: usize,
}

impl Default for ScheduleRanges {
    fn default() -> Self {
        Self {
            a_min: 8,
            a_max: 16,
            i_min: 20,
            i_max: 40,
        }
    }
}

impl ScheduleRanges {
    pub fn validate(&self) -> Result<(), HvtsError> {
        if self.a_min == 0 || self.i_min == 0 {
            return Err(HvtsError::InvalidRanges("lower bounds must be at least 1".into()));
        }
        if self.a_min > self.a_max || self.i_min > self.i_max {
            return Err(HvtsError::InvalidRanges(format!(
                "[{}, {}] / [{}, {}] is empty",
                self.a_min, self.a_max, self.i_min, self.i_max
            )));
        }
        Ok(())
    }

    pub fn contains(&self, n_a: usize, n_d: usize) -> bool {
        (self.a_min..=self.a_max).contains(&n_a) && (self.i_min..=self.i_max).contains(&n_d)
    }

    /// The budget reserved for the most precision-critical stage.
    pub fn hardest(&self) -> (usize, usize) {
        (self.a_min, self.i_max)
    }
}

/// Per-stage `(N_a, N_d)` lookup, ordered like the stage templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleTable {
    entries: Vec<ScheduleEntry>,
    ranges: ScheduleRanges,
}

impl ScheduleTable {
    /// Builds a table from already-decided entries; every value must lie
    /// within `ranges` and names must be unique.
    pub fn new(entries: Vec<ScheduleEntry>, ranges: ScheduleRanges) -> Result<Self, HvtsError> {
        ranges.validate()?;
        if entries.is_empty() {
            return Err(HvtsError::NoStages);
        }
        for (i, e) in entries.iter().enumerate() {
            if e.name.is_empty() || e.name != normalize_name(&e.name) {
                return Err(HvtsError::BadEntry {
                    index: i,
                    reason: format!("invalid stage name {:?}", e.name),
                });
            }
            if entries[..i].iter().any(|p| p.name == e.name) {
                return Err(HvtsError::DuplicateName(e.name.clone()));
            }
            if !ranges.contains(e.n_action_steps, e.num_inference_steps) {
                return Err(HvtsError::OutOfRange(format!(
                    "{} has ({}, {})",
                    e.name, e.n_action_steps, e.num_inference_steps
                )));
            }
        }
        Ok(Self { entries, ranges })
    }

    /// Table from `(N_a, N_d)` pairs with generated names `stage_0..`.
    pub fn from_pairs(pairs: &[(usize, usize)], ranges: ScheduleRanges) -> Result<Self, HvtsError> {
        let entries = pairs
            .iter()
            .enumerate()
            .map(|(i, &(a, d))| ScheduleEntry {
                name: format!("stage_{i}"),
                n_action_steps: a,
                num_inference_steps: d,
            })
            .collect();
        Self::new(entries, ranges)
    }

    pub fn entries(&self) -> &[ScheduleEntry] {
        &self.entries
    }

    pub fn ranges(&self) -> ScheduleRanges {
        self.ranges
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// `(N_a, N_d)` for the stage at `index`.
    pub fn budget(&self, index: usize) -> Result<(usize, usize), HvtsError> {
        self.entries
            .get(index)
            .map(|e| (e.n_action_steps, e.num_inference_steps))
            .ok_or(HvtsError::StageIndex {
                index,
                len: self.entries.len(),
            })
    }

    pub fn has_hardest(&self) -> bool {
        let (a, d) = self.ranges.hardest();
        self.entries
            .iter()
            .any(|e| e.n_action_steps == a && e.num_inference_steps == d)
    }

    /// Pretty JSON array with four-space indentation, no trailing newline.
    pub fn to_json(&self) -> String {
        pretty_json(&self.entries)
    }

    /// Strict load: every value must already be within `ranges`.
    pub fn from_json(text: &str, ranges: ScheduleRanges) -> Result<Self, HvtsError> {
        let entries: Vec<ScheduleEntry> = serde_json::from_str(text)?;
        Self::new(entries, ranges)
    }

    pub fn save(&self, path: &Path) -> Result<(), HvtsError> {
        std::fs::write(path, format!("{}\n", self.to_json()))?;
        Ok(())
    }

    pub fn load(path: &Path, ranges: ScheduleRanges) -> Result<Self, HvtsError> {
        Self::from_json(&std::fs::read_to_string(path)?, ranges)
    }
}

pub(crate) fn pretty_json<T: Serialize>(value: &T) -> String {
    let mut out = Vec::new();
    let fmt = serde_json::ser::PrettyFormatter::with_indent(b"    ");
    let mut ser = serde_json::Serializer::with_formatter(&mut out, fmt);
    value.serialize(&mut ser).expect("in-memory serialization");
    String::from_utf8(out).expect("serde_json emits UTF-8")
}

/// Same layout as [`ScheduleTable::to_json`].
pub fn stages_to_json(stages: &[StageTemplate]) -> String {
    pretty_json(&stages)
}

/// Strict load of a stage template file.
pub fn stages_from_json(text: &str) -> Result<Vec<StageTemplate>, HvtsError> {
    let stages: Vec<StageTemplate> = serde_json::from_str(text)?;
    if stages.is_empty() {
        return Err(HvtsError::NoStages);
    }
    for (i, s) in stages.iter().enumerate() {
        if s.name.is_empty() || s.name != normalize_name(&s.name) {
            return Err(HvtsError::BadEntry {
                index: i,
                reason: format!("invalid stage name {:?}", s.name),
            });
        }
        if stages[..i].iter().any(|p| p.name == s.name) {
            return Err(HvtsError::DuplicateName(s.name.clone()));
        }
    }
    Ok(stages)
}
