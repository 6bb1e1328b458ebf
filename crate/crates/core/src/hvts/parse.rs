use serde_json::Value;

use super::select::StageBelief;
use super::{
    normalize_description, normalize_name, HvtsError, ScheduleEntry, ScheduleRanges, ScheduleTable,
    StageTemplate,
};

/// Recovers a JSON array from a chatty model response.
///
/// Drops code-fence lines, keeps the text between the first `[` and the last
/// `]`, and deletes commas that directly precede a closing bracket or brace.
pub fn sanitize_json(raw: &str) -> Result<String, HvtsError> {
    let unfenced: String = raw
        .lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n");
    let start = unfenced.find('[').ok_or(HvtsError::NoJsonArray)?;
    let end = unfenced.rfind(']').ok_or(HvtsError::NoJsonArray)?;
    if end < start {
        return Err(HvtsError::NoJsonArray);
    }
    Ok(strip_trailing_commas(&unfenced[start..=end]))
}

fn strip_trailing_commas(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => {
                in_string = true;
                out.push(c);
            }
            ',' => {
                let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
                if !matches!(next, Some(']') | Some('}')) {
                    out.push(c);
                }
            }
            _ => out.push(c),
        }
    }
    out
}

fn objects(text: &str) -> Result<Vec<serde_json::Map<String, Value>>, HvtsError> {
    let value: Value = serde_json::from_str(&sanitize_json(text)?)?;
    let Value::Array(items) = value else {
        return Err(HvtsError::NoJsonArray);
    };
    items
        .into_iter()
        .enumerate()
        .map(|(index, v)| match v {
            Value::Object(m) => Ok(m),
            other => Err(HvtsError::BadEntry {
                index,
                reason: format!("expected an object, found {other}"),
            }),
        })
        .collect()
}

fn string_field(
    obj: &serde_json::Map<String, Value>,
    index: usize,
    key: &str,
) -> Result<String, HvtsError> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(HvtsError::BadEntry {
            index,
            reason: format!("{key} is not a string: {other}"),
        }),
        None => Err(HvtsError::BadEntry {
            index,
            reason: format!("missing {key}"),
        }),
    }
}

fn count_field(
    obj: &serde_json::Map<String, Value>,
    index: usize,
    key: &str,
) -> Result<i64, HvtsError> {
    let bad = |reason: String| HvtsError::BadEntry { index, reason };
    match obj.get(key) {
        Some(Value::Number(n)) => match (n.as_i64(), n.as_f64()) {
            (Some(i), _) => Ok(i),
            (None, Some(f)) if f.is_finite() => Ok(f.round() as i64),
            _ => Err(bad(format!("{key} is not a usable number: {n}"))),
        },
        Some(Value::String(s)) => s
            .trim()
            .parse::<i64>()
            .map_err(|_| bad(format!("{key} is not an integer: {s:?}"))),
        Some(other) => Err(bad(format!("{key} is not a number: {other}"))),
        None => Err(bad(format!("missing {key}"))),
    }
}

/// Parses a stage decomposition response into exactly `expected_n` stages.
pub fn parse_stage_templates(text: &str, expected_n: usize) -> Result<Vec<StageTemplate>, HvtsError> {
    let objs = objects(text)?;
    if objs.len() != expected_n {
        return Err(HvtsError::CountMismatch {
            expected: expected_n,
            found: objs.len(),
        });
    }
    let mut stages: Vec<StageTemplate> = Vec::with_capacity(objs.len());
    for (index, obj) in objs.iter().enumerate() {
        let name = normalize_name(&string_field(obj, index, "name")?);
        if name.is_empty() {
            return Err(HvtsError::BadEntry {
                index,
                reason: "empty name".into(),
            });
        }
        if stages.iter().any(|s| s.name == name) {
            return Err(HvtsError::DuplicateName(name));
        }
        let description = normalize_description(&string_field(obj, index, "description")?);
        stages.push(StageTemplate { name, description });
    }
    Ok(stages)
}

/// Parses a schedule response against the known stages.
///
/// Values are clamped into `ranges`. If no stage received the hardest budget
/// `(a_min, i_max)`, the stage with the largest `N_d` (ties: smaller `N_a`,
/// then earlier stage) is promoted to it. If every stage still shares one
/// budget, all stages but the first drop to `(a_max, i_min)`.
pub fn parse_schedule(
    text: &str,
    stages: &[StageTemplate],
    ranges: &ScheduleRanges,
) -> Result<ScheduleTable, HvtsError> {
    ranges.validate()?;
    if stages.is_empty() {
        return Err(HvtsError::NoStages);
    }
    let mut slots: Vec<Option<(usize, usize)>> = vec![None; stages.len()];
    for (index, obj) in objects(text)?.iter().enumerate() {
        let name = normalize_name(&string_field(obj, index, "name")?);
        let slot = stages
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| HvtsError::UnknownStage(name.clone()))?;
        if slots[slot].is_some() {
            return Err(HvtsError::DuplicateName(name));
        }
        let a = count_field(obj, index, "n_action_steps")?;
        let d = count_field(obj, index, "num_inference_steps")?;
        slots[slot] = Some((clamp(a, ranges.a_min, ranges.a_max), clamp(d, ranges.i_min, ranges.i_max)));
    }
    let mut pairs = Vec::with_capacity(stages.len());
    for (slot, stage) in slots.iter().zip(stages) {
        pairs.push(slot.ok_or_else(|| HvtsError::MissingStage(stage.name.clone()))?);
    }
    apply_fallback(&mut pairs, ranges);
    let entries = stages
        .iter()
        .zip(&pairs)
        .map(|(s, &(a, d))| ScheduleEntry {
            name: s.name.clone(),
            n_action_steps: a,
            num_inference_steps: d,
        })
        .collect();
    ScheduleTable::new(entries, *ranges)
}

fn clamp(v: i64, lo: usize, hi: usize) -> usize {
    v.clamp(lo as i64, hi as i64) as usize
}

fn apply_fallback(pairs: &mut [(usize, usize)], ranges: &ScheduleRanges) {
    let hardest = ranges.hardest();
    if !pairs.contains(&hardest) {
        let mut best = 0;
        for (i, &(a, d)) in pairs.iter().enumerate().skip(1) {
            let (ba, bd) = pairs[best];
            if d > bd || (d == bd && a < ba) {
                best = i;
            }
        }
        pairs[best] = hardest;
    }
    let easiest = (ranges.a_max, ranges.i_min);
    if pairs.len() > 1 && easiest != hardest && pairs.iter().all(|p| *p == pairs[0]) {
        for p in pairs.iter_mut().skip(1) {
            *p = easiest;
        }
    }
}

/// Parses `stage_name: probability` lines into a ranked belief.
///
/// Unknown names are skipped with a warning, a repeated name keeps its
/// largest probability, and probabilities are rescaled only when their sum
/// exceeds one.
pub fn parse_stage_probs(
    text: &str,
    stages: &[StageTemplate],
    top_k: usize,
) -> Result<StageBelief, HvtsError> {
    let mut found: Vec<(usize, f64)> = Vec::new();
    for line in text.lines() {
        let line = line
            .trim()
            .trim_start_matches(|c: char| c == '-' || c == '*' || c.is_whitespace());
        let Some((name, prob)) = line.rsplit_once(':') else {
            continue;
        };
        let name = normalize_name(name.trim_matches(|c: char| c == '`' || c == '"' || c == '\'' || c.is_whitespace()));
        let prob = prob.trim().trim_end_matches('%');
        let Ok(mut p) = prob.parse::<f64>() else {
            log::warn!("ignoring unparseable probability in {line:?}");
            continue;
        };
        if line.trim_end().ends_with('%') {
            p /= 100.0;
        }
        if !p.is_finite() {
            continue;
        }
        let p = p.clamp(0.0, 1.0);
        let Some(idx) = stages.iter().position(|s| s.name == name) else {
            log::warn!("ignoring unknown stage {name:?}");
            continue;
        };
        match found.iter_mut().find(|(i, _)| *i == idx) {
            Some(entry) => entry.1 = entry.1.max(p),
            None => found.push((idx, p)),
        }
    }
    if found.is_empty() {
        return Err(HvtsError::NoRecognizedStages);
    }
    found.sort_by(|a, b| b.1.total_cmp(&a.1));
    found.truncate(top_k.max(1));
    let total: f64 = found.iter().map(|(_, p)| p).sum();
    if total > 1.0 {
        found.iter_mut().for_each(|(_, p)| *p /= total);
    }
    StageBelief::new(found)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stages(names: &[&str]) -> Vec<StageTemplate> {
        names.iter().map(|n| StageTemplate::new(n, "x").unwrap()).collect()
    }

    #[test]
    fn sanitize_cases() {
        let clean = r#"[{"a": 1}]"#;
        assert_eq!(sanitize_json(clean).unwrap(), clean);
        assert_eq!(
            sanitize_json("```json\n[{\"a\": 1},]\n```").unwrap(),
            r#"[{"a": 1}]"#
        );
        assert_eq!(
            sanitize_json("Sure! Here is the result: [ 1, 2 ] Hope this helps").unwrap(),
            "[ 1, 2 ]"
        );
        assert_eq!(sanitize_json(r#"[{"a": "x,]",}]"#).unwrap(), r#"[{"a": "x,]"}]"#);
        assert!(matches!(sanitize_json("no array"), Err(HvtsError::NoJsonArray)));
        assert!(sanitize_json("] then [").is_err());
    }

    #[test]
    fn templates_count_duplicates_and_fields() {
        let ok = r#"[{"name": "reach out", "description": "arm moves"}]"#;
        let t = parse_stage_templates(ok, 1).unwrap();
        assert_eq!(t[0].name, "reach_out");
        assert_eq!(t[0].description, "Action features: arm moves");
        assert!(matches!(parse_stage_templates(ok, 2), Err(HvtsError::CountMismatch { .. })));
        let dup = r#"[{"name": "a b", "description": "x"}, {"name": "a_b", "description": "y"}]"#;
        assert!(matches!(parse_stage_templates(dup, 2), Err(HvtsError::DuplicateName(_))));
        let missing = r#"[{"name": "a"}]"#;
        assert!(matches!(parse_stage_templates(missing, 1), Err(HvtsError::BadEntry { .. })));
    }

    #[test]
    fn schedule_clamps_and_promotes() {
        let s = stages(&["a", "b", "c", "d", "e"]);
        let r = ScheduleRanges::default();
        let same = r#"[{"name":"a","n_action_steps":16,"num_inference_steps":20},
            {"name":"b","n_action_steps":16,"num_inference_steps":20},
            {"name":"c","n_action_steps":16,"num_inference_steps":20},
            {"name":"d","n_action_steps":16,"num_inference_steps":20},
            {"name":"e","n_action_steps":16,"num_inference_steps":20}]"#;
        let t = parse_schedule(same, &s, &r).unwrap();
        assert_eq!(t.budget(0).unwrap(), (8, 40));
        assert!((1..5).all(|i| t.budget(i).unwrap() == (16, 20)));

        let clamp = r#"[{"name":"a","n_action_steps":3,"num_inference_steps":200},
            {"name":"b","n_action_steps":12,"num_inference_steps":30}]"#;
        let t = parse_schedule(clamp, &s[..2], &r).unwrap();
        assert_eq!(t.budget(0).unwrap(), (8, 40));
        assert_eq!(t.budget(1).unwrap(), (12, 30));

        let ties = r#"[{"name":"a","n_action_steps":16,"num_inference_steps":30},
            {"name":"b","n_action_steps":12,"num_inference_steps":30},
            {"name":"c","n_action_steps":12,"num_inference_steps":30}]"#;
        let t = parse_schedule(ties, &s[..3], &r).unwrap();
        assert_eq!(t.budget(1).unwrap(), (8, 40));
        assert_eq!(t.budget(2).unwrap(), (12, 30));
    }

    #[test]
    fn all_hardest_is_spread_out() {
        let s = stages(&["a", "b", "c"]);
        let hard = r#"[{"name":"a","n_action_steps":8,"num_inference_steps":40},
            {"name":"b","n_action_steps":8,"num_inference_steps":40},
            {"name":"c","n_action_steps":8,"num_inference_steps":40}]"#;
        let t = parse_schedule(hard, &s, &ScheduleRanges::default()).unwrap();
        assert_eq!(t.budget(0).unwrap(), (8, 40));
        assert_eq!(t.budget(1).unwrap(), (16, 20));
    }

    #[test]
    fn schedule_errors() {
        let s = stages(&["a", "b"]);
        let r = ScheduleRanges::default();
        let unknown = r#"[{"name":"zz","n_action_steps":8,"num_inference_steps":40}]"#;
        assert!(matches!(parse_schedule(unknown, &s, &r), Err(HvtsError::UnknownStage(_))));
        let missing = r#"[{"name":"a","n_action_steps":8,"num_inference_steps":40}]"#;
        assert!(matches!(parse_schedule(missing, &s, &r), Err(HvtsError::MissingStage(_))));
        let bad = r#"[{"name":"a","n_action_steps":"many","num_inference_steps":40}]"#;
        assert!(matches!(parse_schedule(bad, &s, &r), Err(HvtsError::BadEntry { .. })));
    }

    #[test]
    fn probs_sorted_and_filtered() {
        let s = stages(&["a", "b", "c", "d"]);
        let b = parse_stage_probs("c: 0.1\na: 0.7\nb: 0.2\n", &s, 3).unwrap();
        assert_eq!(b.entries(), &[(0, 0.7), (1, 0.2), (2, 0.1)]);
        let b = parse_stage_probs("- a: 0.5\nmystery: 0.4\nd: 0.1", &s, 3).unwrap();
        assert_eq!(b.entries(), &[(0, 0.5), (3, 0.1)]);
        let b = parse_stage_probs("a: 0.9\nb: 0.9", &s, 3).unwrap();
        assert!((b.entries()[0].1 - 0.5).abs() < 1e-12);
        let b = parse_stage_probs("a: 80%\nb: 20%", &s, 3).unwrap();
        assert!((b.entries()[0].1 - 0.8).abs() < 1e-12);
        assert!(matches!(parse_stage_probs("hello", &s, 3), Err(HvtsError::NoRecognizedStages)));
    }
}
