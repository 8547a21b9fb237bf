//! Expected exposure accounting.
//!
//! The expected exposure of a dataset is the number of sampling steps a
//! schedule is expected to spend on it after alignment:
//! `E(d) = Σ_{s ≥ 2} T_s · π_s(d)`. It is blind to stage order; order effects
//! only show up in the realized manifest and in training dynamics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::schedule::{structural_violations, DatasetGroup, Registry, ScheduleCondition};

pub const DEFAULT_WARN_THRESHOLD: f64 = 0.10;

/// Expected post-alignment exposure of one condition, in steps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exposure {
    pub condition: String,
    pub post_alignment_steps: u64,
    pub by_dataset: BTreeMap<String, f64>,
}

impl Exposure {
    pub fn get(&self, dataset: &str) -> f64 {
        self.by_dataset.get(dataset).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.by_dataset.values().sum()
    }
}

pub fn compute_exposure(cond: &ScheduleCondition) -> Result<Exposure> {
    let violations = structural_violations(cond);
    if !violations.is_empty() {
        return Err(Error::InvalidCondition {
            id: cond.id.clone(),
            violations,
        });
    }
    let mut by_dataset: BTreeMap<String, f64> = cond
        .stages
        .iter()
        .flat_map(|s| s.distribution.keys())
        .map(|k| (k.clone(), 0.0))
        .collect();
    for stage in cond.post_alignment() {
        let steps = stage.steps as f64;
        for (name, &p) in &stage.distribution {
            *by_dataset.get_mut(name).expect("seeded above") += steps * p;
        }
    }
    Ok(Exposure {
        condition: cond.id.clone(),
        post_alignment_steps: cond.post_alignment_steps(),
        by_dataset,
    })
}

/// Spread of one quantity across the compared conditions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Deviation {
    pub label: String,
    /// One value per compared condition, in input order.
    pub values: Vec<f64>,
    pub min: f64,
    pub max: f64,
    /// `(max − min) / max`, with `0/0` read as 0.
    pub relative: f64,
    pub flagged: bool,
}

impl Deviation {
    fn from_values(label: String, values: Vec<f64>, threshold: f64) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let relative = if max == 0.0 { 0.0 } else { (max - min) / max };
        Deviation {
            label,
            values,
            min,
            max,
            relative,
            flagged: relative > threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExposureComparison {
    pub conditions: Vec<Exposure>,
    pub datasets: Vec<Deviation>,
    pub groups: Vec<Deviation>,
    pub warn_threshold: f64,
    /// Whether every condition has the same post-alignment step budget.
    pub budget_matched: bool,
}

impl ExposureComparison {
    pub fn dataset(&self, name: &str) -> Option<&Deviation> {
        self.datasets.iter().find(|d| d.label == name)
    }

    pub fn group(&self, group: DatasetGroup) -> Option<&Deviation> {
        self.groups.iter().find(|d| d.label == group.as_str())
    }

    pub fn flagged(&self) -> impl Iterator<Item = &Deviation> {
        self.datasets.iter().chain(&self.groups).filter(|d| d.flagged)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let mut header = vec!["Dataset".to_string()];
        header.extend(self.conditions.iter().map(|c| c.condition.clone()));
        header.push("Rel. dev.".to_string());
        let mut rows = vec![header];
        for dev in self.datasets.iter().chain(&self.groups) {
            let mut row = vec![dev.label.clone()];
            row.extend(dev.values.iter().map(|v| format!("{v:.2}")));
            let mark = if dev.flagged { " !" } else { "" };
            row.push(format!("{:.4}{mark}", dev.relative));
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
            .collect();
        for row in &rows {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(
                    |(i, (c, &w))| {
                        if i == 0 {
                            format!("{c:<w$}")
                        } else {
                            format!("{c:>w$}")
                        }
                    },
                )
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        let _ = writeln!(out, "warn threshold: {}", self.warn_threshold);
        if !self.budget_matched {
            let budgets: Vec<String> = self
                .conditions
                .iter()
                .map(|c| format!("{}={}", c.condition, c.post_alignment_steps))
                .collect();
            let _ = writeln!(out, "warning: post-alignment budgets differ ({})", budgets.join(", "));
        }
        for dev in self.flagged() {
            let _ = writeln!(
                out,
                "warning: {} exposure deviates by {:.4} (> {})",
                dev.label, dev.relative, self.warn_threshold
            );
        }
        out
    }
}

/// Compares per-dataset and per-group exposure across conditions.
///
/// Mismatched budgets and large deviations are reported, never rejected.
pub fn compare_exposure(
    conds: &[ScheduleCondition],
    registry: &Registry,
    warn_threshold: f64,
) -> Result<ExposureComparison> {
    if conds.is_empty() {
        return Err(Error::Precondition("no conditions to compare".into()));
    }
    for cond in conds {
        if let Some(missing) = cond
            .referenced_datasets()
            .into_iter()
            .find(|d| registry.get(d).is_none())
        {
            return Err(Error::RegistryMismatch(format!(
                "condition `{}` references `{missing}`, which is not in the shared registry",
                cond.id
            )));
        }
    }
    let exposures = conds.iter().map(compute_exposure).collect::<Result<Vec<_>>>()?;

    let datasets = registry
        .sorted()
        .into_iter()
        .map(|d| {
            let values: Vec<f64> = exposures.iter().map(|e| e.get(&d.name)).collect();
            Deviation::from_values(d.name.clone(), values, warn_threshold)
        })
        .collect();

    let groups = DatasetGroup::ALL
        .into_iter()
        .filter(|g| *g != DatasetGroup::Alignment)
        .filter(|g| registry.datasets.iter().any(|d| d.group == *g))
        .map(|g| {
            let values: Vec<f64> = exposures
                .iter()
                .map(|e| {
                    registry
                        .datasets
                        .iter()
                        .filter(|d| d.group == g)
                        .map(|d| e.get(&d.name))
                        .sum()
                })
                .collect();
            Deviation::from_values(g.as_str().to_string(), values, warn_threshold)
        })
        .collect();

    let budget_matched = exposures
        .windows(2)
        .all(|w| w[0].post_alignment_steps == w[1].post_alignment_steps);

    Ok(ExposureComparison {
        conditions: exposures,
        datasets,
        groups,
        warn_threshold,
        budget_matched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{builtin_condition, Preset, AI2D, DOCVQA, SHAREGPT4V, TEXTVQA};

    const STEPS: [u64; 3] = [500, 1000, 1000];

    #[test]
    fn curriculum_exposure() {
        let e = compute_exposure(&builtin_condition(Preset::B, STEPS)).unwrap();
        assert_eq!(e.get(SHAREGPT4V), 900.0);
        assert_eq!(e.get(AI2D), 250.0);
        assert_eq!(e.get("LLaVA-Pretrain"), 0.0);
        assert_eq!(e.total(), 2000.0);
    }

    #[test]
    fn direct_mixture_exposure() {
        let e = compute_exposure(&builtin_condition(Preset::A, STEPS)).unwrap();
        assert_eq!(e.get(TEXTVQA), 240.0);
    }

    #[test]
    fn zero_budget_gives_zero_exposure() {
        for p in Preset::ALL {
            let e = compute_exposure(&builtin_condition(p, [7, 0, 0])).unwrap();
            assert!(e.by_dataset.values().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn invalid_condition_is_rejected() {
        let mut c = builtin_condition(Preset::A, STEPS);
        c.stages.truncate(1);
        assert!(matches!(compute_exposure(&c), Err(Error::InvalidCondition { .. })));
    }

    #[test]
    fn compare_a_b_docvqa() {
        let conds = [builtin_condition(Preset::A, STEPS), builtin_condition(Preset::B, STEPS)];
        let cmp = compare_exposure(&conds, &Registry::builtin(), DEFAULT_WARN_THRESHOLD).unwrap();
        let doc = cmp.dataset(DOCVQA).unwrap();
        assert_eq!((doc.min, doc.max), (240.0, 300.0));
        assert!((doc.relative - 0.20).abs() < 1e-12);
        assert!(doc.flagged);
        assert!(cmp.budget_matched);
    }

    #[test]
    fn compare_identical_and_swapped() {
        let reg = Registry::builtin();
        let a = builtin_condition(Preset::A, STEPS);
        let cmp = compare_exposure(&[a.clone(), a], &reg, 0.1).unwrap();
        assert!(cmp.datasets.iter().chain(&cmp.groups).all(|d| d.relative == 0.0));

        let conds = [builtin_condition(Preset::B, STEPS), builtin_condition(Preset::D, STEPS)];
        let cmp = compare_exposure(&conds, &reg, 0.1).unwrap();
        assert!(cmp.datasets.iter().chain(&cmp.groups).all(|d| d.relative == 0.0));
        assert_eq!(cmp.flagged().count(), 0);
    }

    #[test]
    fn group_deviation() {
        let conds = [builtin_condition(Preset::A, STEPS), builtin_condition(Preset::C, STEPS)];
        let cmp = compare_exposure(&conds, &Registry::builtin(), 0.1).unwrap();
        let ocr = cmp.group(DatasetGroup::Ocr).unwrap();
        // A: 0.24·2000 = 480, C: 0.40·2000 = 800
        assert_eq!(ocr.values, vec![480.0, 800.0]);
        assert!((ocr.relative - 0.4).abs() < 1e-12);
    }

    #[test]
    fn budget_mismatch_is_reported_not_rejected() {
        let conds = [
            builtin_condition(Preset::A, STEPS),
            builtin_condition(Preset::A, [0, 10, 10]),
        ];
        let cmp = compare_exposure(&conds, &Registry::builtin(), 0.1).unwrap();
        assert!(!cmp.budget_matched);
        assert!(cmp.render_text().contains("budgets differ"));
    }

    #[test]
    fn registry_mismatch() {
        let mut c = builtin_condition(Preset::C, STEPS);
        c.stages[1].distribution.insert("Mystery".into(), 0.0);
        let err = compare_exposure(&[c], &Registry::builtin(), 0.1).unwrap_err();
        assert!(matches!(err, Error::RegistryMismatch(_)));
    }
}
