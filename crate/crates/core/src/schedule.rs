//! Multi-stage data-organization schedules.
//!
//! A [`ScheduleCondition`] is an ordered list of stages. Each stage runs for a
//! fixed number of training steps and owns a categorical distribution over
//! named datasets; every step first picks a dataset from that distribution and
//! then an instance uniformly from the picked dataset (see [`crate::sampler`]).
//!
//! Stage 1 is the alignment stage and may only draw from `D0-alignment`
//! datasets. Stages 2 and up are the post-alignment stages whose exposure is
//! accounted in [`crate::exposure`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Absolute tolerance on the sum of a stage distribution.
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-9;

pub const LLAVA_PRETRAIN: &str = "LLaVA-Pretrain";
pub const SHAREGPT4V: &str = "ShareGPT4V";
pub const AI2D: &str = "AI2D";
pub const CHARTQA: &str = "ChartQA";
pub const TEXTVQA: &str = "TextVQA";
pub const DOCVQA: &str = "DocVQA";

/// Functional role of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DatasetGroup {
    #[serde(rename = "D0-alignment")]
    Alignment,
    #[serde(rename = "D1-general")]
    General,
    #[serde(rename = "D2-reasoning")]
    Reasoning,
    #[serde(rename = "D3-ocr")]
    Ocr,
}

impl DatasetGroup {
    pub const ALL: [DatasetGroup; 4] = [
        DatasetGroup::Alignment,
        DatasetGroup::General,
        DatasetGroup::Reasoning,
        DatasetGroup::Ocr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetGroup::Alignment => "D0-alignment",
            DatasetGroup::General => "D1-general",
            DatasetGroup::Reasoning => "D2-reasoning",
            DatasetGroup::Ocr => "D3-ocr",
        }
    }
}

impl fmt::Display for DatasetGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSource {
    pub name: String,
    pub group: DatasetGroup,
    pub size: u64,
}

impl DatasetSource {
    pub fn new(name: impl Into<String>, group: DatasetGroup, size: u64) -> Self {
        DatasetSource {
            name: name.into(),
            group,
            size,
        }
    }
}

/// The pool of datasets a schedule may draw from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Registry {
    pub datasets: Vec<DatasetSource>,
}

impl Registry {
    pub fn new(datasets: Vec<DatasetSource>) -> Self {
        Registry { datasets }
    }

    /// The six-dataset registry the built-in conditions are defined over.
    ///
    /// Sizes are the public training-split counts at the time of writing and
    /// only matter for within-dataset permutation length; pass a registry file
    /// to override them.
    pub fn builtin() -> Self {
        use DatasetGroup::*;
        Registry::new(vec![
            DatasetSource::new(LLAVA_PRETRAIN, Alignment, 558_128),
            DatasetSource::new(SHAREGPT4V, General, 102_025),
            DatasetSource::new(AI2D, Reasoning, 12_413),
            DatasetSource::new(CHARTQA, Reasoning, 28_299),
            DatasetSource::new(TEXTVQA, Ocr, 34_602),
            DatasetSource::new(DOCVQA, Ocr, 39_463),
        ])
    }

    pub fn get(&self, name: &str) -> Option<&DatasetSource> {
        self.datasets.iter().find(|d| d.name == name)
    }

    /// Datasets sorted by name; the canonical order used for sampling.
    pub fn sorted(&self) -> Vec<&DatasetSource> {
        let mut out: Vec<_> = self.datasets.iter().collect();
        out.sort_by(|a, b| a.name.cmp(&b.name));
        out
    }

    /// SHA-256 over the canonical `name\tgroup\tsize\n` listing, sorted by name.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for d in self.sorted() {
            hasher.update(format!("{}\t{}\t{}\n", d.name, d.group, d.size).as_bytes());
        }
        let bytes = hasher.finalize();
        let mut hex = String::with_capacity(7 + 64);
        hex.push_str("sha256:");
        for b in bytes.iter() {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("registry", e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("registry serializes to TOML")
    }

    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for d in &self.datasets {
            if !seen.insert(d.name.as_str()) {
                out.push(Violation::new(
                    None,
                    Rule::DuplicateDataset,
                    format!("dataset `{}` listed more than once in the registry", d.name),
                ));
            }
            if d.size == 0 {
                out.push(Violation::new(
                    None,
                    Rule::EmptyDataset,
                    format!("dataset `{}` has size 0", d.name),
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub index: u32,
    pub steps: u64,
    pub distribution: BTreeMap<String, f64>,
}

impl StagePlan {
    pub fn new<'a>(index: u32, steps: u64, probs: impl IntoIterator<Item = (&'a str, f64)>) -> Self {
        StagePlan {
            index,
            steps,
            distribution: probs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn probability(&self, dataset: &str) -> f64 {
        self.distribution.get(dataset).copied().unwrap_or(0.0)
    }

    /// Datasets drawn with positive probability.
    pub fn support(&self) -> impl Iterator<Item = &str> {
        self.distribution
            .iter()
            .filter(|(_, &p)| p > 0.0)
            .map(|(k, _)| k.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleCondition {
    pub id: String,
    pub stages: Vec<StagePlan>,
}

impl ScheduleCondition {
    pub fn total_steps(&self) -> u64 {
        self.stages.iter().map(|s| s.steps).sum()
    }

    /// Steps spent in stages with index ≥ 2.
    pub fn post_alignment_steps(&self) -> u64 {
        self.post_alignment().map(|s| s.steps).sum()
    }

    pub fn post_alignment(&self) -> impl Iterator<Item = &StagePlan> {
        self.stages.iter().filter(|s| s.index >= 2)
    }

    pub fn stage(&self, index: u32) -> Option<&StagePlan> {
        self.stages.iter().find(|s| s.index == index)
    }

    /// Every dataset named in any stage distribution.
    pub fn referenced_datasets(&self) -> BTreeSet<&str> {
        self.stages
            .iter()
            .flat_map(|s| s.distribution.keys().map(String::as_str))
            .collect()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("schedule", e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schedule serializes to TOML")
    }
}

/// The four reference conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    /// Direct mixture: one fixed mixture for both post-alignment stages.
    A,
    /// Curriculum: general + reasoning first, OCR/document supervision second.
    B,
    /// Balanced: equal probability for every post-alignment source.
    C,
    /// Reverse curriculum: B with stages 2 and 3 swapped.
    D,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::A, Preset::B, Preset::C, Preset::D];

    pub fn id(self) -> &'static str {
        match self {
            Preset::A => "A",
            Preset::B => "B",
            Preset::C => "C",
            Preset::D => "D",
        }
    }

    pub fn strategy(self) -> &'static str {
        match self {
            Preset::A => "Direct mixture",
            Preset::B => "Curriculum",
            Preset::C => "Balanced sampling",
            Preset::D => "Reverse curriculum",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Preset::A),
            "B" | "b" => Ok(Preset::B),
            "C" | "c" => Ok(Preset::C),
            "D" | "d" => Ok(Preset::D),
            other => Err(Error::UnknownCondition(other.to_string())),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

const MIXTURE: [(&str, f64); 5] = [
    (SHAREGPT4V, 0.50),
    (AI2D, 0.13),
    (CHARTQA, 0.13),
    (TEXTVQA, 0.12),
    (DOCVQA, 0.12),
];
const GENERAL_REASONING: [(&str, f64); 3] = [(SHAREGPT4V, 0.70), (AI2D, 0.15), (CHARTQA, 0.15)];
const OCR_HEAVY: [(&str, f64); 5] = [
    (SHAREGPT4V, 0.20),
    (AI2D, 0.10),
    (CHARTQA, 0.10),
    (TEXTVQA, 0.30),
    (DOCVQA, 0.30),
];
const BALANCED: [(&str, f64); 5] = [
    (SHAREGPT4V, 0.20),
    (AI2D, 0.20),
    (CHARTQA, 0.20),
    (TEXTVQA, 0.20),
    (DOCVQA, 0.20),
];

type Mixture = &'static [(&'static str, f64)];

/// Builds one of the reference conditions with the given per-stage step counts.
pub fn builtin_condition(preset: Preset, steps: [u64; 3]) -> ScheduleCondition {
    let (second, third): (Mixture, Mixture) = match preset {
        Preset::A => (&MIXTURE, &MIXTURE),
        Preset::B => (&GENERAL_REASONING, &OCR_HEAVY),
        Preset::C => (&BALANCED, &BALANCED),
        Preset::D => (&OCR_HEAVY, &GENERAL_REASONING),
    };
    ScheduleCondition {
        id: preset.id().to_string(),
        stages: vec![
            StagePlan::new(1, steps[0], [(LLAVA_PRETRAIN, 1.0)]),
            StagePlan::new(2, steps[1], second.iter().copied()),
            StagePlan::new(3, steps[2], third.iter().copied()),
        ],
    }
}

/// Which structural rule a [`Violation`] breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    TooFewStages,
    StageIndex,
    ProbabilityRange,
    ProbabilitySum,
    AlignmentSupport,
    UnknownDataset,
    DuplicateDataset,
    EmptyDataset,
    PresetRegistry,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub stage: Option<u32>,
    pub rule: Rule,
    pub message: String,
}

impl Violation {
    fn new(stage: Option<u32>, rule: Rule, message: String) -> Self {
        Violation { stage, rule, message }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.stage {
            Some(s) => write!(f, "stage {s}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Outcome of [`validate_condition`]; violations are data, not failures.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub condition: String,
    pub violations: Vec<Violation>,
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::InvalidCondition {
                id: self.condition,
                violations: self.violations,
            })
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Probabilities are printed with at most 12 significant decimals.
pub(crate) fn fmt_prob(x: f64) -> String {
    let s = format!("{x:.12}");
    let s = s.trim_end_matches('0');
    s.trim_end_matches('.').to_string()
}

/// Rules that can be checked without a registry: stage numbering and the
/// per-stage probability constraints.
pub fn structural_violations(cond: &ScheduleCondition) -> Vec<Violation> {
    let mut out = Vec::new();
    if cond.stages.len() < 2 {
        out.push(Violation::new(
            None,
            Rule::TooFewStages,
            format!("at least two stages required, found {}", cond.stages.len()),
        ));
    }
    for (pos, stage) in cond.stages.iter().enumerate() {
        let expected = pos as u32 + 1;
        if stage.index != expected {
            out.push(Violation::new(
                Some(stage.index),
                Rule::StageIndex,
                format!("stage indices must be consecutive from 1; expected {expected}"),
            ));
        }
        let mut sum = 0.0;
        for (name, &p) in &stage.distribution {
            if !(0.0..=1.0).contains(&p) {
                out.push(Violation::new(
                    Some(stage.index),
                    Rule::ProbabilityRange,
                    format!("probability of `{name}` is {} (must lie in [0, 1])", fmt_prob(p)),
                ));
            }
            sum += p;
        }
        if sum.is_nan() || (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
            out.push(Violation::new(
                Some(stage.index),
                Rule::ProbabilitySum,
                format!("probability sum {} ≠ 1", fmt_prob(sum)),
            ));
        }
    }
    out
}

/// Checks every schedule and registry rule and reports all violations found.
pub fn validate_condition(cond: &ScheduleCondition, registry: &Registry) -> Verdict {
    let mut violations = registry.violations();
    violations.extend(structural_violations(cond));

    for stage in &cond.stages {
        for name in stage.distribution.keys() {
            match registry.get(name) {
                None => violations.push(Violation::new(
                    Some(stage.index),
                    Rule::UnknownDataset,
                    format!("dataset `{name}` is not in the registry"),
                )),
                Some(d) if stage.index == 1 && d.group != DatasetGroup::Alignment => {
                    if stage.probability(name) > 0.0 {
                        violations.push(Violation::new(
                            Some(1),
                            Rule::AlignmentSupport,
                            format!("stage-1 support must be D0 only (`{name}` is {})", d.group),
                        ));
                    }
                }
                Some(_) => {}
            }
        }
    }

    if cond.id.parse::<Preset>().is_ok() {
        violations.extend(preset_registry_violations(registry));
    }

    Verdict {
        condition: cond.id.clone(),
        violations,
    }
}

fn preset_registry_violations(registry: &Registry) -> Vec<Violation> {
    let expected = Registry::builtin();
    let mut out = Vec::new();
    for want in &expected.datasets {
        match registry.get(&want.name) {
            None => out.push(Violation::new(
                None,
                Rule::PresetRegistry,
                format!("built-in conditions need dataset `{}` in the registry", want.name),
            )),
            Some(have) if have.group != want.group => out.push(Violation::new(
                None,
                Rule::PresetRegistry,
                format!(
                    "built-in conditions need `{}` in group {}, registry has {}",
                    want.name, want.group, have.group
                ),
            )),
            Some(_) => {}
        }
    }
    for have in &registry.datasets {
        if expected.get(&have.name).is_none() {
            out.push(Violation::new(
                None,
                Rule::PresetRegistry,
                format!(
                    "built-in conditions use exactly the six reference datasets; `{}` is extra",
                    have.name
                ),
            ));
        }
    }
    out
}
