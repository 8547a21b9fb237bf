//! Capability aggregates, condition comparisons and trajectories.
//!
//! Task scores carry one decimal. They are stored as integer tenths, and the
//! aggregates (means of two or five scores) are exact in integer hundredths,
//! so half-way values such as `72.35` are never perturbed by binary floating
//! point. Rounding to one decimal happens only when rendering, half away from
//! zero.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "General-Val")]
    GeneralVal,
    #[serde(rename = "AI2D")]
    Ai2d,
    #[serde(rename = "ChartQA")]
    ChartQa,
    #[serde(rename = "TextVQA")]
    TextVqa,
    #[serde(rename = "DocVQA")]
    DocVqa,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::GeneralVal, Task::Ai2d, Task::ChartQa, Task::TextVqa, Task::DocVqa];

    pub fn name(self) -> &'static str {
        match self {
            Task::GeneralVal => "General-Val",
            Task::Ai2d => "AI2D",
            Task::ChartQa => "ChartQA",
            Task::TextVqa => "TextVQA",
            Task::DocVqa => "DocVQA",
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidData(format!("unknown task `{s}`")))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An exact value in hundredths of a score point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Centi(pub i64);

impl Centi {
    /// Converts a score given with at most one decimal, e.g. `73.4`.
    pub fn from_score(score: f64) -> Result<Self> {
        if !(0.0..=100.0).contains(&score) {
            return Err(Error::InvalidData(format!("score {score} outside [0, 100]")));
        }
        let tenths = (score * 10.0).round();
        if (score * 10.0 - tenths).abs() > 1e-6 {
            return Err(Error::InvalidData(format!("score {score} has more than one decimal")));
        }
        Ok(Centi(tenths as i64 * 10))
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }

    /// Tenths, rounded half away from zero.
    pub fn round_tenths(self) -> i64 {
        if self.0 >= 0 {
            (self.0 + 5) / 10
        } else {
            (self.0 - 5) / 10
        }
    }

    /// One decimal, half away from zero: `72.35` → `"72.4"`.
    pub fn render(self) -> String {
        let t = self.round_tenths();
        let sign = if t < 0 { "-" } else { "" };
        format!("{sign}{}.{}", t.abs() / 10, t.abs() % 10)
    }

    /// Two decimals, exact.
    pub fn render_exact(self) -> String {
        let sign = if self.0 < 0 { "-" } else { "" };
        format!("{sign}{}.{:02}", self.0.abs() / 100, self.0.abs() % 100)
    }
}

impl fmt::Display for Centi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl FromStr for Centi {
    type Err = Error;

    /// Parses a decimal with at most two fractional digits, without going
    /// through floating point.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidData(format!("`{s}` is not a decimal with at most two places"));
        let t = s.trim();
        let (neg, t) = match t.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, t),
        };
        let (int, frac) = t.split_once('.').unwrap_or((t, ""));
        if int.is_empty() || frac.len() > 2 || !int.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let int: i64 = int.parse().map_err(|_| bad())?;
        let frac: i64 = if frac.is_empty() {
            0
        } else {
            format!("{frac:0<2}").parse().map_err(|_| bad())?
        };
        let v = int * 100 + frac;
        Ok(Centi(if neg { -v } else { v }))
    }
}

/// Task scores at one checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EvalSnapshot {
    pub step: u64,
    pub scores: BTreeMap<Task, Centi>,
}

impl EvalSnapshot {
    pub fn new(step: u64) -> Self {
        EvalSnapshot {
            step,
            scores: BTreeMap::new(),
        }
    }

    /// Scores in [`Task::ALL`] order.
    pub fn from_scores(step: u64, scores: [f64; 5]) -> Result<Self> {
        let mut s = EvalSnapshot::new(step);
        for (task, v) in Task::ALL.into_iter().zip(scores) {
            s.scores.insert(task, Centi::from_score(v)?);
        }
        Ok(s)
    }

    pub fn is_aggregable(&self) -> bool {
        Task::ALL.iter().all(|t| self.scores.contains_key(t))
    }

    pub fn missing(&self) -> Vec<Task> {
        Task::ALL.into_iter().filter(|t| !self.scores.contains_key(t)).collect()
    }

    fn score(&self, task: Task) -> Result<i64> {
        self.scores
            .get(&task)
            .map(|c| c.0)
            .ok_or_else(|| Error::InvalidData(format!("snapshot at step {} is missing task {task}", self.step)))
    }
}

/// The four capability categories. `detail` is shown as "OCR" in tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CapabilityScores {
    pub general: Centi,
    pub reasoning: Centi,
    pub detail: Centi,
    pub overall: Centi,
}

pub fn aggregate(snapshot: &EvalSnapshot) -> Result<CapabilityScores> {
    let g = snapshot.score(Task::GeneralVal)?;
    let a = snapshot.score(Task::Ai2d)?;
    let c = snapshot.score(Task::ChartQa)?;
    let t = snapshot.score(Task::TextVqa)?;
    let d = snapshot.score(Task::DocVqa)?;
    // Task scores are multiples of 10 hundredths, so both divisions are exact.
    Ok(CapabilityScores {
        general: Centi(g),
        reasoning: Centi((a + c) / 2),
        detail: Centi((t + d) / 2),
        overall: Centi((g + a + c + t + d) / 5),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrajectoryPoint {
    pub step: u64,
    pub scores: CapabilityScores,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    fn series(&self, pick: impl Fn(&CapabilityScores) -> Centi) -> Vec<(u64, f64)> {
        self.points.iter().map(|p| (p.step, pick(&p.scores).to_f64())).collect()
    }

    pub fn general(&self) -> Vec<(u64, f64)> {
        self.series(|s| s.general)
    }

    pub fn reasoning(&self) -> Vec<(u64, f64)> {
        self.series(|s| s.reasoning)
    }

    pub fn detail(&self) -> Vec<(u64, f64)> {
        self.series(|s| s.detail)
    }

    pub fn overall(&self) -> Vec<(u64, f64)> {
        self.series(|s| s.overall)
    }

    pub fn export_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRAJECTORY_COLUMNS)
            .map_err(|e| Error::parse("trajectory export", e))?;
        for p in &self.points {
            let s = &p.scores;
            w.write_record([
                p.step.to_string(),
                s.general.render_exact(),
                s.reasoning.render_exact(),
                s.detail.render_exact(),
                s.overall.render_exact(),
            ])
            .map_err(|e| Error::parse("trajectory export", e))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const TRAJECTORY_COLUMNS: [&str; 5] = ["step", "general", "reasoning", "detail", "overall"];

pub fn trajectory(snapshots: &[EvalSnapshot]) -> Result<Trajectory> {
    if let Some(w) = snapshots.windows(2).find(|w| w[1].step <= w[0].step) {
        return Err(Error::InvalidData(format!(
            "snapshots must be ordered by strictly increasing step ({} follows {})",
            w[1].step, w[0].step
        )));
    }
    let points = snapshots
        .iter()
        .map(|s| {
            Ok(TrajectoryPoint {
                step: s.step,
                scores: aggregate(s)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Trajectory { points })
}

pub const DEFAULT_CONVERGENCE_FRACTION: f64 = 0.95;

/// First step whose value reaches `fraction` of the final value.
pub fn convergence_step(series: &[(u64, f64)], fraction: f64) -> Result<Option<u64>> {
    let &(_, last) = series
        .last()
        .ok_or_else(|| Error::Precondition("convergence step of an empty series".into()))?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Precondition(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let target = fraction * last;
    Ok(series.iter().find(|&&(_, v)| v >= target).map(|&(s, _)| s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    GeneralVal,
    Ai2d,
    ChartQa,
    Reasoning,
    TextVqa,
    DocVqa,
    Ocr,
    Overall,
}

impl Column {
    pub const ALL: [Column; 8] = [
        Column::GeneralVal,
        Column::Ai2d,
        Column::ChartQa,
        Column::Reasoning,
        Column::TextVqa,
        Column::DocVqa,
        Column::Ocr,
        Column::Overall,
    ];

    pub fn title(self) -> &'static str {
        match self {
            Column::GeneralVal => "General-Val",
            Column::Ai2d => "AI2D",
            Column::ChartQa => "ChartQA",
            Column::Reasoning => "Reasoning",
            Column::TextVqa => "TextVQA",
            Column::DocVqa => "DocVQA",
            Column::Ocr => "OCR",
            Column::Overall => "Overall",
        }
    }

    fn export_name(self) -> &'static str {
        match self {
            Column::GeneralVal => "general_val",
            Column::Ai2d => "ai2d",
            Column::ChartQa => "chartqa",
            Column::Reasoning => "reasoning",
            Column::TextVqa => "textvqa",
            Column::DocVqa => "docvqa",
            Column::Ocr => "ocr",
            Column::Overall => "overall",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComparisonRow {
    pub condition: String,
    pub snapshot: EvalSnapshot,
    pub scores: CapabilityScores,
}

impl ComparisonRow {
    pub fn value(&self, col: Column) -> Centi {
        let task = |t| self.snapshot.scores[&t];
        match col {
            Column::GeneralVal => task(Task::GeneralVal),
            Column::Ai2d => task(Task::Ai2d),
            Column::ChartQa => task(Task::ChartQa),
            Column::Reasoning => self.scores.reasoning,
            Column::TextVqa => task(Task::TextVqa),
            Column::DocVqa => task(Task::DocVqa),
            Column::Ocr => self.scores.detail,
            Column::Overall => self.scores.overall,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionComparison {
    pub rows: Vec<ComparisonRow>,
    /// For each of [`Column::ALL`], the conditions holding the best value.
    pub best: Vec<Vec<String>>,
}

impl ConditionComparison {
    pub fn is_best(&self, condition: &str, col: Column) -> bool {
        let i = Column::ALL.iter().position(|c| *c == col).expect("column listed");
        self.best[i].iter().any(|c| c == condition)
    }

    pub fn row(&self, condition: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    /// Aligned plain-text table; best values carry a trailing `*`.
    pub fn render_text(&self) -> String {
        let mut table: Vec<Vec<String>> = Vec::with_capacity(self.rows.len() + 1);
        let mut header = vec!["Condition".to_string()];
        header.extend(Column::ALL.iter().map(|c| c.title().to_string()));
        table.push(header);
        for row in &self.rows {
            let mut cells = vec![row.condition.clone()];
            for col in Column::ALL {
                let mark = if self.is_best(&row.condition, col) { "*" } else { " " };
                cells.push(format!("{}{mark}", row.value(col).render()));
            }
            table.push(cells);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|i| table.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &table {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            out.push_str(line.join(" | ").trim_end());
            out.push('\n');
        }
        out.push_str("* best in column\n");
        out
    }

    /// Delimiter-separated dump of unrounded values, one row per condition:
    /// `condition` followed by the eight [`Column::ALL`] values.
    pub fn export_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["condition"];
        header.extend(Column::ALL.iter().map(|c| c.export_name()));
        w.write_record(&header)
            .map_err(|e| Error::parse("comparison export", e))?;
        for row in &self.rows {
            let mut rec = vec![row.condition.clone()];
            rec.extend(Column::ALL.iter().map(|&c| row.value(c).render_exact()));
            w.write_record(&rec).map_err(|e| Error::parse("comparison export", e))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn comparison_table(rows: &[(String, EvalSnapshot)]) -> Result<ConditionComparison> {
    if rows.is_empty() {
        return Err(Error::Precondition("comparison needs at least one condition".into()));
    }
    let mut out = Vec::with_capacity(rows.len());
    for (condition, snapshot) in rows {
        if out.iter().any(|r: &ComparisonRow| &r.condition == condition) {
            return Err(Error::InvalidData(format!("condition `{condition}` listed twice")));
        }
        out.push(ComparisonRow {
            condition: condition.clone(),
            snapshot: snapshot.clone(),
            scores: aggregate(snapshot)?,
        });
    }
    let best = Column::ALL
        .iter()
        .map(|&col| {
            let top = out.iter().map(|r| r.value(col)).max().expect("non-empty");
            out.iter()
                .filter(|r| r.value(col) == top)
                .map(|r| r.condition.clone())
                .collect()
        })
        .collect();
    Ok(ConditionComparison { rows: out, best })
}

/// A re-imported comparison export row: the snapshot rebuilt from the task
/// columns, and the aggregate columns exactly as written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImportedRow {
    pub condition: String,
    pub snapshot: EvalSnapshot,
    pub exported: CapabilityScores,
}

pub fn import_comparison_csv<R: Read>(input: R) -> Result<Vec<ImportedRow>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(|e| Error::parse("comparison export", e))?.clone();
    let expected: Vec<&str> = std::iter::once("condition")
        .chain(Column::ALL.iter().map(|c| c.export_name()))
        .collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::parse(
            "comparison export",
            format!("expected columns {expected:?}"),
        ));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::parse("comparison export", e))?;
        let v = |i: usize| rec[i].parse::<Centi>();
        let mut snapshot = EvalSnapshot::new(0);
        snapshot.scores.insert(Task::GeneralVal, v(1)?);
        snapshot.scores.insert(Task::Ai2d, v(2)?);
        snapshot.scores.insert(Task::ChartQa, v(3)?);
        snapshot.scores.insert(Task::TextVqa, v(5)?);
        snapshot.scores.insert(Task::DocVqa, v(6)?);
        out.push(ImportedRow {
            condition: rec[0].to_string(),
            snapshot,
            exported: CapabilityScores {
                general: v(1)?,
                reasoning: v(4)?,
                detail: v(7)?,
                overall: v(8)?,
            },
        });
    }
    Ok(out)
}

/// One line of an eval log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    pub step: u64,
    pub task: Task,
    pub score: f64,
}

pub fn read_eval_jsonl<R: BufRead>(input: R) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(format!("eval log line {}", i + 1), e))?);
    }
    Ok(out)
}

pub fn write_eval_jsonl<W: Write>(records: &[EvalRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Flattens snapshots into eval-log records in step then task order.
pub fn snapshots_to_records(condition: Option<&str>, snapshots: &[EvalSnapshot]) -> Vec<EvalRecord> {
    snapshots
        .iter()
        .flat_map(|s| {
            s.scores.iter().map(move |(&task, &score)| EvalRecord {
                condition: condition.map(str::to_string),
                step: s.step,
                task,
                score: score.to_f64(),
            })
        })
        .collect()
}

/// Groups records by condition (records without one go under `default`),
/// then by step. Within a condition, snapshots come out in step order.
pub fn group_snapshots(records: &[EvalRecord], default: &str) -> Result<BTreeMap<String, Vec<EvalSnapshot>>> {
    let mut by_cond: BTreeMap<String, BTreeMap<u64, EvalSnapshot>> = BTreeMap::new();
    for r in records {
        let cond = r.condition.clone().unwrap_or_else(|| default.to_string());
        let snap = by_cond
            .entry(cond.clone())
            .or_default()
            .entry(r.step)
            .or_insert_with(|| EvalSnapshot::new(r.step));
        if snap.scores.insert(r.task, Centi::from_score(r.score)?).is_some() {
            return Err(Error::InvalidData(format!(
                "condition `{cond}` step {}: task {} reported twice",
                r.step, r.task
            )));
        }
    }
    Ok(by_cond
        .into_iter()
        .map(|(c, snaps)| (c, snaps.into_values().collect()))
        .collect())
}
