//! Synthetic loss traces and capability trajectories with known ground truth.
//!
//! This is test plumbing for the analysis pipeline, not a model of real
//! training. Loss in stage `s` follows `a_s · exp(−λ_s (t − t_s0)) + ε_t`
//! with Gaussian `ε_t ~ N(0, σ_s²)`; injected spikes add
//! `multiplier · σ_s` (or `multiplier · 1.0` when the stage is noiseless).
//!
//! Capabilities follow a saturating exponential in a linear mix of
//! cumulative per-group exposure:
//! `c(t) = base + (ceil − base) · (1 − exp(−Σ_g α_g · X_g(t) / scale))`,
//! clamped to `[0, ceil]` after noise. Task scores are the capability plus a
//! fixed offset (see [`TASK_OFFSETS`]), rounded to one decimal.
//!
//! Noise uses ChaCha8 seeded with `seed_from_u64` and `rand_distr::Normal`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{LossRecord, LossTrace};
use crate::error::{Error, Result};
use crate::metrics::{Centi, EvalSnapshot, Task};
use crate::schedule::{DatasetGroup, Registry, ScheduleCondition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossStageSpec {
    pub steps: u64,
    /// Loss level at the first step of the stage.
    pub start: f64,
    /// Exponential decay rate per step (`1/τ`); 0 keeps the stage flat.
    #[serde(default)]
    pub decay: f64,
    #[serde(default)]
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub step: u64,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTraceSpec {
    pub stages: Vec<LossStageSpec>,
    #[serde(default)]
    pub injections: Vec<Injection>,
}

impl LossTraceSpec {
    pub fn total_steps(&self) -> u64 {
        self.stages.iter().map(|s| s.steps).sum()
    }

    fn check(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidData("loss spec needs at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let ok = s.start.is_finite() && s.start >= 0.0 && s.decay.is_finite() && s.decay >= 0.0;
            if !ok || !(s.noise.is_finite() && s.noise >= 0.0) {
                return Err(Error::InvalidData(format!(
                    "loss spec stage {}: start, decay and noise must be finite and non-negative",
                    i + 1
                )));
            }
        }
        let total = self.total_steps();
        for inj in &self.injections {
            if inj.step == 0 || inj.step > total {
                return Err(Error::InvalidData(format!(
                    "injection at step {} is outside 1..={total}",
                    inj.step
                )));
            }
            if !inj.multiplier.is_finite() {
                return Err(Error::InvalidData("injection multiplier must be finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossGroundTruth {
    pub spike_steps: Vec<u64>,
    /// Noiseless `(ℓ₊ − ℓ₋) / ℓ₋` at each stage boundary, in order.
    pub transition_ratios: Vec<f64>,
}

fn noiseless(stage: &LossStageSpec, offset: u64) -> f64 {
    stage.start * (-stage.decay * offset as f64).exp()
}

pub fn synth_loss(spec: &LossTraceSpec, seed: u64) -> Result<(LossTrace, LossGroundTruth)> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let injections: BTreeMap<u64, f64> = spec.injections.iter().map(|i| (i.step, i.multiplier)).collect();
    let mut records = Vec::with_capacity(spec.total_steps() as usize);
    let mut step = 0u64;
    for (i, stage) in spec.stages.iter().enumerate() {
        let normal = Normal::new(0.0, stage.noise).expect("noise validated");
        for offset in 0..stage.steps {
            step += 1;
            let mut loss = noiseless(stage, offset);
            if stage.noise > 0.0 {
                loss += normal.sample(&mut rng);
            }
            if let Some(&m) = injections.get(&step) {
                loss += m * if stage.noise > 0.0 { stage.noise } else { 1.0 };
            }
            records.push(LossRecord {
                step,
                stage: i as u32 + 1,
                loss: loss.max(0.0),
            });
        }
    }
    let transition_ratios = spec
        .stages
        .windows(2)
        .filter(|w| w[0].steps > 0 && w[1].steps > 0)
        .map(|w| {
            let before = noiseless(&w[0], w[0].steps - 1);
            let after = noiseless(&w[1], 0);
            (after - before) / before
        })
        .collect();
    Ok((
        LossTrace::new(records)?,
        LossGroundTruth {
            spike_steps: injections.keys().copied().collect(),
            transition_ratios,
        },
    ))
}

/// Transfer coefficients from each data group's cumulative exposure.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Transfer {
    #[serde(default)]
    pub alignment: f64,
    #[serde(default)]
    pub general: f64,
    #[serde(default)]
    pub reasoning: f64,
    #[serde(default)]
    pub ocr: f64,
}

impl Transfer {
    fn get(&self, group: DatasetGroup) -> f64 {
        match group {
            DatasetGroup::Alignment => self.alignment,
            DatasetGroup::General => self.general,
            DatasetGroup::Reasoning => self.reasoning,
            DatasetGroup::Ocr => self.ocr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapabilityCurve {
    pub baseline: f64,
    pub ceiling: f64,
    pub transfer: Transfer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapabilityModelSpec {
    pub general: CapabilityCurve,
    pub reasoning: CapabilityCurve,
    pub detail: CapabilityCurve,
    /// Exposure (in steps) that closes `1 − 1/e` of the baseline–ceiling gap.
    pub exposure_scale: f64,
    pub eval_interval: u64,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl CapabilityModelSpec {
    fn check(&self) -> Result<()> {
        for (name, c) in [
            ("general", &self.general),
            ("reasoning", &self.reasoning),
            ("detail", &self.detail),
        ] {
            if !(c.baseline.is_finite() && c.ceiling.is_finite()) || c.baseline > c.ceiling {
                return Err(Error::InvalidData(format!("{name}: baseline must not exceed ceiling")));
            }
        }
        if self.eval_interval == 0 {
            return Err(Error::InvalidData("eval interval must be at least 1".into()));
        }
        if self.exposure_scale.is_nan() || self.exposure_scale <= 0.0 || self.noise.is_nan() || self.noise < 0.0 {
            return Err(Error::InvalidData(
                "exposure scale must be positive and noise non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-task offsets from the capability each task reads out.
pub const TASK_OFFSETS: [(Task, f64); 5] = [
    (Task::GeneralVal, 0.0),
    (Task::Ai2d, 0.5),
    (Task::ChartQa, -0.5),
    (Task::TextVqa, -0.5),
    (Task::DocVqa, 0.5),
];

/// Noise-free capability values at one eval step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CapabilityTruth {
    pub step: u64,
    pub general: f64,
    pub reasoning: f64,
    pub detail: f64,
}

impl CapabilityTruth {
    pub fn overall(&self) -> f64 {
        (self.general + 2.0 * self.reasoning + 2.0 * self.detail) / 5.0
    }
}

/// Cumulative expected exposure per data group after `step` steps.
pub fn cumulative_group_exposure(
    cond: &ScheduleCondition,
    registry: &Registry,
    step: u64,
) -> BTreeMap<DatasetGroup, f64> {
    let mut out: BTreeMap<DatasetGroup, f64> = DatasetGroup::ALL.iter().map(|&g| (g, 0.0)).collect();
    let mut start = 0u64;
    for stage in &cond.stages {
        let elapsed = step.saturating_sub(start).min(stage.steps) as f64;
        start += stage.steps;
        if elapsed == 0.0 {
            continue;
        }
        for (name, &p) in &stage.distribution {
            if let Some(d) = registry.get(name) {
                *out.get_mut(&d.group).expect("all groups seeded") += elapsed * p;
            }
        }
    }
    out
}

fn curve_value(curve: &CapabilityCurve, exposure: &BTreeMap<DatasetGroup, f64>, scale: f64) -> f64 {
    let drive: f64 = exposure.iter().map(|(&g, &x)| curve.transfer.get(g) * x).sum();
    curve.baseline + (curve.ceiling - curve.baseline) * (1.0 - (-drive / scale).exp())
}

fn to_score(v: f64) -> Centi {
    let tenths = (v.clamp(0.0, 100.0) * 10.0).round() as i64;
    Centi(tenths * 10)
}

/// Snapshots at every multiple of the eval interval up to the schedule's end,
/// plus the noiseless capability curves they were drawn from.
pub fn synth_capability(
    cond: &ScheduleCondition,
    registry: &Registry,
    model: &CapabilityModelSpec,
) -> Result<(Vec<EvalSnapshot>, Vec<CapabilityTruth>)> {
    crate::schedule::validate_condition(cond, registry).into_result()?;
    model.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let normal = Normal::new(0.0, model.noise).expect("noise validated");
    let total = cond.total_steps();
    let mut snapshots = Vec::new();
    let mut truth = Vec::new();
    let mut step = model.eval_interval;
    while step <= total {
        let exposure = cumulative_group_exposure(cond, registry, step);
        let value = |c: &CapabilityCurve| curve_value(c, &exposure, model.exposure_scale);
        let t = CapabilityTruth {
            step,
            general: value(&model.general).clamp(0.0, model.general.ceiling),
            reasoning: value(&model.reasoning).clamp(0.0, model.reasoning.ceiling),
            detail: value(&model.detail).clamp(0.0, model.detail.ceiling),
        };
        let mut snap = EvalSnapshot::new(step);
        for (task, offset) in TASK_OFFSETS {
            let (base, ceiling) = match task {
                Task::GeneralVal => (t.general, model.general.ceiling),
                Task::Ai2d | Task::ChartQa => (t.reasoning, model.reasoning.ceiling),
                Task::TextVqa | Task::DocVqa => (t.detail, model.detail.ceiling),
            };
            let noise = if model.noise > 0.0 {
                normal.sample(&mut rng)
            } else {
                0.0
            };
            let noisy = (base + noise).clamp(0.0, ceiling);
            snap.scores.insert(task, to_score(noisy + offset));
        }
        snapshots.push(snap);
        truth.push(t);
        step += model.eval_interval;
    }
    Ok((snapshots, truth))
}

/// Simulation input file: a loss spec, and optionally a condition plus
/// capability model for eval snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    #[serde(default)]
    pub seed: u64,
    pub loss: Option<LossTraceSpec>,
    pub capability: Option<CapabilitySimulation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapabilitySimulation {
    /// Built-in condition id; `steps` gives its three stage lengths.
    pub condition: String,
    pub steps: [u64; 3],
    pub model: CapabilityModelSpec,
}

impl SimulationSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("simulation spec", e))
    }
}
