//! Browser bindings for the demo page in `www/`. Every export returns JSON
//! or plain text so the page needs no generated type glue beyond strings.

use serde::Serialize;
use stagemix::dynamics::{detect_spikes, stage_transition_ratio};
use stagemix::exposure::{compare_exposure, DEFAULT_WARN_THRESHOLD};
use stagemix::metrics::{comparison_table, EvalSnapshot};
use stagemix::sampler::{empirical_distribution, generate_manifest};
use stagemix::simulator::{synth_loss, Injection, LossStageSpec, LossTraceSpec};
use stagemix::{builtin_condition, Preset, Registry};
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[derive(Serialize)]
struct StageMix {
    stage: u32,
    target: std::collections::BTreeMap<String, f64>,
    observed: std::collections::BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct ScheduleView {
    exposure_table: String,
    stages: Vec<StageMix>,
}

/// Exposure table for all four presets, plus target vs. sampled mixture per
/// stage of `condition`.
pub fn schedule_view(condition: &str, t2: u64, t3: u64, seed: u64) -> Result<String, String> {
    let registry = Registry::builtin();
    let steps = [0, t2, t3];
    let presets: Vec<_> = Preset::ALL.iter().map(|&p| builtin_condition(p, steps)).collect();
    let cmp = compare_exposure(&presets, &registry, DEFAULT_WARN_THRESHOLD).map_err(|e| e.to_string())?;

    let preset: Preset = condition.parse().map_err(|e: stagemix::Error| e.to_string())?;
    let cond = builtin_condition(preset, steps);
    let manifest = generate_manifest(&cond, &registry, seed).map_err(|e| e.to_string())?;
    let mut stages = Vec::new();
    for plan in cond.post_alignment() {
        stages.push(StageMix {
            stage: plan.index,
            target: plan.distribution.clone(),
            observed: empirical_distribution(&manifest, plan.index).map_err(|e| e.to_string())?,
        });
    }
    let view = ScheduleView {
        exposure_table: cmp.render_text(),
        stages,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct SpikeView {
    losses: Vec<f64>,
    injected: Vec<u64>,
    detected: Vec<u64>,
    frequency: f64,
    ratios: Vec<f64>,
}

/// Simulates a three-stage loss curve with `spikes` injections of
/// `multiplier`× noise and runs the spike detector over it.
pub fn spike_view(noise: f64, window: usize, spikes: u32, multiplier: f64, seed: u64) -> Result<String, String> {
    let stage = |start| LossStageSpec {
        steps: 800,
        start,
        decay: 0.0003,
        noise,
    };
    let injections = (0..spikes as u64)
        .map(|k| Injection {
            step: 100 + (k * 2_300) / spikes.max(1) as u64,
            multiplier,
        })
        .collect();
    let spec = LossTraceSpec {
        stages: vec![stage(2.0), stage(2.2), stage(1.8)],
        injections,
    };
    let (trace, truth) = synth_loss(&spec, seed).map_err(|e| e.to_string())?;
    let report = detect_spikes(&trace, window).map_err(|e| e.to_string())?;
    let transitions = stage_transition_ratio(&trace).map_err(|e| e.to_string())?;
    let view = SpikeView {
        losses: trace.losses(),
        injected: truth.spike_steps,
        detected: report.spike_steps,
        frequency: report.frequency,
        ratios: transitions.boundaries.iter().map(|b| b.ratio).collect(),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

/// `rows` holds one line per condition: `name, general, ai2d, chartqa, textvqa, docvqa`.
pub fn comparison_view(rows: &str) -> Result<String, String> {
    let mut parsed = Vec::new();
    for (n, line) in rows.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 6 {
            return Err(format!("line {}: expected a name and five scores", n + 1));
        }
        let mut scores = [0.0; 5];
        for (slot, cell) in scores.iter_mut().zip(&cells[1..]) {
            *slot = cell
                .parse()
                .map_err(|_| format!("line {}: `{cell}` is not a number", n + 1))?;
        }
        let snap = EvalSnapshot::from_scores(0, scores).map_err(|e| format!("line {}: {e}", n + 1))?;
        parsed.push((cells[0].to_string(), snap));
    }
    comparison_table(&parsed)
        .map(|c| c.render_text())
        .map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = scheduleView)]
pub fn schedule_view_js(condition: &str, t2: u32, t3: u32, seed: u32) -> Result<String, JsValue> {
    schedule_view(condition, t2.into(), t3.into(), seed.into()).map_err(js)
}

#[wasm_bindgen(js_name = spikeView)]
pub fn spike_view_js(noise: f64, window: u32, spikes: u32, multiplier: f64, seed: u32) -> Result<String, JsValue> {
    spike_view(noise, window as usize, spikes, multiplier, seed.into()).map_err(js)
}

#[wasm_bindgen(js_name = comparisonView)]
pub fn comparison_view_js(rows: &str) -> Result<String, JsValue> {
    comparison_view(rows).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_view_reports_every_post_alignment_stage() {
        let v: serde_json::Value = serde_json::from_str(&schedule_view("B", 1000, 1000, 1).unwrap()).unwrap();
        assert_eq!(v["stages"].as_array().unwrap().len(), 2);
        assert!(v["exposure_table"].as_str().unwrap().contains("ShareGPT4V"));
        assert!(schedule_view("Q", 10, 10, 1).is_err());
    }

    #[test]
    fn spike_view_finds_large_injections() {
        let v: serde_json::Value = serde_json::from_str(&spike_view(0.02, 50, 4, 10.0, 3).unwrap()).unwrap();
        assert_eq!(v["losses"].as_array().unwrap().len(), 2400);
        for step in v["injected"].as_array().unwrap() {
            assert!(v["detected"].as_array().unwrap().contains(step));
        }
    }

    #[test]
    fn comparison_view_marks_best() {
        let text = comparison_view("A, 72.1, 74.0, 72.0, 70.8, 71.4\nB, 73.4, 76.0, 74.6, 71.8, 72.9\n").unwrap();
        assert!(text.contains("73.7*"));
        assert!(comparison_view("A, 1, 2").is_err());
    }
}
