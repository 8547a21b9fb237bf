//! Training-dynamics statistics over logged loss traces.
//!
//! Window statistics are taken over the last `u` *logged* positions, the
//! newest one included, with the population standard deviation (divide by
//! `u`). Missing step numbers are tolerated; [`LossTrace::gaps`] lists them.
//!
//! The spike test `|ℓ_t − μ_t| > 2σ_t` is evaluated on values re-centred at
//! `ℓ_t`: with `y_i = ℓ_i − ℓ_t`, `S = Σy` and `Q = Σy²`, the test becomes
//! `5·S² > 4·u·Q`. That form has no square root or division, so windows of
//! small-integer losses are decided exactly (a lone outlier on a flat
//! background with `u = 5` sits on the boundary and is not a spike), and a
//! flat window gives `S = Q = 0` and never fires.

use std::collections::VecDeque;
use std::io::{BufRead, Read};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 50;
pub const DEFAULT_SPIKE_WINDOW: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub stage: u32,
    pub loss: f64,
}

/// Ordered loss records: steps strictly increasing, stages non-decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    records: Vec<LossRecord>,
}

/// A run of missing step numbers between two logged steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Gap {
    pub after: u64,
    pub before: u64,
}

impl Gap {
    pub fn missing(&self) -> u64 {
        self.before - self.after - 1
    }
}

impl LossTrace {
    pub fn new(records: Vec<LossRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.step == 0 {
                return Err(Error::InvalidData(format!("record {}: steps are 1-based", i + 1)));
            }
            if !r.loss.is_finite() || r.loss < 0.0 {
                return Err(Error::InvalidData(format!(
                    "step {}: loss must be a finite non-negative number, got {}",
                    r.step, r.loss
                )));
            }
            if i > 0 {
                let prev = &records[i - 1];
                if r.step <= prev.step {
                    return Err(Error::InvalidData(format!(
                        "steps must be strictly increasing ({} follows {})",
                        r.step, prev.step
                    )));
                }
                if r.stage < prev.stage {
                    return Err(Error::InvalidData(format!(
                        "stages must be non-decreasing (stage {} at step {} follows stage {})",
                        r.stage, r.step, prev.stage
                    )));
                }
            }
        }
        Ok(LossTrace { records })
    }

    /// Builds a trace from consecutive losses starting at step 1.
    pub fn from_losses(stage: u32, losses: &[f64]) -> Result<Self> {
        LossTrace::new(
            losses
                .iter()
                .enumerate()
                .map(|(i, &loss)| LossRecord {
                    step: i as u64 + 1,
                    stage,
                    loss,
                })
                .collect(),
        )
    }

    pub fn records(&self) -> &[LossRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Distinct stages in order of appearance.
    pub fn stages(&self) -> Vec<u32> {
        let mut out: Vec<u32> = self.records.iter().map(|r| r.stage).collect();
        out.dedup();
        out
    }

    pub fn gaps(&self) -> Vec<Gap> {
        self.records
            .windows(2)
            .filter(|w| w[1].step > w[0].step + 1)
            .map(|w| Gap {
                after: w[0].step,
                before: w[1].step,
            })
            .collect()
    }
}

/// Statistics of one full window, reported at its newest position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowPoint {
    pub mean: f64,
    pub std: f64,
    pub spike: bool,
}

/// Evaluates one window. `window` is ordered oldest to newest and non-empty.
fn evaluate<I>(window: I, newest: f64, u: usize) -> WindowPoint
where
    I: Iterator<Item = f64>,
{
    let mut s = 0.0;
    let mut q = 0.0;
    for x in window {
        let y = x - newest;
        s += y;
        q += y * y;
    }
    let n = u as f64;
    let shift = s / n;
    let var = (q / n - shift * shift).max(0.0);
    WindowPoint {
        mean: newest + shift,
        std: var.sqrt(),
        spike: 5.0 * (s * s) > 4.0 * n * q,
    }
}

/// Streaming window statistics: push losses one at a time, get a
/// [`WindowPoint`] once the window is full.
#[derive(Debug, Clone)]
pub struct RollingWindow {
    size: usize,
    buf: VecDeque<f64>,
}

impl RollingWindow {
    pub fn new(size: usize) -> Result<Self> {
        check_window(size, "window")?;
        Ok(RollingWindow {
            size,
            buf: VecDeque::with_capacity(size),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn push(&mut self, loss: f64) -> Option<WindowPoint> {
        if self.buf.len() == self.size {
            self.buf.pop_front();
        }
        self.buf.push_back(loss);
        (self.buf.len() == self.size).then(|| evaluate(self.buf.iter().copied(), loss, self.size))
    }
}

/// Per-position local mean and standard deviation for every full window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowStats {
    pub window: usize,
    /// Step of the newest record in each window.
    pub steps: Vec<u64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn check_window(size: usize, name: &str) -> Result<()> {
    if size < 2 {
        return Err(Error::Precondition(format!(
            "{name} size must be at least 2, got {size}"
        )));
    }
    Ok(())
}

fn check_length(trace: &LossTrace, size: usize, name: &str) -> Result<()> {
    check_window(size, name)?;
    if trace.len() < size {
        return Err(Error::Precondition(format!(
            "trace has {} records, fewer than the {name} size {size}",
            trace.len()
        )));
    }
    Ok(())
}

/// Batch form of [`RollingWindow`], evaluated over slices of the trace.
pub fn window_stats(trace: &LossTrace, window: usize) -> Result<WindowStats> {
    check_length(trace, window, "window")?;
    let losses = trace.losses();
    let n = losses.len() - window + 1;
    let mut stats = WindowStats {
        window,
        steps: Vec::with_capacity(n),
        mean: Vec::with_capacity(n),
        std: Vec::with_capacity(n),
    };
    for (end, slice) in losses.windows(window).enumerate() {
        let p = evaluate(slice.iter().copied(), slice[window - 1], window);
        stats.steps.push(trace.records[end + window - 1].step);
        stats.mean.push(p.mean);
        stats.std.push(p.std);
    }
    Ok(stats)
}

/// Population standard deviation of the last `w` losses at each full window.
pub fn local_fluctuation(trace: &LossTrace, w: usize) -> Result<Vec<(u64, f64)>> {
    let stats = window_stats(trace, w)?;
    Ok(stats.steps.into_iter().zip(stats.std).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpikeReport {
    pub window: usize,
    pub trace_len: usize,
    /// `T − u + 1`.
    pub valid_windows: usize,
    pub spike_steps: Vec<u64>,
    pub frequency: f64,
    /// One flag per valid window, aligned with positions `u..=T`.
    #[serde(skip)]
    pub indicator: Vec<bool>,
}

/// Flags every step whose loss lies more than two local standard deviations
/// from the mean of the window ending at it.
pub fn detect_spikes(trace: &LossTrace, u: usize) -> Result<SpikeReport> {
    check_length(trace, u, "spike window")?;
    let mut window = RollingWindow::new(u)?;
    let valid_windows = trace.len() - u + 1;
    let mut indicator = Vec::with_capacity(valid_windows);
    let mut spike_steps = Vec::new();
    for r in &trace.records {
        if let Some(p) = window.push(r.loss) {
            indicator.push(p.spike);
            if p.spike {
                spike_steps.push(r.step);
            }
        }
    }
    let frequency = spike_steps.len() as f64 / valid_windows as f64;
    Ok(SpikeReport {
        window: u,
        trace_len: trace.len(),
        valid_windows,
        spike_steps,
        frequency,
        indicator,
    })
}

pub fn spike_frequency(report: &SpikeReport) -> f64 {
    report.spike_steps.len() as f64 / report.valid_windows as f64
}

/// Renders a fraction as a percentage with two decimals, e.g. `1.48%`.
pub fn format_percent(fraction: f64) -> String {
    format!("{:.2}%", fraction * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Boundary {
    pub from_stage: u32,
    pub to_stage: u32,
    /// Last logged step of the old stage.
    pub last_step: u64,
    /// First logged step of the new stage.
    pub first_step: u64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionReport {
    pub boundaries: Vec<Boundary>,
}

impl TransitionReport {
    /// Largest `|ratio|` over all boundaries.
    pub fn max_abs_ratio(&self) -> f64 {
        self.boundaries.iter().map(|b| b.ratio.abs()).fold(0.0, f64::max)
    }
}

/// Relative loss change `(ℓ₊ − ℓ₋) / ℓ₋` across every consecutive stage boundary.
pub fn stage_transition_ratio(trace: &LossTrace) -> Result<TransitionReport> {
    if trace.stages().len() < 2 {
        return Err(Error::Precondition(
            "stage-transition ratio needs a trace with at least two stages".into(),
        ));
    }
    let mut boundaries = Vec::new();
    for w in trace.records.windows(2) {
        let (before, after) = (&w[0], &w[1]);
        if before.stage == after.stage {
            continue;
        }
        if after.stage != before.stage + 1 {
            return Err(Error::InvalidData(format!(
                "no records logged for stage {} (trace jumps from stage {} to {} at step {})",
                before.stage + 1,
                before.stage,
                after.stage,
                after.step
            )));
        }
        if before.loss == 0.0 {
            return Err(Error::InvalidData(format!(
                "loss is zero at step {}, the last step of stage {}; ratio undefined",
                before.step, before.stage
            )));
        }
        boundaries.push(Boundary {
            from_stage: before.stage,
            to_stage: after.stage,
            last_step: before.step,
            first_step: after.step,
            loss_before: before.loss,
            loss_after: after.loss,
            ratio: (after.loss - before.loss) / before.loss,
        });
    }
    Ok(TransitionReport { boundaries })
}

/// One row of the stability table plus the reports it was built from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilitySummary {
    pub window: usize,
    pub spike_window: usize,
    /// Mean of the windowed σ series (the headline "loss std").
    pub loss_std: f64,
    /// Population standard deviation of the whole trace.
    pub global_loss_std: f64,
    pub spike_frequency: f64,
    /// Max `|ratio|` over boundaries; `None` for single-stage traces.
    pub transition_stability: Option<f64>,
    pub spikes: SpikeReport,
    pub transitions: Option<TransitionReport>,
    pub gaps: Vec<Gap>,
}

pub const STABILITY_HEADER: [&str; 4] = ["Condition", "Loss Std", "Spike Freq.", "Stage Tran Stab"];

impl StabilitySummary {
    /// The three table cells: σ with three decimals, spike frequency as a
    /// percentage with two, transition stability with two.
    pub fn cells(&self) -> [String; 3] {
        [
            format!("{:.3}", self.loss_std),
            format_percent(self.spike_frequency),
            self.transition_stability
                .map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}")),
        ]
    }

    pub fn render_row(&self) -> String {
        self.cells().join(" / ")
    }
}

/// Renders labelled summaries as an aligned table.
pub fn render_stability_table(rows: &[(String, &StabilitySummary)]) -> String {
    let mut table: Vec<Vec<String>> = vec![STABILITY_HEADER.iter().map(|s| s.to_string()).collect()];
    for (label, s) in rows {
        let mut row = vec![label.clone()];
        row.extend(s.cells());
        table.push(row);
    }
    let widths: Vec<usize> = (0..4)
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
    out
}

pub fn stability_summary(trace: &LossTrace, w: usize, u: usize) -> Result<StabilitySummary> {
    let sigma = local_fluctuation(trace, w)?;
    let spikes = detect_spikes(trace, u)?;
    let loss_std = sigma.iter().map(|&(_, s)| s).sum::<f64>() / sigma.len() as f64;
    let transitions = if trace.stages().len() >= 2 {
        Some(stage_transition_ratio(trace)?)
    } else {
        None
    };
    Ok(StabilitySummary {
        window: w,
        spike_window: u,
        loss_std,
        global_loss_std: population_std(&trace.losses()),
        spike_frequency: spike_frequency(&spikes),
        transition_stability: transitions.as_ref().map(TransitionReport::max_abs_ratio),
        spikes,
        transitions,
        gaps: trace.gaps(),
    })
}

fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Reads line-delimited `{"step", "stage", "loss"}` records. Blank lines are skipped.
pub fn read_loss_jsonl<R: BufRead>(input: R) -> Result<LossTrace> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: LossRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(format!("loss log line {}", i + 1), e))?;
        records.push(r);
    }
    LossTrace::new(records)
}

pub fn write_loss_jsonl<W: std::io::Write>(trace: &LossTrace, mut out: W) -> Result<()> {
    for r in &trace.records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct StepLoss {
    step: u64,
    loss: f64,
}

#[derive(Debug, Deserialize)]
struct StageStart {
    stage: u32,
    start_step: u64,
}

/// Reads the two-column `step,loss` form plus a sidecar `stage,start_step`
/// file; each record gets the last stage whose start is at or before it.
pub fn read_loss_csv<R: Read, S: Read>(losses: R, boundaries: S) -> Result<LossTrace> {
    let mut starts: Vec<StageStart> = csv::Reader::from_reader(boundaries)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::parse("stage boundary file", e))?;
    if starts.is_empty() {
        return Err(Error::parse("stage boundary file", "no stages listed"));
    }
    starts.sort_by_key(|s| s.start_step);
    let rows: Vec<StepLoss> = csv::Reader::from_reader(losses)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::parse("loss csv", e))?;
    let mut records = Vec::with_capacity(rows.len());
    for row in rows {
        let stage = starts
            .iter()
            .take_while(|s| s.start_step <= row.step)
            .last()
            .ok_or_else(|| Error::InvalidData(format!("step {} precedes the first stage boundary", row.step)))?
            .stage;
        records.push(LossRecord {
            step: row.step,
            stage,
            loss: row.loss,
        });
    }
    LossTrace::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(losses: &[f64]) -> LossTrace {
        LossTrace::from_losses(1, losses).unwrap()
    }

    fn two_stage(first: &[f64], second: &[f64]) -> LossTrace {
        let mut records = Vec::new();
        for (i, &l) in first.iter().chain(second).enumerate() {
            records.push(LossRecord {
                step: i as u64 + 1,
                stage: if i < first.len() { 1 } else { 2 },
                loss: l,
            });
        }
        LossTrace::new(records).unwrap()
    }

    #[test]
    fn constant_trace_has_zero_fluctuation() {
        let t = trace(&[0.3; 40]);
        assert!(local_fluctuation(&t, 7).unwrap().iter().all(|&(_, s)| s == 0.0));
        let r = detect_spikes(&t, 7).unwrap();
        assert!(r.spike_steps.is_empty());
        assert_eq!(r.frequency, 0.0);
    }

    #[test]
    fn adjacent_pairs_have_half_unit_sigma() {
        let t = trace(&[1.0, 2.0, 3.0, 4.0]);
        let s = local_fluctuation(&t, 2).unwrap();
        assert_eq!(s, vec![(2, 0.5), (3, 0.5), (4, 0.5)]);
    }

    #[test]
    fn window_longer_than_trace() {
        let t = trace(&[1.0; 10]);
        assert!(matches!(local_fluctuation(&t, 11), Err(Error::Precondition(_))));
        assert!(matches!(detect_spikes(&t, 11), Err(Error::Precondition(_))));
        assert!(matches!(local_fluctuation(&t, 1), Err(Error::Precondition(_))));
    }

    fn lone_outlier(len: usize, at: usize) -> LossTrace {
        let mut v = vec![1.0; len];
        v[at - 1] = 10.0;
        trace(&v)
    }

    #[test]
    fn lone_outlier_boundary() {
        let t = lone_outlier(99, 50);
        assert_eq!(detect_spikes(&t, 6).unwrap().spike_steps, vec![50]);
        assert!(detect_spikes(&t, 5).unwrap().spike_steps.is_empty());
    }

    #[test]
    fn linear_segments_are_never_spikes() {
        for slope in [-3.0, -0.25, 0.5, 7.0] {
            let v: Vec<f64> = (0..300).map(|i| 1000.0 + slope * i as f64).collect();
            for u in [2, 3, 10, 57] {
                assert!(detect_spikes(&trace(&v), u).unwrap().spike_steps.is_empty());
            }
        }
    }

    #[test]
    fn window_count_and_frequency() {
        let mut v = vec![1.0; 202];
        for at in [60, 120, 180] {
            v[at] = 50.0;
        }
        let r = detect_spikes(&trace(&v), 50).unwrap();
        assert_eq!(r.valid_windows, 153);
        assert_eq!(r.indicator.len(), 153);
        assert_eq!(r.spike_steps, vec![61, 121, 181]);
        assert_eq!(format_percent(spike_frequency(&r)), "1.96%");
    }

    #[test]
    fn percent_format() {
        assert_eq!(format_percent(0.0148), "1.48%");
        assert_eq!(format_percent(0.0), "0.00%");
    }

    #[test]
    fn spike_steps_use_logged_step_numbers() {
        let mut records: Vec<LossRecord> = (0..20)
            .map(|i| LossRecord {
                step: 10 * (i + 1),
                stage: 1,
                loss: 1.0,
            })
            .collect();
        records[12].loss = 9.0;
        let t = LossTrace::new(records).unwrap();
        assert_eq!(detect_spikes(&t, 8).unwrap().spike_steps, vec![130]);
        assert_eq!(t.gaps().len(), 19);
        assert_eq!(t.gaps()[0].missing(), 9);
    }

    #[test]
    fn streaming_matches_batch() {
        let v: Vec<f64> = (0..500).map(|i| ((i * 37 % 101) as f64).sin() + 2.0).collect();
        let t = trace(&v);
        let batch = window_stats(&t, 13).unwrap();
        let mut rw = RollingWindow::new(13).unwrap();
        let streamed: Vec<WindowPoint> = v.iter().filter_map(|&x| rw.push(x)).collect();
        assert_eq!(streamed.len(), batch.mean.len());
        for (p, (m, s)) in streamed.iter().zip(batch.mean.iter().zip(&batch.std)) {
            assert_eq!(p.mean.to_bits(), m.to_bits());
            assert_eq!(p.std.to_bits(), s.to_bits());
        }
    }

    #[test]
    fn transition_ratio() {
        let r = stage_transition_ratio(&two_stage(&[3.0, 2.0], &[2.5, 2.4])).unwrap();
        assert_eq!(r.boundaries.len(), 1);
        let b = &r.boundaries[0];
        assert_eq!((b.last_step, b.first_step), (2, 3));
        assert!((b.ratio - 0.25).abs() < 1e-12);

        let r = stage_transition_ratio(&two_stage(&[2.0, 2.0], &[2.0])).unwrap();
        assert_eq!(r.boundaries[0].ratio, 0.0);
    }

    #[test]
    fn three_stages_two_boundaries_in_order() {
        let records = [(1, 1, 2.0), (2, 1, 1.0), (3, 2, 1.5), (4, 2, 1.0), (5, 3, 0.5)]
            .iter()
            .map(|&(step, stage, loss)| LossRecord { step, stage, loss })
            .collect();
        let r = stage_transition_ratio(&LossTrace::new(records).unwrap()).unwrap();
        let pairs: Vec<(u32, u32)> = r.boundaries.iter().map(|b| (b.from_stage, b.to_stage)).collect();
        assert_eq!(pairs, vec![(1, 2), (2, 3)]);
        assert_eq!(r.boundaries[0].ratio, 0.5);
        assert_eq!(r.boundaries[1].ratio, -0.5);
        assert_eq!(r.max_abs_ratio(), 0.5);
    }

    #[test]
    fn transition_errors() {
        assert!(matches!(
            stage_transition_ratio(&trace(&[1.0, 2.0])),
            Err(Error::Precondition(_))
        ));
        let records = [(1, 1, 2.0), (2, 3, 1.0)]
            .iter()
            .map(|&(step, stage, loss)| LossRecord { step, stage, loss })
            .collect();
        assert!(matches!(
            stage_transition_ratio(&LossTrace::new(records).unwrap()),
            Err(Error::InvalidData(_))
        ));
    }

    #[test]
    fn trace_validation() {
        let bad_order = vec![
            LossRecord {
                step: 2,
                stage: 1,
                loss: 1.0,
            },
            LossRecord {
                step: 2,
                stage: 1,
                loss: 1.0,
            },
        ];
        assert!(LossTrace::new(bad_order).is_err());
        let bad_stage = vec![
            LossRecord {
                step: 1,
                stage: 2,
                loss: 1.0,
            },
            LossRecord {
                step: 2,
                stage: 1,
                loss: 1.0,
            },
        ];
        assert!(LossTrace::new(bad_stage).is_err());
        assert!(LossTrace::from_losses(1, &[1.0, -0.5]).is_err());
        assert!(LossTrace::from_losses(1, &[f64::NAN]).is_err());
    }

    #[test]
    fn summary_of_flat_two_stage_trace() {
        let t = two_stage(&[1.5; 60], &[1.5; 60]);
        let s = stability_summary(&t, 50, 50).unwrap();
        assert_eq!(s.cells(), ["0.000".to_string(), "0.00%".into(), "0.00".into()]);
        assert_eq!(s.render_row(), "0.000 / 0.00% / 0.00");
    }

    #[test]
    fn summary_of_single_stage_trace_has_no_transition() {
        let s = stability_summary(&trace(&[1.0, 2.0, 3.0]), 2, 2).unwrap();
        assert_eq!(s.transition_stability, None);
        assert_eq!(s.cells()[2], "n/a");
        assert_eq!(s.loss_std, 0.5);
    }

    #[test]
    fn jsonl_round_trip() {
        let t = two_stage(&[2.0, 1.75], &[1.5]);
        let mut buf = Vec::new();
        write_loss_jsonl(&t, &mut buf).unwrap();
        assert_eq!(read_loss_jsonl(&buf[..]).unwrap(), t);
    }

    #[test]
    fn csv_with_stage_sidecar() {
        let losses = "step,loss\n1,2.0\n2,1.9\n3,1.8\n5,2.1\n";
        let stages = "stage,start_step\n1,1\n2,4\n";
        let t = read_loss_csv(losses.as_bytes(), stages.as_bytes()).unwrap();
        let st: Vec<u32> = t.records().iter().map(|r| r.stage).collect();
        assert_eq!(st, vec![1, 1, 1, 2]);
        assert_eq!(t.gaps(), vec![Gap { after: 3, before: 5 }]);
    }
}
