//! Multi-stage data-mixture schedules for instruction tuning, deterministic
//! sample manifests, and analytics over the resulting training runs.
//!
//! - [`schedule`]: conditions, the dataset registry, validation, presets A–D.
//! - [`exposure`]: expected per-dataset exposure and cross-condition checks.
//! - [`sampler`]: seeded two-level sampling into a line-delimited manifest.
//! - [`dynamics`]: windowed loss fluctuation, spike detection, stage-transition ratios.
//! - [`metrics`]: capability aggregates, comparison tables, trajectories.
//! - [`simulator`]: synthetic traces and trajectories with ground truth.

pub mod dynamics;
pub mod error;
pub mod exposure;
pub mod metrics;
pub mod sampler;
pub mod schedule;
pub mod simulator;

pub use error::{Error, Result};
pub use schedule::{builtin_condition, validate_condition, Preset, Registry, ScheduleCondition};
