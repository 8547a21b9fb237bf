//! Deterministic realization of a schedule as a step-by-step manifest.
//!
//! Every step draws a dataset i.i.d. from the active stage's distribution by
//! inverse CDF over the datasets in lexicographic name order, then takes the
//! next instance from that dataset's current shuffled permutation. A dataset
//! whose permutation is exhausted is reshuffled with a fresh permutation, so
//! after `k · N` draws from a dataset of size `N` every instance has been seen
//! exactly `k` times.
//!
//! All randomness comes from ChaCha8 keyed by `SHA-256(KEY_DOMAIN ‖ seed)`.
//! Stream 0 feeds the dataset draws (one `u64` per step); stream
//! `(ordinal + 1) << 32 | epoch` feeds the Fisher–Yates shuffle of one
//! dataset's permutation for one epoch. Sampler state is therefore just the
//! step counter, the stream-0 word position, and an `(epoch, position)` pair
//! per dataset, which is what [`Checkpoint`] stores.
//!
//! Probabilities with more than 12 significant digits are not supported: CDF
//! boundaries are accumulated in double precision.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::schedule::{validate_condition, Registry, ScheduleCondition};

/// Identifier written into every manifest header.
pub const GENERATOR_ID: &str = "chacha8/rand_chacha-0.9;key=sha256;cdf=lex;perm=fisher-yates-lemire;v1";
pub const MANIFEST_FORMAT: &str = "stagemix-manifest/1";

const KEY_DOMAIN: &[u8] = b"stagemix/sampler/v1";

/// One draw. The dataset is an index into [`Sampler::dataset_names`]; use
/// [`Sampler::resolve`] for the named form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleEvent {
    pub step: u64,
    pub stage: u32,
    pub dataset_ordinal: usize,
    pub instance: u64,
}

/// An event with its dataset name resolved, as it appears on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub step: u64,
    pub stage: u32,
    pub dataset: String,
    pub instance: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpan {
    pub index: u32,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub condition: String,
    pub seed: u64,
    pub generator: String,
    pub registry_digest: String,
    pub total_steps: u64,
    pub stages: Vec<StageSpan>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub events: Vec<EventRecord>,
}

#[derive(Debug, Clone)]
struct CompiledStage {
    index: u32,
    /// Last global step (1-based, inclusive) of the stage.
    end: u64,
    /// `(dataset ordinal, cumulative probability)` over the positive-probability
    /// support, in lexicographic name order.
    cdf: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Default)]
struct Cursor {
    epoch: u64,
    position: u64,
    permutation: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CursorState {
    pub dataset: String,
    pub epoch: u64,
    pub position: u64,
}

/// Everything needed to continue a sampler exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub generator: String,
    pub condition: ScheduleCondition,
    pub registry: Registry,
    pub seed: u64,
    pub step: u64,
    pub draw_word_pos: u128,
    pub cursors: Vec<CursorState>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("checkpoint", e))
    }
}

pub struct Sampler {
    condition: ScheduleCondition,
    registry: Registry,
    seed: u64,
    key: [u8; 32],
    names: Vec<String>,
    sizes: Vec<u64>,
    stages: Vec<CompiledStage>,
    stage_pos: usize,
    draw_rng: ChaCha8Rng,
    step: u64,
    total: u64,
    cursors: Vec<Cursor>,
}

impl Sampler {
    pub fn new(condition: &ScheduleCondition, registry: &Registry, seed: u64) -> Result<Self> {
        validate_condition(condition, registry).into_result()?;
        let key = derive_key(seed);
        let sorted = registry.sorted();
        let names: Vec<String> = sorted.iter().map(|d| d.name.clone()).collect();
        let sizes: Vec<u64> = sorted.iter().map(|d| d.size).collect();

        let mut stages = Vec::with_capacity(condition.stages.len());
        let mut end = 0u64;
        for stage in &condition.stages {
            end += stage.steps;
            let mut acc = 0.0;
            let cdf = names
                .iter()
                .enumerate()
                .filter_map(|(i, name)| {
                    let p = stage.probability(name);
                    (p > 0.0).then(|| {
                        acc += p;
                        (i, acc)
                    })
                })
                .collect();
            stages.push(CompiledStage {
                index: stage.index,
                end,
                cdf,
            });
        }

        let mut draw_rng = ChaCha8Rng::from_seed(key);
        draw_rng.set_stream(0);

        let mut sampler = Sampler {
            condition: condition.clone(),
            registry: registry.clone(),
            seed,
            key,
            cursors: vec![Cursor::default(); names.len()],
            names,
            sizes,
            stages,
            stage_pos: 0,
            draw_rng,
            step: 0,
            total: end,
        };
        sampler.sync_stage();
        Ok(sampler)
    }

    pub fn resume(checkpoint: &Checkpoint) -> Result<Self> {
        if checkpoint.generator != GENERATOR_ID {
            return Err(Error::InvalidData(format!(
                "checkpoint was written by generator `{}`, this build uses `{GENERATOR_ID}`",
                checkpoint.generator
            )));
        }
        let mut sampler = Sampler::new(&checkpoint.condition, &checkpoint.registry, checkpoint.seed)?;
        if checkpoint.step > sampler.total {
            return Err(Error::InvalidData(format!(
                "checkpoint step {} is beyond the schedule's {} steps",
                checkpoint.step, sampler.total
            )));
        }
        if checkpoint.cursors.len() != sampler.cursors.len() {
            return Err(Error::InvalidData(
                "checkpoint cursor count does not match registry".into(),
            ));
        }
        for (i, state) in checkpoint.cursors.iter().enumerate() {
            if state.dataset != sampler.names[i] || state.position > sampler.sizes[i] {
                return Err(Error::InvalidData(format!(
                    "checkpoint cursor for `{}` does not match the registry",
                    state.dataset
                )));
            }
            sampler.cursors[i] = Cursor {
                epoch: state.epoch,
                position: state.position,
                permutation: None,
            };
        }
        sampler.step = checkpoint.step;
        sampler.draw_rng.set_word_pos(checkpoint.draw_word_pos);
        sampler.sync_stage();
        Ok(sampler)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            generator: GENERATOR_ID.to_string(),
            condition: self.condition.clone(),
            registry: self.registry.clone(),
            seed: self.seed,
            step: self.step,
            draw_word_pos: self.draw_rng.get_word_pos(),
            cursors: self
                .names
                .iter()
                .zip(&self.cursors)
                .map(|(name, c)| CursorState {
                    dataset: name.clone(),
                    epoch: c.epoch,
                    position: c.position,
                })
                .collect(),
        }
    }

    pub fn header(&self) -> ManifestHeader {
        ManifestHeader {
            format: MANIFEST_FORMAT.to_string(),
            condition: self.condition.id.clone(),
            seed: self.seed,
            generator: GENERATOR_ID.to_string(),
            registry_digest: self.registry.digest(),
            total_steps: self.total,
            stages: self
                .condition
                .stages
                .iter()
                .map(|s| StageSpan {
                    index: s.index,
                    steps: s.steps,
                })
                .collect(),
        }
    }

    /// Steps drawn so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total
    }

    pub fn remaining(&self) -> u64 {
        self.total - self.step
    }

    /// Dataset names in canonical (lexicographic) order.
    pub fn dataset_names(&self) -> &[String] {
        &self.names
    }

    fn sync_stage(&mut self) {
        let next = self.step + 1;
        while self.stage_pos + 1 < self.stages.len() && self.stages[self.stage_pos].end < next {
            self.stage_pos += 1;
        }
    }

    pub fn next_event(&mut self) -> Result<SampleEvent> {
        if self.step >= self.total {
            return Err(Error::Exhausted(self.total));
        }
        self.sync_stage();
        let stage = &self.stages[self.stage_pos];
        let u = unit_f64(self.draw_rng.next_u64());
        let ordinal = match stage.cdf.iter().find(|&&(_, c)| u < c) {
            Some(&(i, _)) => i,
            // Sum fell short of 1 by at most the validation tolerance.
            None => stage.cdf.last().expect("validated stage has support").0,
        };
        let stage_index = stage.index;
        let instance = self.next_instance(ordinal);
        self.step += 1;
        Ok(SampleEvent {
            step: self.step,
            stage: stage_index,
            dataset_ordinal: ordinal,
            instance,
        })
    }

    pub fn resolve(&self, event: &SampleEvent) -> EventRecord {
        EventRecord {
            step: event.step,
            stage: event.stage,
            dataset: self.names[event.dataset_ordinal].clone(),
            instance: event.instance,
        }
    }

    fn next_instance(&mut self, ordinal: usize) -> u64 {
        let size = self.sizes[ordinal];
        let key = self.key;
        let cursor = &mut self.cursors[ordinal];
        if cursor.position == size {
            cursor.epoch += 1;
            cursor.position = 0;
            cursor.permutation = None;
        }
        let perm = cursor
            .permutation
            .get_or_insert_with(|| permutation(&key, ordinal, cursor.epoch, size));
        let instance = perm[cursor.position as usize];
        cursor.position += 1;
        instance
    }
}

impl Iterator for Sampler {
    type Item = SampleEvent;

    fn next(&mut self) -> Option<SampleEvent> {
        self.next_event().ok()
    }
}

fn derive_key(seed: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(KEY_DOMAIN);
    hasher.update(seed.to_le_bytes());
    hasher.finalize().into()
}

/// Top 53 bits of a word as a uniform double in `[0, 1)`.
fn unit_f64(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform integer in `[0, n)` by Lemire's multiply-shift with rejection.
fn uniform_below(rng: &mut ChaCha8Rng, n: u64) -> u64 {
    debug_assert!(n > 0);
    let mut m = rng.next_u64() as u128 * n as u128;
    let mut low = m as u64;
    if low < n {
        let threshold = n.wrapping_neg() % n;
        while low < threshold {
            m = rng.next_u64() as u128 * n as u128;
            low = m as u64;
        }
    }
    (m >> 64) as u64
}

fn permutation(key: &[u8; 32], ordinal: usize, epoch: u64, size: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::from_seed(*key);
    rng.set_stream(((ordinal as u64 + 1) << 32) | (epoch & 0xffff_ffff));
    let mut perm: Vec<u64> = (0..size).collect();
    for i in (1..perm.len()).rev() {
        let j = uniform_below(&mut rng, i as u64 + 1) as usize;
        perm.swap(i, j);
    }
    perm
}

/// Runs a fresh sampler to the end of the schedule.
pub fn generate_manifest(cond: &ScheduleCondition, registry: &Registry, seed: u64) -> Result<Manifest> {
    let mut sampler = Sampler::new(cond, registry, seed)?;
    let header = sampler.header();
    let mut events = Vec::with_capacity(sampler.total_steps() as usize);
    while sampler.remaining() > 0 {
        let e = sampler.next_event()?;
        events.push(sampler.resolve(&e));
    }
    Ok(Manifest { header, events })
}

/// Relative frequency of each dataset among the events of one stage.
pub fn empirical_distribution(manifest: &Manifest, stage: u32) -> Result<BTreeMap<String, f64>> {
    if !manifest.header.stages.iter().any(|s| s.index == stage) {
        return Err(Error::UnknownStage(stage));
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut n = 0u64;
    for e in manifest.events.iter().filter(|e| e.stage == stage) {
        *counts.entry(e.dataset.clone()).or_default() += 1;
        n += 1;
    }
    Ok(counts.into_iter().map(|(k, c)| (k, c as f64 / n as f64)).collect())
}

/// Line-delimited manifest writer: one JSON header line, then one line per
/// event with fields in the fixed order `step, stage, dataset, instance`.
pub struct ManifestWriter<W: Write> {
    out: W,
    quoted: Vec<String>,
}

impl<W: Write> ManifestWriter<W> {
    /// `names` must be the sampler's canonical dataset order.
    pub fn new(out: W, names: &[String]) -> Self {
        let quoted = names
            .iter()
            .map(|n| serde_json::to_string(n).expect("string serializes"))
            .collect();
        ManifestWriter { out, quoted }
    }

    pub fn write_header(&mut self, header: &ManifestHeader) -> Result<()> {
        serde_json::to_writer(&mut self.out, header).map_err(std::io::Error::from)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn write_event(&mut self, e: &SampleEvent) -> Result<()> {
        writeln!(
            self.out,
            "{{\"step\":{},\"stage\":{},\"dataset\":{},\"instance\":{}}}",
            e.step, e.stage, self.quoted[e.dataset_ordinal], e.instance
        )?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Drives `sampler` for up to `limit` events (all remaining when `None`),
/// writing each one. Returns the number of events written.
pub fn write_events<W: Write>(
    sampler: &mut Sampler,
    writer: &mut ManifestWriter<W>,
    limit: Option<u64>,
) -> Result<u64> {
    let n = limit.map_or(sampler.remaining(), |l| l.min(sampler.remaining()));
    for _ in 0..n {
        let e = sampler.next_event()?;
        writer.write_event(&e)?;
    }
    Ok(n)
}

pub fn write_manifest<W: Write>(manifest: &Manifest, out: W) -> Result<()> {
    let mut out = std::io::BufWriter::new(out);
    serde_json::to_writer(&mut out, &manifest.header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for e in &manifest.events {
        writeln!(
            out,
            "{{\"step\":{},\"stage\":{},\"dataset\":{},\"instance\":{}}}",
            e.step,
            e.stage,
            serde_json::to_string(&e.dataset).expect("string serializes"),
            e.instance
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest<R: BufRead>(input: R) -> Result<Manifest> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::parse("manifest", "empty file, expected a header line"))??;
    let header: ManifestHeader = serde_json::from_str(&first).map_err(|e| Error::parse("manifest line 1", e))?;
    let mut events = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: EventRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(format!("manifest line {}", i + 2), e))?;
        if e.step != events.len() as u64 + 1 {
            return Err(Error::parse(
                format!("manifest line {}", i + 2),
                format!("expected step {}, found {}", events.len() + 1, e.step),
            ));
        }
        events.push(e);
    }
    Ok(Manifest { header, events })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{builtin_condition, DatasetGroup, DatasetSource, Preset, StagePlan};

    fn toy_registry() -> Registry {
        Registry::new(vec![
            DatasetSource::new("align", DatasetGroup::Alignment, 5),
            DatasetSource::new("a", DatasetGroup::General, 3),
            DatasetSource::new("b", DatasetGroup::Reasoning, 4),
            DatasetSource::new("c", DatasetGroup::Ocr, 7),
        ])
    }

    fn toy_condition(steps: [u64; 3]) -> ScheduleCondition {
        ScheduleCondition {
            id: "toy".into(),
            stages: vec![
                StagePlan::new(1, steps[0], [("align", 1.0)]),
                StagePlan::new(2, steps[1], [("a", 0.5), ("b", 0.25), ("c", 0.25)]),
                StagePlan::new(3, steps[2], [("b", 1.0)]),
            ],
        }
    }

    #[test]
    fn point_mass_stage_draws_one_dataset() {
        let m = generate_manifest(&toy_condition([4, 10, 9]), &toy_registry(), 1).unwrap();
        assert!(m.events[..4].iter().all(|e| e.dataset == "align"));
        assert!(m.events[14..].iter().all(|e| e.dataset == "b" && e.stage == 3));
    }

    #[test]
    fn deterministic() {
        let a = generate_manifest(&toy_condition([3, 50, 50]), &toy_registry(), 9).unwrap();
        let b = generate_manifest(&toy_condition([3, 50, 50]), &toy_registry(), 9).unwrap();
        let c = generate_manifest(&toy_condition([3, 50, 50]), &toy_registry(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn steps_and_stages_are_contiguous() {
        let m = generate_manifest(&toy_condition([2, 0, 5]), &toy_registry(), 3).unwrap();
        let steps: Vec<u64> = m.events.iter().map(|e| e.step).collect();
        assert_eq!(steps, (1..=7).collect::<Vec<_>>());
        let stages: Vec<u32> = m.events.iter().map(|e| e.stage).collect();
        assert_eq!(stages, vec![1, 1, 3, 3, 3, 3, 3]);
    }

    #[test]
    fn empty_budget_gives_empty_manifest() {
        let m = generate_manifest(&builtin_condition(Preset::C, [0, 0, 0]), &Registry::builtin(), 0).unwrap();
        assert!(m.events.is_empty());
        assert_eq!(m.header.total_steps, 0);
        assert_eq!(m.header.registry_digest, Registry::builtin().digest());
    }

    #[test]
    fn exhausted_sampler_errors() {
        let mut s = Sampler::new(&toy_condition([1, 1, 0]), &toy_registry(), 0).unwrap();
        s.next_event().unwrap();
        s.next_event().unwrap();
        assert!(matches!(s.next_event(), Err(Error::Exhausted(2))));
    }

    #[test]
    fn invalid_condition_is_rejected() {
        let mut c = toy_condition([1, 1, 1]);
        c.stages[1].distribution.insert("a".into(), 0.9);
        assert!(matches!(
            Sampler::new(&c, &toy_registry(), 0),
            Err(Error::InvalidCondition { .. })
        ));
    }

    #[test]
    fn zero_probability_dataset_never_drawn() {
        let mut c = toy_condition([0, 2000, 0]);
        c.stages[1] = StagePlan::new(2, 2000, [("a", 0.5), ("b", 0.0), ("c", 0.5)]);
        let m = generate_manifest(&c, &toy_registry(), 5).unwrap();
        assert!(m.events.iter().all(|e| e.dataset != "b"));
    }

    #[test]
    fn instances_within_range_and_refill() {
        let m = generate_manifest(&toy_condition([10, 0, 40]), &toy_registry(), 2).unwrap();
        // 10 draws from "align" (size 5): each instance exactly twice
        let mut counts = [0; 5];
        for e in m.events.iter().filter(|e| e.dataset == "align") {
            counts[e.instance as usize] += 1;
        }
        assert_eq!(counts, [2; 5]);
        // 40 draws from "b" (size 4): each instance exactly 10 times
        let mut counts = [0; 4];
        for e in m.events.iter().filter(|e| e.dataset == "b") {
            counts[e.instance as usize] += 1;
        }
        assert_eq!(counts, [10; 4]);
    }

    #[test]
    fn consecutive_epochs_use_different_permutations() {
        let key = derive_key(0);
        let p0 = permutation(&key, 0, 0, 50);
        let p1 = permutation(&key, 0, 1, 50);
        assert_ne!(p0, p1);
        let mut sorted = p1.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn uniform_below_stays_in_range() {
        let mut rng = ChaCha8Rng::from_seed([7; 32]);
        for n in [1u64, 2, 3, 7, 1 << 40, u64::MAX] {
            for _ in 0..100 {
                assert!(uniform_below(&mut rng, n) < n);
            }
        }
    }

    #[test]
    fn empirical_distribution_cases() {
        let m = generate_manifest(&toy_condition([5, 0, 6]), &toy_registry(), 4).unwrap();
        let d1 = empirical_distribution(&m, 1).unwrap();
        assert_eq!(d1.len(), 1);
        assert_eq!(d1["align"], 1.0);
        assert!(empirical_distribution(&m, 2).unwrap().is_empty());
        assert!(matches!(empirical_distribution(&m, 4), Err(Error::UnknownStage(4))));
    }

    #[test]
    fn manifest_file_round_trip() {
        let m = generate_manifest(&toy_condition([3, 7, 2]), &toy_registry(), 8).unwrap();
        let mut buf = Vec::new();
        write_manifest(&m, &mut buf).unwrap();
        let back = read_manifest(&buf[..]).unwrap();
        assert_eq!(back, m);
        let text = String::from_utf8(buf).unwrap();
        let second = text.lines().nth(1).unwrap();
        assert!(second.starts_with("{\"step\":1,\"stage\":1,\"dataset\":\"align\",\"instance\":"));
    }

    #[test]
    fn streaming_writer_matches_batch_writer() {
        let cond = toy_condition([3, 30, 5]);
        let m = generate_manifest(&cond, &toy_registry(), 11).unwrap();
        let mut batch = Vec::new();
        write_manifest(&m, &mut batch).unwrap();

        let mut s = Sampler::new(&cond, &toy_registry(), 11).unwrap();
        let mut w = ManifestWriter::new(Vec::new(), s.dataset_names());
        w.write_header(&s.header()).unwrap();
        write_events(&mut s, &mut w, None).unwrap();
        assert_eq!(w.into_inner(), batch);
    }

    #[test]
    fn checkpoint_json_round_trip_resumes() {
        let cond = toy_condition([3, 30, 5]);
        let full = generate_manifest(&cond, &toy_registry(), 6).unwrap();
        let mut s = Sampler::new(&cond, &toy_registry(), 6).unwrap();
        for _ in 0..13 {
            s.next_event().unwrap();
        }
        let ck = Checkpoint::from_json(&s.checkpoint().to_json()).unwrap();
        let mut resumed = Sampler::resume(&ck).unwrap();
        let mut rest = Vec::new();
        while let Ok(e) = resumed.next_event() {
            rest.push(resumed.resolve(&e));
        }
        assert_eq!(rest, full.events[13..]);
    }

    #[test]
    fn resume_rejects_foreign_generator() {
        let s = Sampler::new(&toy_condition([1, 1, 1]), &toy_registry(), 0).unwrap();
        let mut ck = s.checkpoint();
        ck.generator = "xorshift".into();
        assert!(Sampler::resume(&ck).is_err());
    }
}
