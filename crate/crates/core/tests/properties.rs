use std::collections::BTreeMap;

use proptest::prelude::*;
use stagemix::dynamics::{detect_spikes, window_stats, LossTrace, RollingWindow};
use stagemix::exposure::{compare_exposure, compute_exposure};
use stagemix::metrics::{aggregate, comparison_table, Centi, Column, EvalSnapshot, Task};
use stagemix::sampler::{generate_manifest, Sampler};
use stagemix::schedule::{DatasetGroup, DatasetSource, StagePlan};
use stagemix::simulator::{synth_capability, CapabilityCurve, CapabilityModelSpec, Transfer};
use stagemix::{builtin_condition, validate_condition, Preset, Registry, ScheduleCondition};

const POST: [&str; 5] = ["AI2D", "ChartQA", "DocVQA", "ShareGPT4V", "TextVQA"];

/// Normalises positive weights into a distribution whose entries sum to 1 in f64.
fn distribution(weights: &[u32]) -> Vec<f64> {
    let total: u32 = weights.iter().sum();
    let mut p: Vec<f64> = weights.iter().map(|&w| w as f64 / total as f64).collect();
    let head: f64 = p[..p.len() - 1].iter().sum();
    *p.last_mut().unwrap() = 1.0 - head;
    p
}

fn post_stage(index: u32, steps: u64, weights: &[u32]) -> StagePlan {
    StagePlan::new(index, steps, POST.iter().copied().zip(distribution(weights)))
}

fn random_condition() -> impl Strategy<Value = ScheduleCondition> {
    (
        0u64..5_000,
        0u64..20_000,
        0u64..20_000,
        prop::collection::vec(1u32..100, 5),
        prop::collection::vec(1u32..100, 5),
    )
        .prop_map(|(t1, t2, t3, w2, w3)| ScheduleCondition {
            id: "random".into(),
            stages: vec![
                StagePlan::new(1, t1, [("LLaVA-Pretrain", 1.0)]),
                post_stage(2, t2, &w2),
                post_stage(3, t3, &w3),
            ],
        })
}

fn toy_registry(sizes: &[u64]) -> Registry {
    let mut datasets = vec![DatasetSource::new("align", DatasetGroup::Alignment, 4)];
    let groups = [DatasetGroup::General, DatasetGroup::Reasoning, DatasetGroup::Ocr];
    for (i, &n) in sizes.iter().enumerate() {
        datasets.push(DatasetSource::new(format!("d{i}"), groups[i % 3], n));
    }
    Registry::new(datasets)
}

fn toy_condition(steps: [u64; 3], weights: &[u32]) -> ScheduleCondition {
    let p = distribution(weights);
    let names: Vec<String> = (0..weights.len()).map(|i| format!("d{i}")).collect();
    ScheduleCondition {
        id: "toy".into(),
        stages: vec![
            StagePlan::new(1, steps[0], [("align", 1.0)]),
            StagePlan::new(2, steps[1], names.iter().map(String::as_str).zip(p.iter().copied())),
            StagePlan::new(3, steps[2], names.iter().map(String::as_str).zip(p.iter().copied())),
        ],
    }
}

/// Window statistics recomputed from scratch with a two-pass mean and variance.
fn brute_spikes(losses: &[f64], u: usize) -> Vec<u64> {
    let mut out = Vec::new();
    for t in u..=losses.len() {
        let w = &losses[t - u..t];
        let mean = w.iter().sum::<f64>() / u as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / u as f64;
        let sigma = var.sqrt();
        let l = losses[t - 1];
        if l > mean + 2.0 * sigma || l < mean - 2.0 * sigma {
            out.push(t as u64);
        }
    }
    out
}

fn random_walk(seed_steps: &[f64]) -> Vec<f64> {
    let mut level = 5.0;
    seed_steps
        .iter()
        .map(|d| {
            level = (level + d).max(0.0);
            level
        })
        .collect()
}

fn snapshot(scores: [u16; 5]) -> EvalSnapshot {
    let mut s = EvalSnapshot::new(1);
    for (task, v) in Task::ALL.into_iter().zip(scores) {
        s.scores.insert(task, Centi(v as i64 * 10));
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_toml_round_trip_keeps_verdict(cond in random_condition()) {
        let reg = Registry::builtin();
        let back = ScheduleCondition::from_toml(&cond.to_toml()).unwrap();
        prop_assert_eq!(&back, &cond);
        prop_assert_eq!(validate_condition(&back, &reg), validate_condition(&cond, &reg));
        prop_assert!(validate_condition(&cond, &reg).is_ok());
    }

    #[test]
    fn exposure_sums_to_post_alignment_budget(cond in random_condition()) {
        let e = compute_exposure(&cond).unwrap();
        let budget = cond.post_alignment_steps() as f64;
        prop_assert!((e.total() - budget).abs() <= 1e-9 * budget.max(1.0));
        prop_assert!(e.by_dataset.values().all(|&x| x >= 0.0));
    }

    #[test]
    fn exposure_ignores_stage_order(cond in random_condition()) {
        let mut swapped = cond.clone();
        swapped.stages.swap(1, 2);
        swapped.stages[1].index = 2;
        swapped.stages[2].index = 3;
        let a = compute_exposure(&cond).unwrap();
        let b = compute_exposure(&swapped).unwrap();
        for name in POST {
            prop_assert!((a.get(name) - b.get(name)).abs() <= 1e-9 * a.get(name).max(1.0));
        }
    }

    #[test]
    fn self_comparison_never_warns(cond in random_condition()) {
        let cmp = compare_exposure(&[cond.clone(), cond], &Registry::builtin(), 0.10).unwrap();
        prop_assert_eq!(cmp.flagged().count(), 0);
        prop_assert!(cmp.budget_matched);
    }

    #[test]
    fn presets_always_validate(t in prop::array::uniform3(0u64..100_000)) {
        for p in Preset::ALL {
            prop_assert!(validate_condition(&builtin_condition(p, t), &Registry::builtin()).is_ok());
        }
    }

    #[test]
    fn sampler_refills_are_permutations(
        sizes in prop::collection::vec(1u64..12, 1..5),
        seed in any::<u64>(),
        t2 in 0u64..400,
    ) {
        let weights = vec![1u32; sizes.len()];
        let reg = toy_registry(&sizes);
        let m = generate_manifest(&toy_condition([0, t2, 0], &weights), &reg, seed).unwrap();
        let mut per: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
        for e in &m.events {
            per.entry(e.dataset.as_str()).or_default().push(e.instance);
        }
        for (name, draws) in per {
            let n = reg.get(name).unwrap().size as usize;
            for block in draws.chunks(n) {
                let mut seen = vec![false; n];
                for &i in block {
                    prop_assert!((i as usize) < n);
                    prop_assert!(!seen[i as usize], "instance {} repeated within an epoch of {}", i, name);
                    seen[i as usize] = true;
                }
            }
        }
    }

    #[test]
    fn sampler_resume_matches_one_shot(
        seed in any::<u64>(),
        steps in prop::array::uniform3(0u64..200),
        cut in 0u64..600,
        weights in prop::collection::vec(1u32..10, 3),
    ) {
        let reg = toy_registry(&[3, 5, 7]);
        let cond = toy_condition(steps, &weights);
        let full: Vec<_> = Sampler::new(&cond, &reg, seed).unwrap().collect();
        let cut = cut.min(full.len() as u64);
        let mut first = Sampler::new(&cond, &reg, seed).unwrap();
        let mut joined: Vec<_> = first.by_ref().take(cut as usize).collect();
        let resumed = Sampler::resume(&first.checkpoint()).unwrap();
        joined.extend(resumed);
        prop_assert_eq!(joined, full);
    }

    #[test]
    fn stage_draws_stay_in_support(seed in any::<u64>(), steps in prop::array::uniform3(0u64..300)) {
        let reg = Registry::builtin();
        let cond = builtin_condition(Preset::B, steps);
        let m = generate_manifest(&cond, &reg, seed).unwrap();
        for e in &m.events {
            prop_assert!(cond.stage(e.stage).unwrap().probability(&e.dataset) > 0.0);
        }
    }

    #[test]
    fn spikes_match_brute_force(
        deltas in prop::collection::vec(-1.0f64..1.0, 10..600),
        u in 2usize..60,
    ) {
        let losses = random_walk(&deltas);
        prop_assume!(u <= losses.len());
        let trace = LossTrace::from_losses(1, &losses).unwrap();
        prop_assert_eq!(detect_spikes(&trace, u).unwrap().spike_steps, brute_spikes(&losses, u));
    }

    #[test]
    fn spikes_invariant_under_integer_shift_and_power_of_two_scale(
        raw in prop::collection::vec(0u32..1_000, 10..300),
        u in 2usize..40,
        shift in 0u32..1_000,
        exp in -4i32..5,
    ) {
        prop_assume!(u <= raw.len());
        let base: Vec<f64> = raw.iter().map(|&x| x as f64).collect();
        let shifted: Vec<f64> = raw.iter().map(|&x| (x + shift) as f64).collect();
        let scaled: Vec<f64> = base.iter().map(|x| x * 2f64.powi(exp)).collect();
        let spikes = |v: &[f64]| detect_spikes(&LossTrace::from_losses(1, v).unwrap(), u).unwrap().spike_steps;
        let reference = spikes(&base);
        prop_assert_eq!(&spikes(&shifted), &reference);
        prop_assert_eq!(&spikes(&scaled), &reference);
    }

    #[test]
    fn spike_frequency_is_a_fraction(
        deltas in prop::collection::vec(-1.0f64..1.0, 10..400),
        u in 2usize..50,
    ) {
        let losses = random_walk(&deltas);
        prop_assume!(u <= losses.len());
        let r = detect_spikes(&LossTrace::from_losses(1, &losses).unwrap(), u).unwrap();
        prop_assert_eq!(r.valid_windows, losses.len() - u + 1);
        prop_assert!((0.0..=1.0).contains(&r.frequency));
    }

    #[test]
    fn streaming_window_is_bit_identical_to_batch(
        deltas in prop::collection::vec(-1.0f64..1.0, 2..400),
        w in 2usize..50,
    ) {
        let losses = random_walk(&deltas);
        prop_assume!(w <= losses.len());
        let batch = window_stats(&LossTrace::from_losses(1, &losses).unwrap(), w).unwrap();
        let mut rolling = RollingWindow::new(w).unwrap();
        let streamed: Vec<_> = losses.iter().filter_map(|&l| rolling.push(l)).collect();
        prop_assert_eq!(streamed.len(), batch.mean.len());
        for (p, (m, s)) in streamed.iter().zip(batch.mean.iter().zip(&batch.std)) {
            prop_assert_eq!(p.mean.to_bits(), m.to_bits());
            prop_assert_eq!(p.std.to_bits(), s.to_bits());
        }
    }

    #[test]
    fn aggregates_lie_within_their_inputs(scores in prop::array::uniform5(0u16..=1000)) {
        let a = aggregate(&snapshot(scores)).unwrap();
        let hundredths: Vec<i64> = scores.iter().map(|&s| s as i64 * 10).collect();
        let (lo, hi) = (*hundredths.iter().min().unwrap(), *hundredths.iter().max().unwrap());
        for c in [a.general, a.reasoning, a.detail, a.overall] {
            prop_assert!(lo <= c.0 && c.0 <= hi);
        }
        prop_assert_eq!(a.reasoning.0, (hundredths[1] + hundredths[2]) / 2);
        prop_assert_eq!(a.detail.0, (hundredths[3] + hundredths[4]) / 2);
    }

    #[test]
    fn overall_depends_only_on_the_multiset_of_scores(
        scores in prop::array::uniform5(0u16..=1000),
        rot in 0usize..5,
    ) {
        let mut rotated = scores;
        rotated.rotate_left(rot);
        prop_assert_eq!(
            aggregate(&snapshot(scores)).unwrap().overall,
            aggregate(&snapshot(rotated)).unwrap().overall
        );
    }

    #[test]
    fn best_markers_ignore_row_order_and_dominated_rows(
        rows in prop::collection::vec(prop::array::uniform5(1u16..=1000), 1..6),
    ) {
        let named: Vec<(String, EvalSnapshot)> =
            rows.iter().enumerate().map(|(i, s)| (format!("c{i}"), snapshot(*s))).collect();
        let base = comparison_table(&named).unwrap();

        let mut reversed = named.clone();
        reversed.reverse();
        let rev = comparison_table(&reversed).unwrap();

        let mut extended = named.clone();
        extended.push(("floor".into(), snapshot([0; 5])));
        let ext = comparison_table(&extended).unwrap();

        for col in Column::ALL {
            for (name, _) in &named {
                prop_assert_eq!(base.is_best(name, col), rev.is_best(name, col));
                prop_assert_eq!(base.is_best(name, col), ext.is_best(name, col));
            }
            prop_assert!(!ext.is_best("floor", col));
        }
    }

    #[test]
    fn noiseless_capability_curves_are_monotone(
        steps in prop::array::uniform3(0u64..5_000),
        interval in 50u64..1_000,
        preset in 0usize..4,
    ) {
        let curve = |b: f64, c: f64, t: Transfer| CapabilityCurve { baseline: b, ceiling: c, transfer: t };
        let model = CapabilityModelSpec {
            general: curve(50.0, 75.0, Transfer { alignment: 0.1, general: 1.0, reasoning: 0.2, ocr: 0.1 }),
            reasoning: curve(45.0, 78.0, Transfer { general: 0.2, reasoning: 1.0, ..Default::default() }),
            detail: curve(40.0, 74.0, Transfer { ocr: 1.0, ..Default::default() }),
            exposure_scale: 1_000.0,
            eval_interval: interval,
            noise: 0.0,
            seed: 0,
        };
        let cond = builtin_condition(Preset::ALL[preset], steps);
        let (_, truth) = synth_capability(&cond, &Registry::builtin(), &model).unwrap();
        for pair in truth.windows(2) {
            prop_assert!(pair[1].general >= pair[0].general);
            prop_assert!(pair[1].reasoning >= pair[0].reasoning);
            prop_assert!(pair[1].detail >= pair[0].detail);
        }
    }
}
