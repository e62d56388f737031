use proptest::prelude::*;
use shiftdrive::dataset::{
    build_pairs, clean, shift_labels, split_block, split_period, Manifest, Recording, Sample,
};
use shiftdrive::expert::ExpertParams;
use shiftdrive::learner::Tap;
use shiftdrive::ood::{auroc, knn_distance, Metric, ReferenceSet};
use std::collections::HashSet;

/// Synthetic recording at 20 Hz; `gaps` marks capture indices that are missing.
fn recording(n: usize, gaps: &[bool], marks: &[bool]) -> Recording {
    let mut samples = Vec::new();
    let mut idx = 0usize;
    for i in 0..n {
        if gaps.get(i).copied().unwrap_or(false) {
            idx += 3;
        }
        samples.push(Sample {
            t: idx as f64 / 20.0,
            frame: vec![i as f64, (i * 7 % 5) as f64],
            steer: ((i * 31 % 17) as f64 / 8.0 - 1.0).clamp(-1.0, 1.0),
            speed: 1.0,
            lap: (i / 40) as u32,
            s: 0.0,
            infraction_window: marks.get(i).copied().unwrap_or(false),
            perturb_mask: false,
        });
        idx += 1;
    }
    Recording {
        manifest: Manifest {
            capture_hz: 20.0,
            ray_count: 2,
            fov: 2.0,
            max_range: 3.0,
            track_hash: String::new(),
            expert_params: ExpertParams::default(),
            speed_setpoint: 1.0,
            seed: 0,
            sample_count: samples.len(),
            removed_count: 0,
            truncated: None,
            clean_lap_times: Vec::new(),
        },
        samples,
    }
}

fn gap_vec(n: usize) -> impl Strategy<Value = Vec<bool>> {
    proptest::collection::vec(proptest::bool::weighted(0.05), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shifted_label_matches_unshifted_pairing(n in 20usize..200, steps in -4i64..=4, gaps in gap_vec(200)) {
        let rec = recording(n, &gaps, &[]);
        let base = shift_labels(&rec, 0).unwrap();
        let shifted = shift_labels(&rec, 50 * steps).unwrap();
        for i in 0..shifted.len() {
            let f = shifted.frame_indices[i][0];
            let j = f as i64 + steps;
            prop_assert_eq!(shifted.label_indices[i] as i64, j);
            let b = base.label_indices.iter().position(|&l| l as i64 == j).unwrap();
            prop_assert_eq!(shifted.labels[i], base.labels[b]);
            prop_assert!((shifted.label_times[i] - shifted.frame_times[i] - 0.05 * steps as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn stacked_frames_share_a_segment(n in 20usize..200, stride in 1usize..3, gaps in gap_vec(200)) {
        let rec = recording(n, &gaps, &[]);
        let ds = build_pairs(&rec, 0, 3, stride).unwrap();
        for f in &ds.frame_indices {
            let t: Vec<i64> = f.iter().map(|&i| rec.capture_index(i)).collect();
            prop_assert_eq!(t[1] - t[0], stride as i64);
            prop_assert_eq!(t[2] - t[1], stride as i64);
        }
    }

    #[test]
    fn clean_only_removes(n in 1usize..300, marks in proptest::collection::vec(proptest::bool::weighted(0.02), 300), before in 0.0..6.0f64, after in 0.0..2.0f64) {
        let rec = recording(n, &[], &marks);
        let c = clean(&rec, before, after);
        prop_assert!(c.len() <= rec.len());
        prop_assert!(c.samples.iter().all(|s| !s.infraction_window));
        prop_assert_eq!(c.manifest.removed_count, rec.len() - c.len());
    }

    #[test]
    fn block_folds_partition_the_data(n in 10usize..500, folds in 2usize..6) {
        let split = split_block(n, folds).unwrap();
        let mut seen = HashSet::new();
        for k in 0..folds {
            for i in split.validation(k) {
                prop_assert!(seen.insert(i));
            }
        }
        prop_assert_eq!(seen.len(), n);
    }

    #[test]
    fn period_folds_are_disjoint(n in 200usize..400, periods in prop_oneof![Just(5usize), Just(10), Just(15)]) {
        let rec = recording(n, &[], &[]);
        let ds = build_pairs(&rec, 0, 3, 1).unwrap();
        let split = split_period(&ds, 5, periods).unwrap();
        let mut seen = HashSet::new();
        for k in 0..5 {
            for i in split.validation(k) {
                prop_assert!(seen.insert(i));
            }
            let train: HashSet<usize> = split.training(k).into_iter().collect();
            let val: HashSet<usize> = split.validation(k).into_iter().collect();
            // No stack in training shares a frame with a validation stack.
            let val_frames: HashSet<usize> = val.iter().flat_map(|&i| ds.frame_indices[i].clone()).collect();
            for i in train {
                prop_assert!(ds.frame_indices[i].iter().all(|f| !val_frames.contains(f)));
            }
        }
    }
}

fn vecs(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(-3.0..3.0f64, dim), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_with_all_references_is_the_mean(refs in vecs(12, 4), q in proptest::collection::vec(-3.0..3.0f64, 4), cosine in any::<bool>()) {
        let metric = if cosine { Metric::Cosine } else { Metric::Euclidean };
        let set = ReferenceSet::new(refs.clone(), metric, Tap::PostLinear).unwrap();
        let mean = refs.iter().map(|r| metric.distance(r, &q)).sum::<f64>() / refs.len() as f64;
        prop_assert!((knn_distance(&set, &q, refs.len()).unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn duplicate_reference_never_increases_distance(refs in vecs(10, 3), q in proptest::collection::vec(-3.0..3.0f64, 3), pick in 0usize..10, k in 1usize..6, cosine in any::<bool>()) {
        let metric = if cosine { Metric::Cosine } else { Metric::Euclidean };
        let before = knn_distance(&ReferenceSet::new(refs.clone(), metric, Tap::PostLinear).unwrap(), &q, k).unwrap();
        let mut more = refs.clone();
        more.push(refs[pick].clone());
        let after = knn_distance(&ReferenceSet::new(more, metric, Tap::PostLinear).unwrap(), &q, k).unwrap();
        prop_assert!(after <= before + 1e-12);
    }

    #[test]
    fn auroc_is_antisymmetric(a in proptest::collection::hash_set(0u32..10_000, 1..40), b in proptest::collection::hash_set(10_000u32..20_000, 1..40), mix in any::<u64>()) {
        // Tie-free: values drawn from disjoint ranges, then scrambled across the line.
        let scramble = |v: u32| ((v as u64).wrapping_mul(mix | 1) % 100_003) as f64 + v as f64 * 1e-6;
        let a: Vec<f64> = a.into_iter().map(scramble).collect();
        let b: Vec<f64> = b.into_iter().map(scramble).collect();
        let all: HashSet<u64> = a.iter().chain(&b).map(|x| x.to_bits()).collect();
        prop_assume!(all.len() == a.len() + b.len());
        let s = auroc(&a, &b).unwrap() + auroc(&b, &a).unwrap();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn ood_study_is_deterministic() {
    use shiftdrive::learner::{Policy, PolicySpec};
    use shiftdrive::ood::{run_ood_study, FoldModel, OodConfig, SpeedModels};
    let policy = Policy::new(PolicySpec::for_stack(4, 3), 7).unwrap();
    let rows: Vec<Vec<f64>> = (0..60)
        .map(|i| (0..12).map(|j| ((i * 13 + j) as f64 * 0.3).sin()).collect())
        .collect();
    let novel: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().map(|v| v * 1.5).collect())
        .collect();
    let run = || {
        let models = vec![SpeedModels {
            speed: "slow".into(),
            folds: vec![FoldModel {
                policy: &policy,
                train_inputs: rows[..40].iter().map(Vec::as_slice).collect(),
                val_inputs: rows[40..].iter().map(Vec::as_slice).collect(),
            }],
            novel_inputs: novel.iter().map(Vec::as_slice).collect(),
        }];
        run_ood_study(&models, &OodConfig::default()).unwrap()
    };
    let a = run();
    assert_eq!(a.len(), 6);
    assert_eq!(a, run());
}
