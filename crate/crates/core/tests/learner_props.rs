use proptest::prelude::*;
use shiftdrive::dataset::{Provenance, ShiftedDataset};
use shiftdrive::learner::{train, Policy, PolicySpec, TrainConfig};

fn dataset(inputs: Vec<Vec<f64>>, labels: Vec<f64>) -> ShiftedDataset {
    let n = labels.len();
    ShiftedDataset {
        inputs,
        labels,
        frame_indices: (0..n).map(|i| vec![i]).collect(),
        label_indices: (0..n).collect(),
        frame_times: (0..n).map(|i| i as f64 * 0.05).collect(),
        label_times: (0..n).map(|i| i as f64 * 0.05).collect(),
        shift_ms: 0,
        stack_size: 1,
        provenance: Provenance {
            source_hash: String::new(),
            shift_ms: 0,
            stack_size: 1,
            stride: 1,
            dropped: 0,
        },
    }
}

fn spec_strategy() -> impl Strategy<Value = PolicySpec> {
    (
        2usize..6,
        proptest::collection::vec(2usize..6, 1..3),
        any::<bool>(),
        prop_oneof![Just(0.0), Just(0.3)],
    )
        .prop_map(|(input_dim, hidden, batch_norm, dropout)| PolicySpec {
            input_dim,
            stack_size: 1,
            stride: 1,
            hidden,
            batch_norm,
            dropout,
            shift_ms: 0,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn analytic_gradients_match_central_differences(spec in spec_strategy(), seed in 0u64..1000, data in proptest::collection::vec(-1.0..1.0f64, 40)) {
        let mut p = Policy::new(spec, seed).unwrap();
        for (i, v) in p.params.iter_mut().enumerate() {
            *v += 0.03 * ((i as f64) * 1.7).sin();
        }
        let d = p.spec.input_dim;
        let xs: Vec<&[f64]> = (0..3).map(|k| &data[k * d..(k + 1) * d]).collect();
        let ys = [data[30], data[31], data[32]];
        let (_, g) = p.loss_and_grad(&xs, &ys, seed);
        let h = 1e-5;
        for (i, &gi) in g.iter().enumerate() {
            let orig = p.params[i];
            p.params[i] = orig + h;
            let lp = p.loss_and_grad(&xs, &ys, seed).0;
            p.params[i] = orig - h;
            let lm = p.loss_and_grad(&xs, &ys, seed).0;
            p.params[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            let err = (num - gi).abs();
            prop_assert!(err < 1e-8 || err / num.abs().max(gi.abs()) < 1e-4, "param {}: {} vs {}", i, num, gi);
        }
    }

    #[test]
    fn training_is_bit_reproducible(spec in spec_strategy(), seed in any::<u64>()) {
        let d = spec.input_dim;
        let inputs: Vec<Vec<f64>> = (0..120).map(|i| (0..d).map(|j| ((i * 7 + j * 3) as f64).sin()).collect()).collect();
        let labels: Vec<f64> = inputs.iter().map(|x| (x.iter().sum::<f64>() * 0.4).tanh()).collect();
        let ds = dataset(inputs, labels);
        let cfg = TrainConfig { max_epochs: 4, batch_size: 16, seed, ..Default::default() };
        let (a, ra) = train(&spec, &ds, Some(&ds), &cfg).unwrap();
        let (b, rb) = train(&spec, &ds, Some(&ds), &cfg).unwrap();
        let bits = |p: &Policy| p.params.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
        prop_assert_eq!(ra, rb);
    }
}
