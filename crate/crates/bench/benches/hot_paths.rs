use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use shiftdrive::expert::centerline_pose;
use shiftdrive::learner::{extract_embeddings, Policy, PolicySpec, Tap};
use shiftdrive::ood::{knn_distance, Metric, ReferenceSet};
use shiftdrive::sensing::{capture_clean, SensorConfig};
use shiftdrive::{generate_default_track, VehicleParams, VehicleState};

fn track_queries(c: &mut Criterion) {
    let track = generate_default_track(0).unwrap();
    let poses: Vec<_> = (0..64)
        .map(|i| centerline_pose(&track, i as f64 * 0.26, 0.05, 1.0))
        .collect();
    c.bench_function("locate", |b| {
        b.iter(|| {
            for p in &poses {
                black_box(track.locate(p.position()));
            }
        })
    });
    let sensor = SensorConfig::default();
    c.bench_function("capture_32_rays", |b| {
        let mut i = 0;
        b.iter(|| {
            let p = &poses[i % poses.len()];
            i += 1;
            black_box(capture_clean(&track, p.position(), p.heading, &sensor))
        })
    });
}

fn vehicle_step(c: &mut Criterion) {
    let params = VehicleParams::default();
    c.bench_function("vehicle_step_1s", |b| {
        b.iter(|| {
            let mut st = VehicleState::new(shiftdrive::Vec2::new(0.0, 0.0), 0.0, 1.14);
            st.set_steering(&params, 0.5, 0.0).unwrap();
            for _ in 0..200 {
                st.step(&params, 0.005);
            }
            black_box(st)
        })
    });
}

fn policy_forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("predict");
    for (name, spec) in [
        ("single", PolicySpec::single_frame(32)),
        ("multi", PolicySpec::multi_frame(32)),
    ] {
        let policy = Policy::new(spec, 1).unwrap();
        let x: Vec<f64> = (0..policy.spec.input_dim)
            .map(|i| (i as f64 * 0.1).sin() + 1.0)
            .collect();
        g.bench_with_input(BenchmarkId::from_parameter(name), &x, |b, x| {
            b.iter(|| black_box(policy.predict(x).unwrap()))
        });
    }
    g.finish();
}

fn knn(c: &mut Criterion) {
    let policy = Policy::new(PolicySpec::multi_frame(32), 2).unwrap();
    let rows: Vec<Vec<f64>> = (0..4000)
        .map(|i| {
            (0..96)
                .map(|j| ((i * 31 + j * 7) as f64 * 0.013).sin() + 1.5)
                .collect()
        })
        .collect();
    let emb = extract_embeddings(&policy, &rows, Tap::PostActivation).unwrap();
    let query = emb[17].iter().map(|v| v + 0.01).collect::<Vec<_>>();
    let mut g = c.benchmark_group("knn_4000x64");
    for metric in Metric::ALL {
        let set = ReferenceSet::new(emb.clone(), metric, Tap::PostActivation).unwrap();
        g.bench_function(metric.as_str(), |b| {
            b.iter(|| black_box(knn_distance(&set, &query, 5).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, track_queries, vehicle_step, policy_forward, knn);
criterion_main!(benches);
