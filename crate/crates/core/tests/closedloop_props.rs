use proptest::prelude::*;
use shiftdrive::closedloop::{
    fastest_safe_lap, run_laps, Controller, DecisionContext, PipelineConfig, RunOptions,
    SearchConfig,
};
use shiftdrive::expert::{ExpertController, ExpertParams};
use shiftdrive::sensing::SensorConfig;
use shiftdrive::track::{generate_default_track, Track};
use shiftdrive::vehicle::VehicleParams;
use shiftdrive::Result;
use std::sync::OnceLock;

fn track() -> &'static Track {
    static T: OnceLock<Track> = OnceLock::new();
    T.get_or_init(|| generate_default_track(0).unwrap())
}

/// Drives like the expert up to `limit` m/s and steers into the wall above it.
struct Threshold {
    inner: ExpertController,
    limit: f64,
}

impl Controller for Threshold {
    fn needs_frames(&self) -> bool {
        false
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<f64> {
        if ctx.pose.speed > self.limit + 1e-6 {
            Ok(1.0)
        } else {
            self.inner.decide(ctx)
        }
    }
}

struct Crasher;

impl Controller for Crasher {
    fn needs_frames(&self) -> bool {
        false
    }

    fn decide(&mut self, _: &DecisionContext<'_>) -> Result<f64> {
        Ok(-1.0)
    }
}

#[test]
fn search_finds_a_planted_threshold() {
    let mut ctl = Threshold {
        inner: ExpertController::new(ExpertParams::default()),
        limit: 1.0,
    };
    let r = fastest_safe_lap(
        track(),
        &VehicleParams::default(),
        &SensorConfig::default(),
        &mut ctl,
        &PipelineConfig::default(),
        &SearchConfig::default(),
        3,
    )
    .unwrap();
    let v = r.speed.unwrap();
    assert!((0.95..=1.0 + 1e-9).contains(&v), "{v}");
    let lap = r.lap_time.unwrap();
    assert!(
        (lap - track().total_length() / v).abs() < 0.05 * lap,
        "{lap}"
    );
}

#[test]
fn a_policy_that_always_crashes_gets_the_sentinel() {
    let r = fastest_safe_lap(
        track(),
        &VehicleParams::default(),
        &SensorConfig::default(),
        &mut Crasher,
        &PipelineConfig::default(),
        &SearchConfig::default(),
        0,
    )
    .unwrap();
    assert_eq!(r.speed, None);
    assert!(r.lap_time_s().is_infinite());
}

#[test]
fn expert_top_speed_does_not_grow_with_delay() {
    let search = SearchConfig {
        confirm_laps: 10,
        ..Default::default()
    };
    let mut last = f64::INFINITY;
    for added in [0.0, 50.0, 100.0, 150.0, 200.0] {
        let mut ctl = ExpertController::new(ExpertParams::default());
        let pipeline = PipelineConfig::default().with_added_delay(added);
        let r = fastest_safe_lap(
            track(),
            &VehicleParams::default(),
            &SensorConfig::default(),
            &mut ctl,
            &pipeline,
            &search,
            11,
        )
        .unwrap();
        let v = r.speed.unwrap_or(0.0);
        assert!(v <= last + 1e-9, "delay {added}: {v} > {last}");
        last = v;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn decision_bookkeeping(added in 0.0..150.0f64, speed in 0.5..1.6f64, pipelined in any::<bool>(), seed in any::<u64>()) {
        let pipeline = PipelineConfig { added_delay_ms: added, pipelined, ..Default::default() };
        let sensor = SensorConfig::default();
        let mut ctl = ExpertController::new(ExpertParams::default());
        let opts = RunOptions::new(speed, 1, seed);
        let run = |ctl: &mut ExpertController| run_laps(track(), &VehicleParams::default(), &sensor, ctl, &pipeline, &opts).unwrap();
        let r = run(&mut ctl);
        prop_assert_eq!(&r, &run(&mut ctl));
        prop_assert!(!r.decisions.is_empty());

        let mean = r.decisions.iter().map(|d| d.delay() * d.speed).sum::<f64>() / r.decisions.len() as f64;
        prop_assert!((mean - r.mean_spatial_belatedness).abs() < 1e-6);

        let bound = pipeline.decision_period(sensor.capture_hz) + pipeline.total_delay_ms() / 1000.0;
        for d in &r.decisions {
            prop_assert!(d.delay() >= pipeline.total_delay_ms() / 1000.0 - 1e-9);
            prop_assert!(d.delay() <= bound + 1e-9, "{} > {}", d.delay(), bound);
        }
    }
}
