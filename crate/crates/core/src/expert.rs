//! Scripted teacher: pure pursuit with a speed-proportional lookahead, and the
//! data-collection loop that records it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::closedloop::{Controller, DecisionContext, PipelineConfig, Pose, Simulation};
use crate::dataset::{Manifest, Recording, Sample};
use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Vec2};
use crate::sensing::SensorConfig;
use crate::track::Track;
use crate::vehicle::VehicleParams;

/// Normalized commands below this magnitude snap to straight when quantizing.
pub const QUANTIZE_DEADBAND: f64 = 0.15;
/// Samples within this window after a perturbation starts are masked.
pub const PERTURB_MASK_S: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    pub base_lookahead: f64,
    /// Seconds of travel added to the lookahead (lookahead += this * speed).
    pub lookahead_per_speed: f64,
    pub steer_gain: f64,
    pub quantize: bool,
    /// Expected perturbations per second during collection.
    pub perturb_prob: f64,
    /// Lateral displacement scale of a perturbation (m).
    pub perturb_sigma: f64,
}

impl Default for ExpertParams {
    fn default() -> Self {
        Self {
            base_lookahead: 0.30,
            lookahead_per_speed: 0.25,
            steer_gain: 1.0,
            quantize: false,
            perturb_prob: 0.2,
            perturb_sigma: 0.06,
        }
    }
}

impl ExpertParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lookahead > 0.0) || self.lookahead_per_speed < 0.0 {
            return Err(Error::input("expert lookahead must be positive"));
        }
        if self.perturb_prob < 0.0 || self.perturb_sigma < 0.0 {
            return Err(Error::input(
                "expert perturbation settings must be non-negative",
            ));
        }
        Ok(())
    }

    pub fn lookahead(&self, speed: f64) -> f64 {
        self.base_lookahead + self.lookahead_per_speed * speed
    }
}

/// Snaps to {-1, 0, +1} with a dead band around zero.
pub fn quantize(command: f64) -> f64 {
    if command.abs() < QUANTIZE_DEADBAND {
        0.0
    } else {
        command.signum()
    }
}

/// Pure-pursuit steering toward the centerline point `lookahead(speed)` ahead of
/// the vehicle's projection, normalized by `max_steer` and clipped to [-1, 1].
pub fn expert_steer(
    track: &Track,
    pose: &Pose,
    vehicle: &VehicleParams,
    params: &ExpertParams,
) -> Result<f64> {
    expert_steer_with_lookahead(track, pose, vehicle, params, params.lookahead(pose.speed))
}

pub fn expert_steer_with_lookahead(
    track: &Track,
    pose: &Pose,
    vehicle: &VehicleParams,
    params: &ExpertParams,
    lookahead: f64,
) -> Result<f64> {
    let p = pose.position();
    let q = track.locate(p);
    if q.lateral_offset.abs() > 2.0 * track.half_width() {
        return Err(Error::ExpertAbstain {
            offset: q.lateral_offset,
        });
    }
    let (target, _) = track.point_at(q.s + lookahead);
    let alpha = wrap_angle((target - p).angle() - pose.heading);
    let delta = (2.0 * vehicle.wheelbase * alpha.sin() / lookahead).atan() * params.steer_gain;
    let norm = (delta / vehicle.max_steer).clamp(-1.0, 1.0);
    Ok(if params.quantize {
        quantize(norm)
    } else {
        norm
    })
}

/// The expert as a closed-loop controller acting on the true pose at each frame.
#[derive(Debug, Clone)]
pub struct ExpertController {
    pub params: ExpertParams,
    /// Fixes the lookahead to this speed instead of the measured one.
    pub lookahead_speed: Option<f64>,
}

impl ExpertController {
    pub fn new(params: ExpertParams) -> Self {
        Self {
            params,
            lookahead_speed: None,
        }
    }
}

impl Controller for ExpertController {
    fn needs_frames(&self) -> bool {
        false
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<f64> {
        let speed = self.lookahead_speed.unwrap_or(ctx.pose.speed);
        expert_steer_with_lookahead(
            ctx.track,
            &ctx.pose,
            ctx.vehicle,
            &self.params,
            self.params.lookahead(speed),
        )
    }
}

/// Settings for one expert collection run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollectConfig {
    pub speed_setpoint: f64,
    pub duration: f64,
    /// Relative standard deviation of a per-lap speed setpoint draw (0 = constant).
    pub speed_jitter: f64,
    pub seed: u64,
}

/// Drives the expert around the track for `duration` seconds and records every
/// capture. Perturbations push the car sideways so the data covers recoveries.
pub fn collect_run(
    track: &Track,
    vehicle: &VehicleParams,
    expert: &ExpertParams,
    sensor: &SensorConfig,
    pipeline: &PipelineConfig,
    cfg: &CollectConfig,
) -> Result<Recording> {
    if !(cfg.duration > 0.0) {
        return Err(Error::input("collection duration must be positive"));
    }
    expert.validate()?;
    sensor.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x636f_6c6c_6563_7400);
    let mut sim = Simulation::new(
        track,
        vehicle,
        &sensor.with_stack(1),
        pipeline,
        cfg.speed_setpoint,
        cfg.seed,
    )?;
    sim.capture_frames = true;
    let mut controller = ExpertController::new(*expert);
    let jitter = Normal::new(0.0, cfg.speed_jitter.max(0.0)).expect("finite sigma");
    let draw_speed = |rng: &mut ChaCha8Rng| {
        if cfg.speed_jitter > 0.0 {
            (cfg.speed_setpoint * (1.0 + jitter.sample(rng))).max(0.1 * cfg.speed_setpoint)
        } else {
            cfg.speed_setpoint
        }
    };
    let first_speed = draw_speed(&mut rng);
    sim.set_speed_setpoint(first_speed, true);

    let steps = (cfg.duration / sim.dt()).round() as u64;
    let per_step = expert.perturb_prob * sim.dt();
    let mut last_perturb: Option<f64> = None;
    let mut samples = Vec::with_capacity((cfg.duration * sensor.capture_hz) as usize + 1);
    let mut truncated = None;
    let eff_hw = track.half_width() - vehicle.body_half_width;

    for _ in 0..steps {
        let t = sim.time();
        if expert.perturb_sigma > 0.0 && rng.random::<f64>() < per_step && !sim.pushing() {
            let offset = sim.lateral_offset();
            let room = (eff_hw - 0.05).max(0.0);
            let push = Normal::new(0.0, expert.perturb_sigma)
                .unwrap()
                .sample(&mut rng);
            let push = (offset + push).clamp(-room, room) - offset;
            sim.push_laterally(push, PERTURB_MASK_S);
            last_perturb = Some(t);
        }
        let report = match sim.step(&mut controller) {
            Ok(r) => r,
            Err(e @ Error::ExpertAbstain { .. }) => {
                truncated = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        if let Some(cap) = report.capture {
            let label = expert_steer(track, &cap.pose, vehicle, expert).unwrap_or(0.0);
            samples.push(Sample {
                t: cap.time,
                frame: cap.frame,
                steer: label,
                speed: cap.pose.speed,
                lap: sim.laps_completed() as u32,
                s: cap.s,
                infraction_window: false,
                perturb_mask: last_perturb.is_some_and(|p| cap.time - p < PERTURB_MASK_S - 1e-9),
            });
        }
        if report.crash.is_some() {
            // Attribute the infraction to the latest capture.
            if let Some(last) = samples.last_mut() {
                last.infraction_window = true;
            }
        }
        if report.lap.is_some() && cfg.speed_jitter > 0.0 {
            let v = draw_speed(&mut rng);
            sim.set_speed_setpoint(v, false);
        }
    }

    let report = sim.report();
    let manifest = Manifest {
        capture_hz: sensor.capture_hz,
        ray_count: sensor.ray_count,
        fov: sensor.fov,
        max_range: sensor.max_range,
        track_hash: track.content_hash(),
        expert_params: *expert,
        speed_setpoint: cfg.speed_setpoint,
        seed: cfg.seed,
        sample_count: samples.len(),
        removed_count: 0,
        truncated,
        clean_lap_times: report.clean_lap_times(),
    };
    Ok(Recording { manifest, samples })
}

/// Mean and sample standard deviation of lap times.
pub fn lap_time_stats(times: &[f64]) -> (f64, f64) {
    if times.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    if times.len() < 2 {
        return (mean, 0.0);
    }
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Convenience pose on the centerline.
pub fn centerline_pose(track: &Track, s: f64, offset: f64, speed: f64) -> Pose {
    let (p, h) = track.point_at(s);
    let p = p + Vec2::from_angle(h).perp() * offset;
    Pose {
        x: p.x,
        y: p.y,
        heading: h,
        speed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::{generate_default_track, stadium, TurnDirection};

    #[test]
    fn straight_centerline_is_neutral() {
        let t = stadium(20.0, 2.0, 0.375).unwrap();
        let pose = centerline_pose(&t, 10.0, 0.0, 1.0);
        let s = expert_steer(
            &t,
            &pose,
            &VehicleParams::default(),
            &ExpertParams::default(),
        )
        .unwrap();
        assert!(s.abs() <= 0.02, "{s}");
    }

    #[test]
    fn quantize_rule() {
        assert_eq!(quantize(0.6), 1.0);
        assert_eq!(quantize(-0.2), -1.0);
        assert_eq!(quantize(0.1), 0.0);
        let params = ExpertParams {
            quantize: true,
            ..Default::default()
        };
        let t = generate_default_track(0).unwrap();
        let pose = centerline_pose(&t, t.turns()[0].start_s, 0.0, 1.0);
        let v = expert_steer(&t, &pose, &VehicleParams::default(), &params).unwrap();
        assert!([-1.0, 0.0, 1.0].contains(&v));
    }

    #[test]
    fn faster_means_earlier_steering_before_left_turn() {
        let t = generate_default_track(0).unwrap();
        let v = VehicleParams::default();
        let e = ExpertParams::default();
        let turn = t
            .turns()
            .iter()
            .find(|x| x.direction == TurnDirection::Left)
            .unwrap();
        let mut checked = 0;
        for k in 1..=8 {
            let s = turn.start_s - 0.05 * k as f64;
            let slow = expert_steer(&t, &centerline_pose(&t, s, 0.0, 0.70), &v, &e).unwrap();
            let fast = expert_steer(&t, &centerline_pose(&t, s, 0.0, 1.14), &v, &e).unwrap();
            assert!(
                fast.abs() >= slow.abs() - 1e-12,
                "s={s}: slow {slow} fast {fast}"
            );
            checked += 1;
        }
        assert_eq!(checked, 8);
    }

    #[test]
    fn abstains_far_off_track() {
        let t = generate_default_track(0).unwrap();
        let pose = centerline_pose(&t, 2.0, 0.9, 1.0);
        assert!(matches!(
            expert_steer(
                &t,
                &pose,
                &VehicleParams::default(),
                &ExpertParams::default()
            ),
            Err(Error::ExpertAbstain { .. })
        ));
    }

    #[test]
    fn lap_stats() {
        let (m, s) = lap_time_stats(&[8.0, 8.5, 9.0]);
        assert!((m - 8.5).abs() < 1e-12);
        assert!((s - 0.5).abs() < 1e-12);
    }
}
