//! Closed-loop deployment: the simulator clock, the 20 Hz sensor, the compute
//! pipeline that turns frames into delayed steering commands, infraction and lap
//! bookkeeping, and the experiments built on top (cross-speed evaluation,
//! fastest-safe-lap search, delay x label-shift sweep).
//!
//! The pipeline is sequential by default: it takes the newest frame, spends the
//! total compute delay on it, actuates, and only then looks at the newest frame
//! again. The decision period is therefore `max(frame period, compute delay)`.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::learner::Policy;
use crate::sensing::{apply_blur, capture, Observation, SensorConfig};
use crate::track::{lap_progress, Side, Track, TrackQueryResult, TurnDirection, WallClass};
use crate::vehicle::{VehicleParams, VehicleState, DEFAULT_DT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Inference time of the steering model (ms).
    pub base_compute_ms: f64,
    /// Artificial wait added after inference (ms).
    pub added_delay_ms: f64,
    pub replace_on_crash: bool,
    /// Overlap computations so decisions happen on every frame regardless of delay.
    pub pipelined: bool,
    /// Standard deviation of per-decision compute jitter (ms); 0 disables it.
    pub compute_jitter_ms: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            base_compute_ms: 24.0,
            added_delay_ms: 0.0,
            replace_on_crash: true,
            pipelined: false,
            compute_jitter_ms: 0.0,
        }
    }
}

impl PipelineConfig {
    pub fn with_added_delay(mut self, ms: f64) -> Self {
        self.added_delay_ms = ms;
        self
    }

    pub fn total_delay_ms(&self) -> f64 {
        self.base_compute_ms + self.added_delay_ms
    }

    /// Time between actuations for a steady stream of frames at `capture_hz`.
    pub fn decision_period(&self, capture_hz: f64) -> f64 {
        let frame = 1.0 / capture_hz;
        if self.pipelined {
            frame
        } else {
            frame.max(self.total_delay_ms() / 1000.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_delay_ms() < 0.0 || !self.total_delay_ms().is_finite() {
            return Err(Error::input("total compute delay must be non-negative"));
        }
        Ok(())
    }
}

/// Ground-truth vehicle pose at a capture instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl Pose {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    fn of(state: &VehicleState) -> Self {
        Pose {
            x: state.x,
            y: state.y,
            heading: state.heading,
            speed: state.speed,
        }
    }
}

/// Everything a controller may look at when deciding on one frame.
pub struct DecisionContext<'a> {
    pub observation: Option<&'a Observation>,
    /// True pose when the newest frame was captured.
    pub pose: Pose,
    pub track: &'a Track,
    pub vehicle: &'a VehicleParams,
    pub frame_time: f64,
}

pub trait Controller {
    /// Frames per observation and the capture stride between them.
    fn frame_window(&self) -> (usize, usize) {
        (1, 1)
    }

    fn needs_frames(&self) -> bool {
        true
    }

    /// Expected flattened observation length, when fixed.
    fn input_dim(&self) -> Option<usize> {
        None
    }

    /// Normalized steering command for the current observation.
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<f64>;
}

/// Runs a trained policy on sensor observations.
pub struct PolicyController<'a> {
    pub policy: &'a Policy,
    pub stride: usize,
}

impl<'a> PolicyController<'a> {
    pub fn new(policy: &'a Policy) -> Self {
        Self {
            policy,
            stride: policy.spec.stride,
        }
    }
}

impl Controller for PolicyController<'_> {
    fn frame_window(&self) -> (usize, usize) {
        (self.policy.spec.stack_size, self.stride)
    }

    fn input_dim(&self) -> Option<usize> {
        Some(self.policy.spec.input_dim)
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<f64> {
        let obs = ctx
            .observation
            .ok_or_else(|| Error::input("policy needs an observation"))?;
        let pred = self.policy.predict(&obs.flatten())?;
        Ok(pred.clamp(-1.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfractionSite {
    pub time: f64,
    pub s: f64,
    pub wall: WallClass,
    pub side: Side,
    pub turn: Option<TurnDirection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub frame_time: f64,
    pub actuation_time: f64,
    pub speed: f64,
    pub command: f64,
}

impl DecisionRecord {
    pub fn delay(&self) -> f64 {
        self.actuation_time - self.frame_time
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub steer_cmd: f64,
    pub steer_actual: f64,
    pub frame_age_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LapReport {
    pub laps_attempted: usize,
    pub laps_completed: usize,
    pub infractions: usize,
    pub infraction_sites: Vec<InfractionSite>,
    pub lap_times: Vec<f64>,
    /// Whether each completed lap was driven without an infraction.
    pub lap_clean: Vec<bool>,
    /// Mean over decisions of (capture-to-actuation delay x speed), in meters.
    pub mean_spatial_belatedness: f64,
    pub decisions: Vec<DecisionRecord>,
    pub sim_time: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub trace: Vec<TraceRow>,
}

impl LapReport {
    pub fn clean_lap_times(&self) -> Vec<f64> {
        self.lap_times
            .iter()
            .zip(&self.lap_clean)
            .filter(|(_, c)| **c)
            .map(|(t, _)| *t)
            .collect()
    }

    /// Infractions normalized to ten completed laps.
    pub fn infractions_per_ten_laps(&self) -> f64 {
        if self.laps_completed == 0 {
            return f64::INFINITY;
        }
        self.infractions as f64 * 10.0 / self.laps_completed as f64
    }
}

#[derive(Debug, Clone)]
struct CaptureSlot {
    index: u64,
    time: f64,
    frame: Vec<f64>,
    pose: Pose,
}

/// A capture as reported to the caller of [`Simulation::step`].
#[derive(Debug, Clone)]
pub struct CaptureEvent {
    pub time: f64,
    pub frame: Vec<f64>,
    pub pose: Pose,
    pub s: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LapEvent {
    pub time: f64,
    pub clean: bool,
}

#[derive(Debug, Clone, Default)]
pub struct StepReport {
    pub capture: Option<CaptureEvent>,
    pub crash: Option<InfractionSite>,
    pub lap: Option<LapEvent>,
}

#[derive(Debug, Clone, Copy)]
struct InFlight {
    frame_time: f64,
    ready_at: f64,
    command: f64,
}

#[derive(Debug, Clone)]
struct LapTracker {
    total: f64,
    last_s: f64,
    progress: f64,
    lap_start: f64,
    clean: bool,
    times: Vec<f64>,
    clean_flags: Vec<bool>,
}

impl LapTracker {
    fn new(total: f64, s: f64) -> Self {
        Self {
            total,
            last_s: s,
            progress: 0.0,
            lap_start: 0.0,
            clean: true,
            times: Vec::new(),
            clean_flags: Vec::new(),
        }
    }

    fn update(&mut self, s: f64, t: f64) -> Option<LapEvent> {
        let (delta, _) = lap_progress(self.total, self.last_s, s);
        self.last_s = s;
        self.progress += delta;
        if self.progress >= self.total {
            self.progress -= self.total;
            let ev = LapEvent {
                time: t - self.lap_start,
                clean: self.clean,
            };
            self.times.push(ev.time);
            self.clean_flags.push(ev.clean);
            self.lap_start = t;
            self.clean = true;
            Some(ev)
        } else {
            None
        }
    }
}

/// One vehicle on one track with a sensor and a compute pipeline.
pub struct Simulation<'a> {
    track: &'a Track,
    vehicle: &'a VehicleParams,
    sensor: SensorConfig,
    pipeline: PipelineConfig,
    pub state: VehicleState,
    /// Capture ray frames (controllers acting on the true pose can skip them).
    pub capture_frames: bool,
    pub record_trace: bool,
    dt: f64,
    step_index: u64,
    steps_per_capture: u64,
    captures: VecDeque<CaptureSlot>,
    capture_count: u64,
    buffer_len: usize,
    last_taken: Option<u64>,
    in_flight: VecDeque<InFlight>,
    busy_until: f64,
    last_actuated_frame: Option<f64>,
    rng: ChaCha8Rng,
    jitter: Option<Normal<f64>>,
    laps: LapTracker,
    push: Option<(f64, f64)>, // (lateral velocity, end time)
    prev_frame: Option<Vec<f64>>,
    decisions: Vec<DecisionRecord>,
    infractions: Vec<InfractionSite>,
    trace: Vec<TraceRow>,
    stopped: bool,
    last_query: TrackQueryResult,
}

impl<'a> Simulation<'a> {
    /// Starts at s = 0 on the centerline, aligned with it, already at `speed`.
    pub fn new(
        track: &'a Track,
        vehicle: &'a VehicleParams,
        sensor: &SensorConfig,
        pipeline: &PipelineConfig,
        speed: f64,
        seed: u64,
    ) -> Result<Self> {
        vehicle.validate()?;
        sensor.validate()?;
        pipeline.validate()?;
        if !(speed >= 0.0 && speed.is_finite()) {
            return Err(Error::input(format!(
                "speed setpoint must be non-negative, got {speed}"
            )));
        }
        let dt = DEFAULT_DT;
        let spc = (1.0 / (sensor.capture_hz * dt)).round() as u64;
        if spc == 0 || ((spc as f64) * dt * sensor.capture_hz - 1.0).abs() > 1e-9 {
            return Err(Error::input(
                "capture period must be a whole number of 5 ms steps",
            ));
        }
        let (p, h) = track.point_at(0.0);
        let state = VehicleState::new(p, h, speed);
        let jitter = (pipeline.compute_jitter_ms > 0.0)
            .then(|| Normal::new(0.0, pipeline.compute_jitter_ms / 1000.0).expect("finite"));
        Ok(Self {
            track,
            vehicle,
            sensor: *sensor,
            pipeline: *pipeline,
            state,
            capture_frames: true,
            record_trace: false,
            dt,
            step_index: 0,
            steps_per_capture: spc,
            captures: VecDeque::new(),
            capture_count: 0,
            buffer_len: 1,
            last_taken: None,
            in_flight: VecDeque::new(),
            busy_until: 0.0,
            last_actuated_frame: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
            jitter,
            laps: LapTracker::new(track.total_length(), track.locate(p).s),
            push: None,
            prev_frame: None,
            decisions: Vec::new(),
            infractions: Vec::new(),
            trace: Vec::new(),
            stopped: false,
            last_query: track.locate(p),
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn time(&self) -> f64 {
        self.step_index as f64 * self.dt
    }

    pub fn stopped(&self) -> bool {
        self.stopped
    }

    pub fn laps_completed(&self) -> usize {
        self.laps.times.len()
    }

    pub fn infractions(&self) -> usize {
        self.infractions.len()
    }

    pub fn lateral_offset(&self) -> f64 {
        self.last_query.lateral_offset
    }

    pub fn set_speed_setpoint(&mut self, speed: f64, immediate: bool) {
        self.state.speed_setpoint = speed;
        if immediate {
            self.state.speed = speed;
        }
    }

    pub fn pushing(&self) -> bool {
        self.push.is_some()
    }

    /// Slides the car sideways by `meters` over `duration` seconds.
    pub fn push_laterally(&mut self, meters: f64, duration: f64) {
        self.push = Some((meters / duration, self.time() + duration));
    }

    /// Observation whose newest frame is the capture at buffer position `end`.
    fn take_observation(
        &self,
        window: (usize, usize),
        end: usize,
    ) -> Option<(Observation, Pose, f64, u64)> {
        let (stack, stride) = window;
        let span = (stack - 1) * stride;
        if end < span {
            return None;
        }
        let mut frames = Vec::with_capacity(stack);
        let mut times = Vec::with_capacity(stack);
        for k in (0..stack).rev() {
            let slot = &self.captures[end - k * stride];
            frames.push(slot.frame.clone());
            times.push(slot.time);
        }
        let last = &self.captures[end];
        Some((
            Observation {
                frames,
                capture_times: times,
            },
            last.pose,
            last.time,
            last.index,
        ))
    }

    fn actuate_due(&mut self, t: f64) -> Result<()> {
        while let Some(front) = self.in_flight.front().copied() {
            if front.ready_at > t + 1e-9 {
                break;
            }
            self.in_flight.pop_front();
            self.state
                .set_steering(self.vehicle, front.command, front.ready_at)?;
            self.busy_until = front.ready_at;
            self.last_actuated_frame = Some(front.frame_time);
            self.decisions.push(DecisionRecord {
                frame_time: front.frame_time,
                actuation_time: front.ready_at,
                speed: self.state.speed,
                command: front.command,
            });
        }
        Ok(())
    }

    fn start_decision(&mut self, controller: &mut dyn Controller) -> Result<()> {
        if !self.pipeline.pipelined && !self.in_flight.is_empty() {
            return Ok(());
        }
        // A sequential pipeline that just finished picks the newest frame that
        // existed at that moment; otherwise it waits for the next capture.
        let (stack, stride) = controller.frame_window();
        let min_pos = (stack - 1) * stride;
        let ok =
            |i: usize| i >= min_pos && self.last_taken.is_none_or(|l| self.captures[i].index > l);
        let n = self.captures.len();
        let end = if self.pipelined_or_idle() {
            (n > 0 && ok(n - 1)).then(|| n - 1)
        } else {
            (0..n)
                .rev()
                .find(|&i| ok(i) && self.captures[i].time <= self.busy_until + 1e-9)
                .or_else(|| (0..n).find(|&i| ok(i)))
        };
        let Some(end) = end else {
            return Ok(());
        };
        let Some((obs, pose, frame_time, index)) =
            self.take_observation(controller.frame_window(), end)
        else {
            return Ok(());
        };
        let ctx = DecisionContext {
            observation: controller.needs_frames().then_some(&obs),
            pose,
            track: self.track,
            vehicle: self.vehicle,
            frame_time,
        };
        let command = controller.decide(&ctx)?;
        let start = if self.pipeline.pipelined {
            frame_time
        } else {
            self.busy_until.max(frame_time)
        };
        let mut delay = self.pipeline.total_delay_ms() / 1000.0;
        if let Some(j) = &self.jitter {
            delay = (delay + j.sample(&mut self.rng)).max(0.0);
        }
        self.in_flight.push_back(InFlight {
            frame_time,
            ready_at: start + delay,
            command,
        });
        self.last_taken = Some(index);
        Ok(())
    }

    /// Pipelined mode, or no computation has finished yet.
    fn pipelined_or_idle(&self) -> bool {
        self.pipeline.pipelined || self.last_actuated_frame.is_none() && self.in_flight.is_empty()
    }

    fn replace_on_centerline(&mut self, q: TrackQueryResult) {
        let (p, h) = self.track.point_at(q.s);
        self.state.x = p.x;
        self.state.y = p.y;
        self.state.heading = h;
        self.state.zero_steering();
        self.state.speed = self.state.speed_setpoint;
        self.in_flight.clear();
        self.captures.clear();
        self.prev_frame = None;
        self.push = None;
        self.busy_until = self.time();
        self.last_query = self.track.locate(p);
    }

    /// Advances one fixed step: capture (on the 20 Hz grid), actuate finished
    /// computations, start the next one, integrate, then check walls and laps.
    pub fn step(&mut self, controller: &mut dyn Controller) -> Result<StepReport> {
        let mut report = StepReport::default();
        let t = self.time();
        let window = controller.frame_window();
        self.buffer_len = (window.0 - 1) * window.1 + 2;

        if self.step_index.is_multiple_of(self.steps_per_capture) {
            let pose = Pose::of(&self.state);
            let frame = if self.capture_frames {
                let mut f = capture(
                    self.track,
                    pose.position(),
                    pose.heading,
                    &self.sensor,
                    &mut self.rng,
                );
                if self.sensor.blur_gain > 0.0 {
                    if let Some(prev) = &self.prev_frame {
                        apply_blur(&mut f, prev, pose.speed, self.sensor.blur_gain);
                    }
                    self.prev_frame = Some(f.clone());
                }
                f
            } else {
                Vec::new()
            };
            report.capture = Some(CaptureEvent {
                time: t,
                frame: frame.clone(),
                pose,
                s: self.last_query.s,
            });
            self.captures.push_back(CaptureSlot {
                index: self.capture_count,
                time: t,
                frame,
                pose,
            });
            self.capture_count += 1;
            while self.captures.len() > self.buffer_len {
                self.captures.pop_front();
            }
        }

        self.actuate_due(t)?;
        self.start_decision(controller)?;
        self.actuate_due(t)?;

        self.state.step(self.vehicle, self.dt);
        self.step_index += 1;
        let t_next = self.time();
        self.state.time = t_next;
        if let Some((v_lat, end)) = self.push {
            let n = Vec2::from_angle(self.state.heading).perp() * (v_lat * self.dt);
            self.state.x += n.x;
            self.state.y += n.y;
            if t_next >= end - 1e-9 {
                self.push = None;
            }
        }

        let q = self.track.locate(self.state.position());
        self.last_query = q;
        let info = self.track.classify(q, self.vehicle.body_half_width);
        if info.hit {
            let site = InfractionSite {
                time: t_next,
                s: q.s,
                wall: info.wall,
                side: info.side,
                turn: info.turn,
            };
            self.infractions.push(site);
            self.laps.clean = false;
            report.crash = Some(site);
            if self.pipeline.replace_on_crash {
                self.replace_on_centerline(q);
            } else {
                self.stopped = true;
            }
        }
        report.lap = self.laps.update(self.last_query.s, t_next);

        if self.record_trace {
            let frame_age_ms = self
                .last_actuated_frame
                .map_or(f64::NAN, |f| (t_next - f) * 1000.0);
            self.trace.push(TraceRow {
                t: t_next,
                x: self.state.x,
                y: self.state.y,
                heading: self.state.heading,
                steer_cmd: self.state.steer_commanded,
                steer_actual: self.state.steer_actual,
                frame_age_ms,
            });
        }
        Ok(report)
    }

    pub fn report(&self) -> LapReport {
        let belated = if self.decisions.is_empty() {
            0.0
        } else {
            self.decisions
                .iter()
                .map(|d| d.delay() * d.speed)
                .sum::<f64>()
                / self.decisions.len() as f64
        };
        let completed = self.laps.times.len();
        LapReport {
            laps_attempted: completed + usize::from(self.laps.progress > 0.0),
            laps_completed: completed,
            infractions: self.infractions.len(),
            infraction_sites: self.infractions.clone(),
            lap_times: self.laps.times.clone(),
            lap_clean: self.laps.clean_flags.clone(),
            mean_spatial_belatedness: belated,
            decisions: self.decisions.clone(),
            sim_time: self.time(),
            trace: self.trace.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub speed: f64,
    pub n_laps: usize,
    pub seed: u64,
    pub trace: bool,
    /// End the run at the first wall contact.
    pub stop_on_infraction: bool,
}

impl RunOptions {
    pub fn new(speed: f64, n_laps: usize, seed: u64) -> Self {
        Self {
            speed,
            n_laps,
            seed,
            trace: false,
            stop_on_infraction: false,
        }
    }
}

fn check_dims(controller: &dyn Controller, sensor: &SensorConfig) -> Result<()> {
    if let Some(dim) = controller.input_dim() {
        let (stack, _) = controller.frame_window();
        if dim != sensor.ray_count * stack {
            return Err(Error::input(format!(
                "controller expects {dim} inputs but the sensor yields {} x {stack}",
                sensor.ray_count
            )));
        }
    }
    Ok(())
}

/// Drives `n_laps` laps (or until 5x the nominal time runs out).
pub fn run_laps(
    track: &Track,
    vehicle: &VehicleParams,
    sensor: &SensorConfig,
    controller: &mut dyn Controller,
    pipeline: &PipelineConfig,
    opts: &RunOptions,
) -> Result<LapReport> {
    if opts.n_laps == 0 {
        return Err(Error::input("n_laps must be at least 1"));
    }
    if !(opts.speed > 0.0) {
        return Err(Error::input("lap runs need a positive speed"));
    }
    check_dims(controller, sensor)?;
    let mut sim = Simulation::new(track, vehicle, sensor, pipeline, opts.speed, opts.seed)?;
    sim.capture_frames = controller.needs_frames();
    sim.record_trace = opts.trace;
    let limit = 5.0 * opts.n_laps as f64 * track.total_length() / opts.speed;
    let steps = (limit / sim.dt()).ceil() as u64;
    for _ in 0..steps {
        let r = sim.step(controller)?;
        if sim.laps_completed() >= opts.n_laps || sim.stopped() {
            break;
        }
        if opts.stop_on_infraction && r.crash.is_some() {
            break;
        }
    }
    Ok(sim.report())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub v_min: f64,
    pub v_step: f64,
    pub v_max: f64,
    pub probe_laps: usize,
    pub resolution: f64,
    pub confirm_laps: usize,
    pub confirm_max_infractions: usize,
    pub confirm_seeds: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            v_min: 0.2,
            v_step: 0.05,
            v_max: 3.0,
            probe_laps: 5,
            resolution: 0.01,
            confirm_laps: 25,
            confirm_max_infractions: 1,
            confirm_seeds: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastestLap {
    /// Highest confirmed safe speed; `None` is the "cannot drive" sentinel.
    pub speed: Option<f64>,
    /// Mean clean-lap time at that speed.
    pub lap_time: Option<f64>,
    pub probes: Vec<(f64, bool)>,
}

impl FastestLap {
    /// Lap time with the sentinel mapped to infinity.
    pub fn lap_time_s(&self) -> f64 {
        self.lap_time.unwrap_or(f64::INFINITY)
    }
}

fn mix_seed(seed: u64, speed: f64, salt: u64) -> u64 {
    let mut z = seed ^ speed.to_bits().rotate_left(17) ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Finds the highest speed the controller sustains: ascending probes from
/// `v_min`, bisection to `resolution`, then a multi-lap confirmation.
pub fn fastest_safe_lap(
    track: &Track,
    vehicle: &VehicleParams,
    sensor: &SensorConfig,
    controller: &mut dyn Controller,
    pipeline: &PipelineConfig,
    search: &SearchConfig,
    seed: u64,
) -> Result<FastestLap> {
    check_dims(controller, sensor)?;
    let mut probes = Vec::new();
    let mut probe = |v: f64, controller: &mut dyn Controller| -> Result<bool> {
        let mut opts = RunOptions::new(v, search.probe_laps, mix_seed(seed, v, 1));
        opts.stop_on_infraction = true;
        let r = run_laps(track, vehicle, sensor, controller, pipeline, &opts)?;
        let ok = r.infractions == 0 && r.laps_completed >= search.probe_laps;
        probes.push((v, ok));
        Ok(ok)
    };

    let mut last_safe: Option<f64> = None;
    let mut first_fail: Option<f64> = None;
    let n_steps = ((search.v_max - search.v_min) / search.v_step + 1e-9).floor() as usize;
    for k in 0..=n_steps {
        let v = search.v_min + k as f64 * search.v_step;
        if probe(v, controller)? {
            last_safe = Some(v);
        } else {
            first_fail = Some(v);
            break;
        }
    }
    let Some(mut lo) = last_safe else {
        return Ok(FastestLap {
            speed: None,
            lap_time: None,
            probes,
        });
    };
    if let Some(mut hi) = first_fail {
        while hi - lo > search.resolution + 1e-9 {
            let mid = round_to(0.5 * (lo + hi), search.resolution);
            if mid <= lo + 1e-9 || mid >= hi - 1e-9 {
                break;
            }
            if probe(mid, controller)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }

    let mut v = lo;
    while v >= search.v_min - 1e-9 {
        let mut lap_means = Vec::new();
        for k in 0..search.confirm_seeds {
            let opts = RunOptions::new(v, search.confirm_laps, mix_seed(seed, v, 100 + k as u64));
            let r = run_laps(track, vehicle, sensor, controller, pipeline, &opts)?;
            let clean = r.clean_lap_times();
            if r.infractions <= search.confirm_max_infractions && !clean.is_empty() {
                lap_means.push(clean.iter().sum::<f64>() / clean.len() as f64);
            }
        }
        if 2 * lap_means.len() > search.confirm_seeds {
            lap_means.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = if lap_means.len() % 2 == 1 {
                lap_means[lap_means.len() / 2]
            } else {
                0.5 * (lap_means[lap_means.len() / 2 - 1] + lap_means[lap_means.len() / 2])
            };
            return Ok(FastestLap {
                speed: Some(v),
                lap_time: Some(median),
                probes,
            });
        }
        v = round_to(v - 2.0 * search.resolution, search.resolution);
    }
    Ok(FastestLap {
        speed: None,
        lap_time: None,
        probes,
    })
}

fn round_to(v: f64, step: f64) -> f64 {
    (v / step).round() * step
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub shift_ms: i64,
    pub added_delay_ms: f64,
    pub total_delay_ms: f64,
    /// Mean fastest safe lap time; infinity when the model cannot drive
    /// (stored as null in JSON).
    #[serde(with = "inf_as_null")]
    pub fastest_lap_s: f64,
    pub speed: Option<f64>,
    pub passes_task: bool,
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub threshold_s: f64,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn cell(&self, shift_ms: i64, added_delay_ms: f64) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.shift_ms == shift_ms && (c.added_delay_ms - added_delay_ms).abs() < 1e-9)
    }

    /// Cells of one model ordered by delay.
    pub fn column(&self, shift_ms: i64) -> Vec<&SweepCell> {
        let mut col: Vec<&SweepCell> = self
            .cells
            .iter()
            .filter(|c| c.shift_ms == shift_ms)
            .collect();
        col.sort_by(|a, b| a.added_delay_ms.partial_cmp(&b.added_delay_ms).unwrap());
        col
    }
}

/// Fastest-safe-lap search for every (model, added delay) pair.
/// `threshold_s` is the task limit: a cell passes when its lap time is at most this.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    track: &Track,
    vehicle: &VehicleParams,
    sensor: &SensorConfig,
    models: &[(i64, &Policy)],
    delays_ms: &[f64],
    base: &PipelineConfig,
    search: &SearchConfig,
    threshold_s: f64,
    seed: u64,
) -> Result<SweepReport> {
    let jobs: Vec<(i64, &Policy, f64)> = models
        .iter()
        .flat_map(|&(shift, p)| delays_ms.iter().map(move |&d| (shift, p, d)))
        .collect();
    let cells: Result<Vec<SweepCell>> = jobs
        .par_iter()
        .map(|&(shift, policy, delay)| {
            let pipeline = base.with_added_delay(delay);
            let mut ctl = PolicyController::new(policy);
            let cell_seed = mix_seed(seed, delay, (shift as u64).wrapping_add(1000));
            let fl = fastest_safe_lap(
                track, vehicle, sensor, &mut ctl, &pipeline, search, cell_seed,
            )?;
            let lap = fl.lap_time_s();
            Ok(SweepCell {
                shift_ms: shift,
                added_delay_ms: delay,
                total_delay_ms: pipeline.total_delay_ms(),
                fastest_lap_s: lap,
                speed: fl.speed,
                passes_task: lap <= threshold_s,
            })
        })
        .collect();
    Ok(SweepReport {
        threshold_s,
        cells: cells?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSpeedCell {
    pub model: String,
    pub deploy_speed_name: String,
    pub deploy_speed: f64,
    pub laps_completed: usize,
    pub infractions: usize,
    pub inside: usize,
    pub outside: usize,
    pub straight: usize,
}

/// Runs every model at every speed for `n_laps` laps and tallies wall contacts by side.
#[allow(clippy::too_many_arguments)]
pub fn cross_speed_eval(
    track: &Track,
    vehicle: &VehicleParams,
    sensor: &SensorConfig,
    models: &[(String, &Policy)],
    speeds: &[(String, f64)],
    pipeline: &PipelineConfig,
    n_laps: usize,
    seed: u64,
) -> Result<Vec<CrossSpeedCell>> {
    let jobs: Vec<(&String, &Policy, &String, f64)> = models
        .iter()
        .flat_map(|(name, p)| speeds.iter().map(move |(sn, v)| (name, *p, sn, *v)))
        .collect();
    jobs.par_iter()
        .map(|&(name, policy, sname, v)| {
            let mut ctl = PolicyController::new(policy);
            let opts = RunOptions::new(v, n_laps, mix_seed(seed, v, 7));
            let r = run_laps(track, vehicle, sensor, &mut ctl, pipeline, &opts)?;
            Ok(tally(name.clone(), sname.clone(), v, &r))
        })
        .collect()
}

pub fn tally(
    model: String,
    deploy_speed_name: String,
    deploy_speed: f64,
    r: &LapReport,
) -> CrossSpeedCell {
    let count = |w: WallClass| r.infraction_sites.iter().filter(|s| s.wall == w).count();
    CrossSpeedCell {
        model,
        deploy_speed_name,
        deploy_speed,
        laps_completed: r.laps_completed,
        infractions: r.infractions,
        inside: count(WallClass::Inside),
        outside: count(WallClass::Outside),
        straight: count(WallClass::Straight),
    }
}
