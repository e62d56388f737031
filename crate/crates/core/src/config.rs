//! Experiment configuration: a sectioned `key = value` file (TOML syntax).
//!
//! Every key is optional and falls back to its default; unknown sections or
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::closedloop::{PipelineConfig, SearchConfig};
use crate::dataset::PAPER_SHIFTS_MS;
use crate::error::{Error, Result};
use crate::expert::ExpertParams;
use crate::learner::TrainConfig;
use crate::ood::OodConfig;
use crate::sensing::SensorConfig;
use crate::track::TrackGenParams;
use crate::vehicle::VehicleParams;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub track: TrackSection,
    pub vehicle: VehicleSection,
    pub sensor: SensorSection,
    pub expert: ExpertSection,
    pub train: TrainSection,
    pub pipeline: PipelineSection,
    pub sweep: SweepSection,
    pub ood: OodSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackSection {
    pub length: f64,
    pub width: f64,
    pub min_radius: f64,
    pub min_straight: f64,
    pub turn_radius_min: f64,
    pub turn_radius_max: f64,
    pub max_attempts: usize,
}

impl Default for TrackSection {
    fn default() -> Self {
        let p = TrackGenParams::default();
        Self {
            length: p.length,
            width: p.width,
            min_radius: p.min_radius,
            min_straight: p.min_straight,
            turn_radius_min: p.turn_radius.0,
            turn_radius_max: p.turn_radius.1,
            max_attempts: p.max_attempts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleSection {
    pub wheelbase: f64,
    pub max_steer: f64,
    pub actuator_tau: f64,
    pub actuator_pure_delay: f64,
    pub speed_tau: f64,
    pub body_half_width: f64,
}

impl Default for VehicleSection {
    fn default() -> Self {
        let v = VehicleParams::default();
        Self {
            wheelbase: v.wheelbase,
            max_steer: v.max_steer,
            actuator_tau: v.actuator_tau,
            actuator_pure_delay: v.actuator_pure_delay,
            speed_tau: v.speed_tau,
            body_half_width: v.body_half_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorSection {
    pub ray_count: usize,
    pub fov_deg: f64,
    pub max_range: f64,
    pub capture_hz: f64,
    pub noise_sigma: f64,
    pub blur_gain: f64,
    /// Frames per multi-frame observation.
    pub multi_stack: usize,
    /// Capture spacing between stacked frames.
    pub stride: usize,
}

impl Default for SensorSection {
    fn default() -> Self {
        let s = SensorConfig::default();
        Self {
            ray_count: s.ray_count,
            fov_deg: s.fov.to_degrees(),
            max_range: s.max_range,
            capture_hz: s.capture_hz,
            noise_sigma: s.noise_sigma,
            blur_gain: s.blur_gain,
            multi_stack: 3,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertSection {
    pub base_lookahead: f64,
    pub lookahead_per_speed: f64,
    pub steer_gain: f64,
    pub quantize: bool,
    pub perturb_prob: f64,
    pub perturb_sigma: f64,
    /// Study speeds (m/s).
    pub slow_speed: f64,
    pub fast_speed: f64,
    pub delay_speed: f64,
    /// Simulated seconds of driving per speed-study recording.
    pub speed_study_duration_s: f64,
    pub delay_study_duration_s: f64,
    /// Relative per-lap setpoint spread during delay-study collection.
    pub delay_speed_jitter: f64,
    pub clean_before_s: f64,
    pub clean_after_s: f64,
}

impl Default for ExpertSection {
    fn default() -> Self {
        let e = ExpertParams::default();
        Self {
            base_lookahead: e.base_lookahead,
            lookahead_per_speed: e.lookahead_per_speed,
            steer_gain: e.steer_gain,
            quantize: e.quantize,
            perturb_prob: e.perturb_prob,
            perturb_sigma: e.perturb_sigma,
            slow_speed: 0.70,
            fast_speed: 1.14,
            delay_speed: 2.04,
            speed_study_duration_s: 1000.0,
            delay_study_duration_s: 2250.0,
            delay_speed_jitter: 0.05,
            clean_before_s: 5.0,
            clean_after_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub weight_decay: f64,
    pub folds: usize,
    pub periods: usize,
    pub single_hidden: Vec<usize>,
    pub multi_hidden: Vec<usize>,
    pub dropout: f64,
    /// Fraction of the delay-study recording held out (chronologically last) for early stopping.
    pub holdout_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            weight_decay: t.weight_decay,
            folds: 5,
            periods: 10,
            single_hidden: vec![64, 32],
            multi_hidden: vec![128, 64],
            dropout: 0.2,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub base_compute_ms: f64,
    pub added_delay_ms: f64,
    pub replace_on_crash: bool,
    pub pipelined: bool,
    pub compute_jitter_ms: f64,
    /// Laps per on-policy cross-speed evaluation.
    pub eval_laps: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            base_compute_ms: p.base_compute_ms,
            added_delay_ms: p.added_delay_ms,
            replace_on_crash: p.replace_on_crash,
            pipelined: p.pipelined,
            compute_jitter_ms: p.compute_jitter_ms,
            eval_laps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub shifts_ms: Vec<i64>,
    pub delays_ms: Vec<f64>,
    pub v_min: f64,
    pub v_step: f64,
    pub v_max: f64,
    pub probe_laps: usize,
    pub resolution: f64,
    pub confirm_laps: usize,
    pub confirm_max_infractions: usize,
    pub confirm_seeds: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        let s = SearchConfig::default();
        Self {
            shifts_ms: PAPER_SHIFTS_MS.to_vec(),
            delays_ms: vec![0.0, 25.0, 50.0, 75.0, 100.0],
            v_min: s.v_min,
            v_step: s.v_step,
            v_max: s.v_max,
            probe_laps: s.probe_laps,
            resolution: s.resolution,
            confirm_laps: s.confirm_laps,
            confirm_max_infractions: s.confirm_max_infractions,
            confirm_seeds: s.confirm_seeds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodSection {
    /// Skips the embedding and frame-skip analyses when false.
    pub enabled: bool,
    pub k: usize,
    pub max_reference: usize,
    pub max_queries: usize,
}

impl Default for OodSection {
    fn default() -> Self {
        let o = OodConfig::default();
        Self {
            enabled: true,
            k: o.k,
            max_reference: o.max_reference,
            max_queries: o.max_queries,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|sp| text[..sp.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Config(format!("line {line}: {}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The config as a file that parses back to the same value.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>| r.map_err(|e| Error::Config(e.to_string()));
        wrap(self.vehicle_params().validate())?;
        wrap(self.sensor_config().validate())?;
        wrap(self.expert_params().validate())?;
        wrap(self.pipeline_config().validate())?;
        wrap(self.train_config(0).validate())?;
        let t = &self.track;
        if !(t.turn_radius_min > 0.0 && t.turn_radius_min < t.turn_radius_max) {
            return Err(Error::Config(
                "track turn_radius_min must be positive and below turn_radius_max".into(),
            ));
        }
        let e = &self.expert;
        for (name, v) in [
            ("slow_speed", e.slow_speed),
            ("fast_speed", e.fast_speed),
            ("delay_speed", e.delay_speed),
            ("speed_study_duration_s", e.speed_study_duration_s),
            ("delay_study_duration_s", e.delay_study_duration_s),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("expert {name} must be positive")));
            }
        }
        if self.train.folds < 2 || self.train.periods < self.train.folds {
            return Err(Error::Config(
                "train folds must be ≥ 2 and periods ≥ folds".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.train.holdout_fraction)
            || !(0.0..1.0).contains(&self.train.dropout)
        {
            return Err(Error::Config(
                "train holdout_fraction and dropout must be in [0, 1)".into(),
            ));
        }
        if self.sensor.multi_stack < 2 || self.sensor.stride == 0 {
            return Err(Error::Config(
                "sensor multi_stack must be ≥ 2 and stride ≥ 1".into(),
            ));
        }
        let sw = &self.sweep;
        if sw.shifts_ms.is_empty() || sw.delays_ms.is_empty() || !sw.shifts_ms.contains(&0) {
            return Err(Error::Config(
                "sweep needs delays and shifts including 0".into(),
            ));
        }
        if sw.shifts_ms.iter().any(|s| s % 50 != 0) || sw.delays_ms.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::Config(
                "sweep shifts must be multiples of 50 ms and delays ≥ 0".into(),
            ));
        }
        if !(sw.v_min > 0.0 && sw.v_step > 0.0 && sw.v_max > sw.v_min && sw.resolution > 0.0)
            || sw.probe_laps == 0
            || sw.confirm_laps == 0
            || sw.confirm_seeds == 0
        {
            return Err(Error::Config(
                "sweep search settings must be positive with v_max > v_min".into(),
            ));
        }
        if self.ood.k == 0 || self.ood.max_reference < self.ood.k || self.ood.max_queries == 0 {
            return Err(Error::Config(
                "ood k must be ≥ 1 and at most max_reference".into(),
            ));
        }
        Ok(())
    }

    pub fn track_params(&self) -> TrackGenParams {
        let t = &self.track;
        TrackGenParams {
            length: t.length,
            width: t.width,
            min_radius: t.min_radius,
            min_straight: t.min_straight,
            turn_radius: (t.turn_radius_min, t.turn_radius_max),
            max_attempts: t.max_attempts,
        }
    }

    pub fn vehicle_params(&self) -> VehicleParams {
        let v = &self.vehicle;
        VehicleParams {
            wheelbase: v.wheelbase,
            max_steer: v.max_steer,
            actuator_tau: v.actuator_tau,
            actuator_pure_delay: v.actuator_pure_delay,
            speed_tau: v.speed_tau,
            body_half_width: v.body_half_width,
        }
    }

    pub fn sensor_config(&self) -> SensorConfig {
        let s = &self.sensor;
        SensorConfig {
            ray_count: s.ray_count,
            fov: s.fov_deg.to_radians(),
            max_range: s.max_range,
            capture_hz: s.capture_hz,
            noise_sigma: s.noise_sigma,
            stack_size: 1,
            blur_gain: s.blur_gain,
        }
    }

    pub fn expert_params(&self) -> ExpertParams {
        let e = &self.expert;
        ExpertParams {
            base_lookahead: e.base_lookahead,
            lookahead_per_speed: e.lookahead_per_speed,
            steer_gain: e.steer_gain,
            quantize: e.quantize,
            perturb_prob: e.perturb_prob,
            perturb_sigma: e.perturb_sigma,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            weight_decay: t.weight_decay,
            fixed_epochs: None,
            full_batch: false,
            seed,
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let p = &self.pipeline;
        PipelineConfig {
            base_compute_ms: p.base_compute_ms,
            added_delay_ms: p.added_delay_ms,
            replace_on_crash: p.replace_on_crash,
            pipelined: p.pipelined,
            compute_jitter_ms: p.compute_jitter_ms,
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        let s = &self.sweep;
        SearchConfig {
            v_min: s.v_min,
            v_step: s.v_step,
            v_max: s.v_max,
            probe_laps: s.probe_laps,
            resolution: s.resolution,
            confirm_laps: s.confirm_laps,
            confirm_max_infractions: s.confirm_max_infractions,
            confirm_seeds: s.confirm_seeds,
        }
    }

    pub fn ood_config(&self) -> OodConfig {
        OodConfig {
            k: self.ood.k,
            max_reference: self.ood.max_reference,
            max_queries: self.ood.max_queries,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(
            ExperimentConfig::parse("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn sections_override_defaults() {
        let c = ExperimentConfig::parse(
            "seed = 7\n# comment\n[vehicle]\nactuator_tau = 0.1\n[sweep]\ndelays_ms = [0, 50]\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.vehicle.actuator_tau, 0.1);
        assert_eq!(c.sweep.delays_ms, vec![0.0, 50.0]);
        assert_eq!(c.sensor, SensorSection::default());
    }

    #[test]
    fn unknown_keys_are_fatal() {
        let e = ExperimentConfig::parse("[vehicle]\nwheelbse = 0.3\n").unwrap_err();
        let msg = e.to_string();
        assert!(matches!(e, Error::Config(_)));
        assert!(msg.contains("line 2") && msg.contains("wheelbse"), "{msg}");
        assert!(ExperimentConfig::parse("[engine]\nx = 1\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::parse("[vehicle]\nwheelbase = -1.0\n").is_err());
        assert!(ExperimentConfig::parse("[sweep]\nshifts_ms = [0, 30]\n").is_err());
        assert!(ExperimentConfig::parse("[train]\nfolds = 5\nperiods = 3\n").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig {
            seed: 3,
            ..Default::default()
        };
        c.expert.fast_speed = 1.2;
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }
}
