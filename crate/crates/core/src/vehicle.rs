//! Kinematic bicycle with a lagged, delayed steering actuator and a first-order
//! speed loop, integrated with fixed-step explicit Euler.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;

pub const DEFAULT_DT: f64 = 0.005;
pub const MAX_DT: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Axle distance (m).
    pub wheelbase: f64,
    /// Steering angle limit (rad).
    pub max_steer: f64,
    /// First-order steering lag time constant (s).
    pub actuator_tau: f64,
    /// Pure transport delay between command and actuator (s).
    pub actuator_pure_delay: f64,
    /// Speed tracking time constant (s).
    pub speed_tau: f64,
    /// Half of the body width (m); shrinks the drivable corridor for collision tests.
    pub body_half_width: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 0.26,
            // Outer-wheel turning diameter ~1.40 m with the 0.19 m body.
            max_steer: 0.44,
            actuator_tau: 0.08,
            actuator_pure_delay: 0.02,
            speed_tau: 0.25,
            body_half_width: 0.095,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("wheelbase", self.wheelbase),
            ("max_steer", self.max_steer),
            ("actuator_tau", self.actuator_tau),
            ("actuator_pure_delay", self.actuator_pure_delay),
            ("speed_tau", self.speed_tau),
            ("body_half_width", self.body_half_width),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::input(format!(
                    "vehicle {name} must be positive, got {v}"
                )));
            }
        }
        if self.max_steer >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::input("vehicle max_steer must be below pi/2"));
        }
        Ok(())
    }

    /// Radius of the tightest circle the reference point can drive.
    pub fn min_turning_radius(&self) -> f64 {
        let t = self.max_steer.tan();
        if t <= 0.0 {
            f64::INFINITY
        } else {
            self.wheelbase / t
        }
    }

    /// Diameter swept by the outer front wheel at full lock.
    pub fn outer_turning_diameter(&self) -> f64 {
        let r = self.min_turning_radius() + self.body_half_width;
        2.0 * (r * r + self.wheelbase * self.wheelbase).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendingCommand {
    pub release_time: f64,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub speed_setpoint: f64,
    /// Realized steering angle (rad), after the actuator lag.
    pub steer_actual: f64,
    /// Steering angle (rad) the actuator is currently tracking.
    pub steer_commanded: f64,
    /// Simulated time (s).
    pub time: f64,
    pub pending: VecDeque<PendingCommand>,
}

impl VehicleState {
    pub fn new(position: Vec2, heading: f64, speed: f64) -> Self {
        Self {
            x: position.x,
            y: position.y,
            heading,
            speed,
            speed_setpoint: speed,
            steer_actual: 0.0,
            steer_commanded: 0.0,
            time: 0.0,
            pending: VecDeque::new(),
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// Queues a normalized steering command in [-1, 1]; it reaches the actuator
    /// `actuator_pure_delay` after `now`.
    pub fn set_steering(&mut self, params: &VehicleParams, command: f64, now: f64) -> Result<()> {
        if !command.is_finite() {
            return Err(Error::input(format!(
                "steering command must be finite, got {command}"
            )));
        }
        let target = command.clamp(-1.0, 1.0) * params.max_steer;
        self.pending.push_back(PendingCommand {
            release_time: now + params.actuator_pure_delay,
            target,
        });
        Ok(())
    }

    /// Drops queued commands and centers the wheels.
    pub fn zero_steering(&mut self) {
        self.pending.clear();
        self.steer_actual = 0.0;
        self.steer_commanded = 0.0;
    }

    /// Advances the state by `dt` seconds.
    pub fn step(&mut self, params: &VehicleParams, dt: f64) {
        debug_assert!(dt > 0.0 && dt <= MAX_DT);
        self.time += dt;
        // Release everything that is due at the end of this step.
        while let Some(cmd) = self.pending.front() {
            if cmd.release_time <= self.time + 1e-9 {
                self.steer_commanded = cmd.target;
                self.pending.pop_front();
            } else {
                break;
            }
        }
        let alpha = 1.0 - (-dt / params.actuator_tau).exp();
        self.steer_actual += (self.steer_commanded - self.steer_actual) * alpha;
        self.steer_actual = self.steer_actual.clamp(-params.max_steer, params.max_steer);

        let beta = (dt / params.speed_tau).min(1.0);
        self.speed = (self.speed + (self.speed_setpoint - self.speed) * beta).max(0.0);

        self.heading += self.speed / params.wheelbase * self.steer_actual.tan() * dt;
        self.x += self.speed * self.heading.cos() * dt;
        self.y += self.speed * self.heading.sin() * dt;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry_matches_turning_diameter() {
        let p = VehicleParams::default();
        p.validate().unwrap();
        assert!(2.0 * p.min_turning_radius() <= 1.40);
        assert!(
            (p.outer_turning_diameter() - 1.40).abs() < 0.02,
            "{}",
            p.outer_turning_diameter()
        );
    }

    #[test]
    fn min_turning_radius_formula() {
        let p = VehicleParams {
            max_steer: 0.4,
            ..Default::default()
        };
        assert!((p.min_turning_radius() - 0.26 / 0.4f64.tan()).abs() < 1e-12);
        assert!((p.min_turning_radius() - 0.6150).abs() < 1e-4);
        let flat = VehicleParams {
            max_steer: 0.0,
            ..Default::default()
        };
        assert!(flat.min_turning_radius().is_infinite());
    }

    #[test]
    fn set_steering_clips_and_queues() {
        let p = VehicleParams::default();
        let mut s = VehicleState::new(Vec2::ZERO, 0.0, 0.0);
        s.set_steering(&p, 1.5, 0.0).unwrap();
        assert_eq!(s.pending[0].target, p.max_steer);
        s.set_steering(&p, 0.0, 0.0).unwrap();
        assert_eq!(s.pending[1].target, 0.0);
        assert!(s.set_steering(&p, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn pure_delay_release_time() {
        let p = VehicleParams::default();
        let mut s = VehicleState::new(Vec2::ZERO, 0.0, 0.0);
        s.set_steering(&p, -1.0, 0.0).unwrap();
        s.step(&p, 0.005);
        s.step(&p, 0.005);
        s.step(&p, 0.005);
        assert_eq!(s.steer_commanded, 0.0);
        s.step(&p, 0.005); // t = 0.020
        assert_eq!(s.steer_commanded, -p.max_steer);
    }

    #[test]
    fn straight_step() {
        let p = VehicleParams::default();
        let mut s = VehicleState::new(Vec2::ZERO, 0.0, 1.0);
        s.step(&p, 0.005);
        assert!((s.x - 0.005).abs() < 1e-15);
        assert_eq!(s.y, 0.0);
        assert_eq!(s.heading, 0.0);
    }

    #[test]
    fn actuator_step_response() {
        let p = VehicleParams::default();
        let mut s = VehicleState::new(Vec2::ZERO, 0.0, 0.0);
        let delta = 0.3;
        s.steer_commanded = delta;
        let steps = (p.actuator_tau / DEFAULT_DT).round() as usize;
        for _ in 0..steps {
            s.step(&p, DEFAULT_DT);
        }
        let expect = delta * (1.0 - (-1.0f64).exp());
        assert!((s.steer_actual - expect).abs() <= 0.02 * expect);
    }
}
