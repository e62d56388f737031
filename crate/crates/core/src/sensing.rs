//! Ray-cast range sensor standing in for the camera, plus frame stacking.
//!
//! A frame is a fixed-order vector of wall distances (rightmost ray first). It is a
//! pure function of the pose, so two captures from the same pose at different
//! speeds are identical apart from sensor noise.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::track::Track;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub ray_count: usize,
    /// Field of view (rad), centered on the heading.
    pub fov: f64,
    pub max_range: f64,
    pub capture_hz: f64,
    /// Standard deviation of additive range noise (m).
    pub noise_sigma: f64,
    /// Frames per observation: 1 (single-frame) or 3 (multi-frame).
    pub stack_size: usize,
    /// Frame mixing per m/s of speed; 0 disables motion blur.
    pub blur_gain: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            ray_count: 32,
            fov: 160f64.to_radians(),
            max_range: 3.0,
            capture_hz: 20.0,
            noise_sigma: 0.005,
            stack_size: 1,
            blur_gain: 0.0,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ray_count < 4 {
            return Err(Error::input("sensor ray_count must be at least 4"));
        }
        if !(self.fov > 0.0 && self.fov < std::f64::consts::TAU) {
            return Err(Error::input("sensor fov must lie in (0, 2*pi)"));
        }
        if !(self.capture_hz > 0.0) || !(self.max_range > 0.0) || self.noise_sigma < 0.0 {
            return Err(Error::input(
                "sensor capture_hz and max_range must be positive",
            ));
        }
        if !matches!(self.stack_size, 1 | 3) {
            return Err(Error::input("sensor stack_size must be 1 or 3"));
        }
        Ok(())
    }

    pub fn frame_period(&self) -> f64 {
        1.0 / self.capture_hz
    }

    /// Ray directions relative to the heading, from rightmost to leftmost.
    pub fn ray_angles(&self) -> Vec<f64> {
        let n = self.ray_count;
        (0..n)
            .map(|i| -0.5 * self.fov + self.fov * i as f64 / (n - 1) as f64)
            .collect()
    }

    pub fn with_stack(mut self, stack_size: usize) -> Self {
        self.stack_size = stack_size;
        self
    }
}

/// Noise-free ray distances from `position` looking along `heading`.
pub fn capture_clean(
    track: &Track,
    position: Vec2,
    heading: f64,
    config: &SensorConfig,
) -> Vec<f64> {
    config
        .ray_angles()
        .into_iter()
        .map(|a| track.cast_ray(position, Vec2::from_angle(heading + a), config.max_range))
        .collect()
}

/// One sensor frame with additive Gaussian noise, clipped to `[0, max_range]`.
pub fn capture<R: Rng + ?Sized>(
    track: &Track,
    position: Vec2,
    heading: f64,
    config: &SensorConfig,
    rng: &mut R,
) -> Vec<f64> {
    let mut frame = capture_clean(track, position, heading, config);
    if config.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, config.noise_sigma).expect("finite sigma");
        for d in &mut frame {
            *d = (*d + noise.sample(rng)).clamp(0.0, config.max_range);
        }
    }
    frame
}

/// Exponential mixing with the previous frame, stronger at higher speed.
pub fn apply_blur(frame: &mut [f64], previous: &[f64], speed: f64, gain: f64) {
    let a = (gain * speed).clamp(0.0, 0.9);
    if a == 0.0 {
        return;
    }
    for (f, p) in frame.iter_mut().zip(previous) {
        *f = (1.0 - a) * *f + a * p;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Oldest first.
    pub frames: Vec<Vec<f64>>,
    pub capture_times: Vec<f64>,
}

impl Observation {
    pub fn newest_time(&self) -> f64 {
        *self.capture_times.last().expect("non-empty observation")
    }

    /// Concatenated frames, oldest first; the network input layout.
    pub fn flatten(&self) -> Vec<f64> {
        self.frames.iter().flatten().copied().collect()
    }
}

/// Rolling buffer of the most recent captures.
#[derive(Debug, Clone)]
pub struct FrameBuffer {
    frames: VecDeque<(f64, Vec<f64>)>,
    capacity: usize,
}

impl FrameBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            frames: VecDeque::with_capacity(capacity + 1),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, time: f64, frame: Vec<f64>) {
        self.frames.push_back((time, frame));
        while self.frames.len() > self.capacity {
            self.frames.pop_front();
        }
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn latest(&self) -> Option<(f64, &[f64])> {
        self.frames.back().map(|(t, f)| (*t, f.as_slice()))
    }

    /// The newest `stack_size` frames taken every `stride` captures, oldest first.
    /// `None` until enough frames are buffered.
    pub fn stack(&self, stack_size: usize, stride: usize) -> Option<Observation> {
        let span = (stack_size - 1) * stride + 1;
        if self.frames.len() < span {
            return None;
        }
        let newest = self.frames.len() - 1;
        let mut frames = Vec::with_capacity(stack_size);
        let mut capture_times = Vec::with_capacity(stack_size);
        for k in (0..stack_size).rev() {
            let (t, f) = &self.frames[newest - k * stride];
            frames.push(f.clone());
            capture_times.push(*t);
        }
        Some(Observation {
            frames,
            capture_times,
        })
    }
}

/// Mean over consecutive frame pairs of the mean squared per-ray difference.
pub fn mean_sq_interframe_diff<'a>(pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (a, b) in pairs {
        let msd = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
        total += msd;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Occupancy image of a frame for visualization: one column per ray, `rows` range
/// bins with the nearest bin at the bottom. A cell is 1 when the ray stopped inside it.
pub fn rasterize(frame: &[f64], max_range: f64, rows: usize) -> Vec<Vec<u8>> {
    let mut grid = vec![vec![0u8; frame.len()]; rows];
    for (col, &d) in frame.iter().enumerate() {
        if d >= max_range {
            continue;
        }
        let bin = ((d / max_range) * rows as f64).floor() as usize;
        grid[rows - 1 - bin.min(rows - 1)][col] = 1;
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::stadium;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perpendicular_rays_on_straight() {
        let t = stadium(20.0, 2.0, 0.375).unwrap();
        let cfg = SensorConfig {
            fov: std::f64::consts::PI,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let frame = capture_clean(&t, Vec2::new(10.0, 0.0), 0.0, &cfg);
        let (right, left) = (frame[0], frame[cfg.ray_count - 1]);
        assert!((right - 0.375).abs() <= 0.02 * 0.375, "{right}");
        assert!((left - 0.375).abs() <= 0.02 * 0.375, "{left}");
        // Straight ahead: the corridor continues past max_range.
        let ahead = capture_clean(
            &t,
            Vec2::new(2.0, 0.0),
            0.0,
            &SensorConfig {
                ray_count: 5,
                fov: 0.2,
                noise_sigma: 0.0,
                ..Default::default()
            },
        );
        assert_eq!(ahead[2], 3.0);
    }

    #[test]
    fn capture_is_deterministic_and_bounded() {
        let t = crate::track::generate_default_track(0).unwrap();
        let cfg = SensorConfig {
            noise_sigma: 0.05,
            ..Default::default()
        };
        let (p, h) = t.point_at(3.0);
        let a = capture(&t, p, h, &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let b = capture(&t, p, h, &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert!(a.iter().all(|&d| (0.0..=cfg.max_range).contains(&d)));
    }

    #[test]
    fn stacking_windows() {
        let mut buf = FrameBuffer::new(8);
        assert!(buf.stack(1, 1).is_none());
        for k in 1..=5 {
            buf.push(k as f64 * 0.05, vec![k as f64]);
        }
        let one = buf.stack(1, 1).unwrap();
        assert_eq!(one.frames, vec![vec![5.0]]);
        let three = buf.stack(3, 1).unwrap();
        assert_eq!(three.frames, vec![vec![3.0], vec![4.0], vec![5.0]]);
        for w in three.capture_times.windows(2) {
            assert!((w[1] - w[0] - 0.05).abs() < 1e-9);
        }
        let skip = buf.stack(3, 2).unwrap();
        assert_eq!(skip.frames, vec![vec![1.0], vec![3.0], vec![5.0]]);
    }

    #[test]
    fn raster_shape() {
        let g = rasterize(&[0.1, 3.0, 2.9], 3.0, 16);
        assert_eq!(g.len(), 16);
        assert_eq!(g[15][0], 1);
        assert!(g.iter().all(|row| row[1] == 0));
        assert_eq!(g[0][2], 1);
    }
}
