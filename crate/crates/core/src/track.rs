//! Closed test track: a dense centerline polyline with constant width.
//!
//! The track answers the geometric questions the rest of the simulator asks:
//! where a point sits in arc-length coordinates, how far it is from the
//! centerline, whether it touches a wall (and which one), and how far the
//! vehicle progressed between two queries.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::{
    project_on_segment, ray_segment_hit, segments_intersect, wrap_angle, Aabb, Vec2,
};
use crate::vehicle::VehicleParams;

pub const DEFAULT_TRACK_LENGTH: f64 = 17.0;
pub const DEFAULT_TRACK_WIDTH: f64 = 0.75;
/// Upper bound on centerline vertex spacing.
pub const MAX_VERTEX_SPACING: f64 = 0.05;
/// Curvature (1/m) above which a centerline stretch counts as a turn.
pub const TURN_CURVATURE_THRESHOLD: f64 = 0.5;
/// A wall contact this close (in arc length) to a turn is attributed to it.
pub const TURN_ADJACENCY: f64 = 0.6;

const CLOSURE_TOLERANCE: f64 = 1e-9;
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnDirection {
    Left,
    Right,
}

impl TurnDirection {
    /// Sign of the lateral offset that points toward the turn center.
    pub fn inner_sign(self) -> f64 {
        match self {
            TurnDirection::Left => 1.0,
            TurnDirection::Right => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TurnDirection::Left => "left",
            TurnDirection::Right => "right",
        }
    }
}

/// A labeled curved stretch of the track. `end_s < start_s` means the turn wraps past s = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnSegment {
    pub start_s: f64,
    pub end_s: f64,
    pub direction: TurnDirection,
}

impl TurnSegment {
    pub fn contains(&self, s: f64) -> bool {
        if self.start_s <= self.end_s {
            s >= self.start_s && s <= self.end_s
        } else {
            s >= self.start_s || s <= self.end_s
        }
    }

    /// Arc-length gap from `s` to this segment on a loop of length `total` (0 when inside).
    pub fn gap(&self, s: f64, total: f64) -> f64 {
        if self.contains(s) {
            return 0.0;
        }
        let fwd = (self.start_s - s).rem_euclid(total);
        let back = (s - self.end_s).rem_euclid(total);
        fwd.min(back)
    }

    pub fn length(&self, total: f64) -> f64 {
        (self.end_s - self.start_s).rem_euclid(total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackQueryResult {
    /// Arc-length coordinate in [0, total_length).
    pub s: f64,
    /// Signed distance from the centerline, positive to the left.
    pub lateral_offset: f64,
    pub heading_of_centerline: f64,
    pub segment: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// Which wall of a turn was touched. `Straight` means no turn nearby; only the side is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WallClass {
    Inside,
    Outside,
    Straight,
}

impl WallClass {
    pub fn as_str(self) -> &'static str {
        match self {
            WallClass::Inside => "inside",
            WallClass::Outside => "outside",
            WallClass::Straight => "straight",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionInfo {
    pub hit: bool,
    pub side: Side,
    pub wall: WallClass,
    pub turn: Option<TurnDirection>,
    pub query: TrackQueryResult,
}

#[derive(Debug, Clone)]
struct Chunk {
    first: usize,
    last: usize,
    bbox: Aabb,
}

#[derive(Debug, Clone)]
pub struct Track {
    centerline: Vec<Vec2>,
    half_width: f64,
    arc_length: Vec<f64>,
    turns: Vec<TurnSegment>,
    walls: [Vec<Vec2>; 2],
    center_chunks: Vec<Chunk>,
    wall_chunks: [Vec<Chunk>; 2],
}

impl Track {
    /// Builds a track from a centerline. The polyline is closed if the last point
    /// does not already repeat the first.
    pub fn from_centerline(points: Vec<Vec2>, half_width: f64) -> Result<Self> {
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::input(format!(
                "half_width must be positive, got {half_width}"
            )));
        }
        let mut pts = points;
        if pts.iter().any(|p| !p.is_finite()) {
            return Err(Error::input("centerline contains non-finite coordinates"));
        }
        if pts.len() >= 2 && pts[0].distance(*pts.last().unwrap()) <= CLOSURE_TOLERANCE {
            pts.pop();
        }
        if pts.len() < 3 {
            return Err(Error::input("centerline needs at least 3 distinct points"));
        }
        let first = pts[0];
        pts.push(first);

        let mut arc_length = Vec::with_capacity(pts.len());
        arc_length.push(0.0);
        for w in pts.windows(2) {
            let len = w[0].distance(w[1]);
            if len <= 0.0 {
                return Err(Error::input("centerline has repeated consecutive points"));
            }
            arc_length.push(arc_length.last().unwrap() + len);
        }
        if self_intersects(&pts) {
            return Err(Error::input("centerline self-intersects"));
        }

        let walls = [
            offset_polyline(&pts, half_width),
            offset_polyline(&pts, -half_width),
        ];
        let center_chunks = chunks(&pts);
        let wall_chunks = [chunks(&walls[0]), chunks(&walls[1])];
        let mut track = Track {
            centerline: pts,
            half_width,
            arc_length,
            turns: Vec::new(),
            walls,
            center_chunks,
            wall_chunks,
        };
        track.turns = track.label_turns();
        Ok(track)
    }

    pub fn centerline(&self) -> &[Vec2] {
        &self.centerline
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn width(&self) -> f64 {
        2.0 * self.half_width
    }

    pub fn total_length(&self) -> f64 {
        *self.arc_length.last().unwrap()
    }

    pub fn arc_length_table(&self) -> &[f64] {
        &self.arc_length
    }

    pub fn turns(&self) -> &[TurnSegment] {
        &self.turns
    }

    pub fn left_wall(&self) -> &[Vec2] {
        &self.walls[0]
    }

    pub fn right_wall(&self) -> &[Vec2] {
        &self.walls[1]
    }

    pub fn count_turns(&self, direction: TurnDirection) -> usize {
        self.turns
            .iter()
            .filter(|t| t.direction == direction)
            .count()
    }

    /// Projects `p` onto the nearest centerline segment.
    pub fn locate(&self, p: Vec2) -> TrackQueryResult {
        let mut best = f64::INFINITY;
        let mut best_seg = 0;
        let mut best_t = 0.0;
        for chunk in &self.center_chunks {
            if chunk.bbox.distance_sq_to(p) >= best {
                continue;
            }
            for i in chunk.first..chunk.last {
                let (a, b) = (self.centerline[i], self.centerline[i + 1]);
                let t = project_on_segment(p, a, b);
                let q = a + (b - a) * t;
                let d = (p - q).norm_sq();
                if d < best {
                    best = d;
                    best_seg = i;
                    best_t = t;
                }
            }
        }
        self.query_on_segment(p, best_seg, best_t)
    }

    fn query_on_segment(&self, p: Vec2, seg: usize, t: f64) -> TrackQueryResult {
        let a = self.centerline[seg];
        let b = self.centerline[seg + 1];
        let dir = (b - a).normalized();
        let q = a + (b - a) * t;
        let dist = p.distance(q);
        let side = dir.cross(p - q);
        let lateral_offset = if dist == 0.0 {
            0.0
        } else {
            dist.copysign(side)
        };
        let seg_len = self.arc_length[seg + 1] - self.arc_length[seg];
        let mut s = self.arc_length[seg] + t * seg_len;
        if s >= self.total_length() {
            s -= self.total_length();
        }
        TrackQueryResult {
            s,
            lateral_offset,
            heading_of_centerline: dir.angle(),
            segment: seg,
        }
    }

    /// Centerline point and heading at arc coordinate `s` (wrapped onto the loop).
    pub fn point_at(&self, s: f64) -> (Vec2, f64) {
        let total = self.total_length();
        let s = s.rem_euclid(total);
        let seg = match self
            .arc_length
            .binary_search_by(|v| v.partial_cmp(&s).unwrap())
        {
            Ok(i) => i.min(self.centerline.len() - 2),
            Err(i) => i - 1,
        };
        let a = self.centerline[seg];
        let b = self.centerline[seg + 1];
        let len = self.arc_length[seg + 1] - self.arc_length[seg];
        let t = (s - self.arc_length[seg]) / len;
        (a + (b - a) * t, (b - a).angle())
    }

    /// The turn enclosing `s`, or the nearest one within [`TURN_ADJACENCY`].
    pub fn turn_near(&self, s: f64) -> Option<&TurnSegment> {
        let total = self.total_length();
        self.turns
            .iter()
            .map(|t| (t.gap(s, total), t))
            .filter(|(g, _)| *g <= TURN_ADJACENCY)
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
            .map(|(_, t)| t)
    }

    pub fn turn_at(&self, s: f64) -> Option<&TurnSegment> {
        self.turns.iter().find(|t| t.contains(s))
    }

    /// Wall contact test for a point (the vehicle is a point here).
    pub fn collides(&self, p: Vec2) -> CollisionInfo {
        self.collides_with_margin(p, 0.0)
    }

    /// Wall contact test for a body of half-width `margin` centered at `p`.
    pub fn collides_with_margin(&self, p: Vec2, margin: f64) -> CollisionInfo {
        let query = self.locate(p);
        self.classify(query, margin)
    }

    pub(crate) fn classify(&self, query: TrackQueryResult, margin: f64) -> CollisionInfo {
        let hit = query.lateral_offset.abs() >= self.half_width - margin;
        let side = if query.lateral_offset >= 0.0 {
            Side::Left
        } else {
            Side::Right
        };
        let turn = self.turn_near(query.s).map(|t| t.direction);
        let wall = match turn {
            Some(dir) => {
                if query.lateral_offset * dir.inner_sign() > 0.0 {
                    WallClass::Inside
                } else {
                    WallClass::Outside
                }
            }
            None => WallClass::Straight,
        };
        CollisionInfo {
            hit,
            side,
            wall,
            turn,
            query,
        }
    }

    /// Forward progress between two arc coordinates, wrapping at the start line.
    pub fn lap_progress(&self, prev_s: f64, new_s: f64) -> (f64, bool) {
        lap_progress(self.total_length(), prev_s, new_s)
    }

    /// Distance along a ray to the nearest wall, or `max_range` when nothing is hit.
    pub fn cast_ray(&self, origin: Vec2, dir: Vec2, max_range: f64) -> f64 {
        let mut best = max_range;
        for (wall, chunks) in self.walls.iter().zip(&self.wall_chunks) {
            for chunk in chunks {
                if !chunk.bbox.hit_by_ray(origin, dir, best) {
                    continue;
                }
                for i in chunk.first..chunk.last {
                    if let Some(t) = ray_segment_hit(origin, dir, wall[i], wall[i + 1]) {
                        if t < best {
                            best = t;
                        }
                    }
                }
            }
        }
        best
    }

    /// Canonical text serialization (see [`Track::from_text`]).
    pub fn to_text(&self) -> String {
        let mut out = String::from("trackfmt v1\n");
        let _ = writeln!(out, "width {}", sig9(self.width()));
        for p in &self.centerline[..self.centerline.len() - 1] {
            let _ = writeln!(out, "{} {}", sig9(p.x), sig9(p.y));
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.to_string(),
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, "trackfmt v1")) => {}
            Some((n, _)) => return Err(perr(n, "expected header `trackfmt v1`")),
            None => return Err(perr(1, "empty track file")),
        }
        let width = match lines.next() {
            Some((n, l)) => {
                let mut it = l.split_whitespace();
                match (it.next(), it.next().map(str::parse::<f64>), it.next()) {
                    (Some("width"), Some(Ok(w)), None) => w,
                    _ => return Err(perr(n, "expected `width <meters>`")),
                }
            }
            None => return Err(perr(2, "missing width line")),
        };
        let mut points = Vec::new();
        for (n, l) in lines {
            let mut it = l.split_whitespace();
            match (
                it.next().map(str::parse::<f64>),
                it.next().map(str::parse::<f64>),
                it.next(),
            ) {
                (Some(Ok(x)), Some(Ok(y)), None) => points.push(Vec2::new(x, y)),
                _ => return Err(perr(n, "expected `x y`")),
            }
        }
        Track::from_centerline(points, width / 2.0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Track::from_text(&text, path)
    }

    /// Content hash of the canonical text form.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    fn label_turns(&self) -> Vec<TurnSegment> {
        let n = self.centerline.len() - 1; // distinct vertices
        let total = self.total_length();
        let seg_len = |i: usize| self.arc_length[i + 1] - self.arc_length[i];
        // Signed curvature at each distinct vertex.
        let kappa: Vec<f64> = (0..n)
            .map(|i| {
                let prev = (i + n - 1) % n;
                let d_in = self.centerline[prev + 1] - self.centerline[prev];
                let d_out = self.centerline[i + 1] - self.centerline[i];
                let turn = wrap_angle(d_out.angle() - d_in.angle());
                turn / (0.5 * (seg_len(prev) + seg_len(i)))
            })
            .collect();
        let sign_at = |i: usize| {
            if kappa[i] > TURN_CURVATURE_THRESHOLD {
                1
            } else if kappa[i] < -TURN_CURVATURE_THRESHOLD {
                -1
            } else {
                0
            }
        };
        // Start the scan at a vertex that is not inside a turn so runs never wrap mid-scan.
        let Some(start) = (0..n).find(|&i| sign_at(i) == 0) else {
            return Vec::new();
        };
        let mut runs: Vec<(usize, usize, i32)> = Vec::new(); // (first, len, sign)
        let mut k = 0;
        while k < n {
            let i = (start + k) % n;
            let sg = sign_at(i);
            if sg == 0 {
                k += 1;
                continue;
            }
            let mut len = 1;
            while k + len < n && sign_at((start + k + len) % n) == sg {
                len += 1;
            }
            runs.push((i, len, sg));
            k += len;
        }
        runs.into_iter()
            .filter_map(|(first, len, sg)| {
                let last = (first + len - 1) % n;
                let sweep: f64 = (0..len)
                    .map(|j| {
                        let i = (first + j) % n;
                        kappa[i].abs() * 0.5 * (seg_len((i + n - 1) % n) + seg_len(i))
                    })
                    .sum();
                // Ignore numerical ripples that never amount to a real turn.
                (sweep >= 10f64.to_radians()).then(|| TurnSegment {
                    start_s: self.arc_length[first],
                    end_s: self.arc_length[last].min(total - 1e-12),
                    direction: if sg > 0 {
                        TurnDirection::Left
                    } else {
                        TurnDirection::Right
                    },
                })
            })
            .collect()
    }
}

/// Wraparound-aware progress on a loop of length `total`.
pub fn lap_progress(total: f64, prev_s: f64, new_s: f64) -> (f64, bool) {
    let mut delta = new_s - prev_s;
    let mut lap = false;
    if delta < -0.5 * total {
        delta += total;
        lap = true;
    } else if delta > 0.5 * total {
        delta -= total;
    }
    (delta, lap)
}

/// Shortest decimal that survives a 9-significant-digit rounding.
fn sig9(x: f64) -> String {
    let rounded: f64 = format!("{x:.8e}").parse().unwrap_or(x);
    format!("{rounded}")
}

fn chunks(points: &[Vec2]) -> Vec<Chunk> {
    let segs = points.len() - 1;
    (0..segs)
        .step_by(CHUNK)
        .map(|first| {
            let last = (first + CHUNK).min(segs);
            Chunk {
                first,
                last,
                bbox: Aabb::from_points(&points[first..=last]),
            }
        })
        .collect()
}

/// Offsets a closed polyline by `d` along its (mitered) left normals.
fn offset_polyline(points: &[Vec2], d: f64) -> Vec<Vec2> {
    let n = points.len() - 1;
    let mut out: Vec<Vec2> = (0..n)
        .map(|i| {
            let prev = (i + n - 1) % n;
            let n_in = (points[prev + 1] - points[prev]).normalized().perp();
            let n_out = (points[i + 1] - points[i]).normalized().perp();
            let bis = (n_in + n_out).normalized();
            let cos_half = bis.dot(n_out).max(0.2);
            points[i] + bis * (d / cos_half)
        })
        .collect();
    out.push(out[0]);
    out
}

fn self_intersects(pts: &[Vec2]) -> bool {
    let segs = pts.len() - 1;
    for i in 0..segs {
        for j in (i + 2)..segs {
            if i == 0 && j == segs - 1 {
                continue; // adjacent through the closing vertex
            }
            if segments_intersect(pts[i], pts[i + 1], pts[j], pts[j + 1]) {
                return true;
            }
        }
    }
    false
}

/// Shape parameters for the generated default track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackGenParams {
    pub length: f64,
    pub width: f64,
    /// Smallest centerline radius any turn may have.
    pub min_radius: f64,
    pub min_straight: f64,
    /// Range the turn radii are drawn from, before scaling to `length`.
    pub turn_radius: (f64, f64),
    pub max_attempts: usize,
}

impl Default for TrackGenParams {
    fn default() -> Self {
        Self {
            length: DEFAULT_TRACK_LENGTH,
            width: DEFAULT_TRACK_WIDTH,
            min_radius: VehicleParams::default().min_turning_radius() * 1.15,
            min_straight: 0.3,
            turn_radius: (0.72, 0.95),
            max_attempts: 200,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Piece {
    Straight(f64),
    /// Signed sweep: positive turns left.
    Arc {
        radius: f64,
        sweep: f64,
    },
}

impl Piece {
    fn length(self) -> f64 {
        match self {
            Piece::Straight(l) => l,
            Piece::Arc { radius, sweep } => radius * sweep.abs(),
        }
    }

    fn scaled(self, k: f64) -> Piece {
        match self {
            Piece::Straight(l) => Piece::Straight(l * k),
            Piece::Arc { radius, sweep } => Piece::Arc {
                radius: radius * k,
                sweep,
            },
        }
    }
}

/// Net displacement and heading change of a piece sequence starting at heading 0.
fn walk(pieces: &[Piece]) -> Vec2 {
    let mut pos = Vec2::ZERO;
    let mut heading: f64 = 0.0;
    for p in pieces {
        match *p {
            Piece::Straight(l) => pos = pos + Vec2::from_angle(heading) * l,
            Piece::Arc { radius, sweep } => {
                let center = pos + Vec2::from_angle(heading).perp() * (radius * sweep.signum());
                let end_heading = heading + sweep;
                pos = center - Vec2::from_angle(end_heading).perp() * (radius * sweep.signum());
                heading = end_heading;
            }
        }
    }
    pos
}

fn densify(pieces: &[Piece]) -> Vec<Vec2> {
    let mut pts = vec![Vec2::ZERO];
    let mut pos = Vec2::ZERO;
    let mut heading: f64 = 0.0;
    let spacing = 0.8 * MAX_VERTEX_SPACING;
    for p in pieces {
        let n = (p.length() / spacing).ceil().max(1.0) as usize;
        match *p {
            Piece::Straight(l) => {
                let dir = Vec2::from_angle(heading);
                for k in 1..=n {
                    pts.push(pos + dir * (l * k as f64 / n as f64));
                }
                pos = pos + dir * l;
            }
            Piece::Arc { radius, sweep } => {
                let sg = sweep.signum();
                let center = pos + Vec2::from_angle(heading).perp() * (radius * sg);
                for k in 1..=n {
                    let h = heading + sweep * k as f64 / n as f64;
                    pts.push(center - Vec2::from_angle(h).perp() * (radius * sg));
                }
                heading += sweep;
                pos = *pts.last().unwrap();
            }
        }
    }
    pts
}

/// Generates the default closed track: a counterclockwise loop with five left
/// turns and one right turn (the right turn sits in an S-bend on the back straight).
pub fn generate_default_track(seed: u64) -> Result<Track> {
    generate_track(seed, &TrackGenParams::default())
}

pub fn generate_track(seed: u64, params: &TrackGenParams) -> Result<Track> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6163_6b00_0000);
    let mut last_reason = String::from("no attempts");
    for _ in 0..params.max_attempts {
        let (r_lo, r_hi) = params.turn_radius;
        let r: Vec<f64> = (0..6).map(|_| rng.random_range(r_lo..r_hi)).collect();
        let s_sweep = rng.random_range(50f64..70.0).to_radians();
        let b = rng.random_range(2.0..2.6);
        let c1 = rng.random_range(1.0..1.6);
        let c2 = rng.random_range(0.35..0.6);
        let c3 = rng.random_range(1.0..1.6);
        let arc = |radius: f64, sweep: f64| Piece::Arc { radius, sweep };
        // Free straights: `a` (split across the start line) and `d` close the loop.
        let body = |a: f64, d: f64| {
            vec![
                Piece::Straight(a / 2.0),
                arc(r[0], FRAC_PI_2),
                Piece::Straight(b),
                arc(r[1], FRAC_PI_2),
                Piece::Straight(c1),
                arc(r[2], s_sweep),
                Piece::Straight(c2),
                arc(r[3], -s_sweep),
                Piece::Straight(c3),
                arc(r[4], FRAC_PI_2),
                Piece::Straight(d),
                arc(r[5], FRAC_PI_2),
                Piece::Straight(a / 2.0),
            ]
        };
        let gap = walk(&body(0.0, 0.0));
        // `a` runs along +x, `d` along -y.
        let a = -gap.x;
        let d = gap.y;
        if a < params.min_straight || d < params.min_straight {
            last_reason = format!("closure straights too short (a={a:.3}, d={d:.3})");
            continue;
        }
        let pieces = body(a, d);
        let raw_len: f64 = pieces.iter().map(|p| p.length()).sum();
        let k = params.length / raw_len;
        let pieces: Vec<Piece> = pieces.iter().map(|p| p.scaled(k)).collect();
        let min_r = pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Arc { radius, .. } => Some(*radius),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min);
        if min_r < params.min_radius {
            last_reason = format!("turn radius {min_r:.3} below {:.3}", params.min_radius);
            continue;
        }
        if min_r <= params.width / 2.0 {
            last_reason = "turn radius inside the track half-width".into();
            continue;
        }
        let short = pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Straight(l) => Some(*l),
                _ => None,
            })
            .any(|l| l < 0.5 * params.min_straight);
        if short {
            last_reason = "a straight collapsed after scaling".into();
            continue;
        }
        let mut pts = densify(&pieces);
        // The final point should land on the origin; snap the residual rounding error.
        let closing = pts.pop().unwrap();
        if closing.norm() > 1e-6 {
            last_reason = format!("loop failed to close ({:.2e} m)", closing.norm());
            continue;
        }
        let track = match Track::from_centerline(pts, params.width / 2.0) {
            Ok(t) => t,
            Err(e) => {
                last_reason = e.to_string();
                continue;
            }
        };
        if track.count_turns(TurnDirection::Left) != 5
            || track.count_turns(TurnDirection::Right) != 1
        {
            last_reason = "turn labeling disagrees with construction".into();
            continue;
        }
        return Ok(track);
    }
    Err(Error::TrackGeneration {
        attempts: params.max_attempts,
        reason: last_reason,
    })
}

/// A straight-sided rounded loop useful for tests: two straights of `straight` m joined by
/// half circles of `radius`.
pub fn stadium(straight: f64, radius: f64, half_width: f64) -> Result<Track> {
    let pieces = [
        Piece::Straight(straight),
        Piece::Arc { radius, sweep: PI },
        Piece::Straight(straight),
        Piece::Arc { radius, sweep: PI },
    ];
    let mut pts = densify(&pieces);
    pts.pop();
    Track::from_centerline(pts, half_width)
}

/// Counterclockwise circle, mostly for analytic checks.
pub fn circle(radius: f64, half_width: f64) -> Result<Track> {
    let n = ((TAU * radius) / (0.8 * MAX_VERTEX_SPACING)).ceil() as usize;
    let pts = (0..n)
        .map(|k| {
            let a = TAU * k as f64 / n as f64 - FRAC_PI_2;
            Vec2::new(radius * a.cos(), radius * a.sin() + radius)
        })
        .collect();
    Track::from_centerline(pts, half_width)
}
