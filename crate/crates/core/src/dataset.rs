//! Recordings, cleaning, label shifting, fold assignment and on-disk format.
//!
//! A recording directory holds `manifest.json` and `samples.jsonl` (one sample
//! per line). Floats are written in shortest round-trip form so a save/load
//! cycle is bit-exact.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::expert::ExpertParams;

/// Label shifts must be whole capture periods at this spacing.
pub const SHIFT_STEP_MS: i64 = 50;
/// Shifts evaluated in the delay study.
pub const PAPER_SHIFTS_MS: [i64; 7] = [-100, -50, 0, 50, 100, 150, 200];
const MIN_PER_FOLD: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub frame: Vec<f64>,
    /// Normalized steering in [-1, 1].
    pub steer: f64,
    pub speed: f64,
    pub lap: u32,
    pub s: f64,
    pub infraction_window: bool,
    pub perturb_mask: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub capture_hz: f64,
    pub ray_count: usize,
    pub fov: f64,
    pub max_range: f64,
    pub track_hash: String,
    pub expert_params: ExpertParams,
    pub speed_setpoint: f64,
    pub seed: u64,
    pub sample_count: usize,
    pub removed_count: usize,
    /// Why collection ended early, if it did.
    pub truncated: Option<String>,
    /// Lap times (s) of laps driven without an infraction.
    pub clean_lap_times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Recording {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn period(&self) -> f64 {
        1.0 / self.manifest.capture_hz
    }

    /// Capture index of each sample (time in periods).
    pub fn capture_index(&self, i: usize) -> i64 {
        (self.samples[i].t * self.manifest.capture_hz).round() as i64
    }

    /// Contiguity label per sample: consecutive samples share a label unless a gap separates them.
    pub fn segment_ids(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.samples.len());
        let mut seg = 0;
        for i in 0..self.samples.len() {
            if i > 0 && self.capture_index(i) != self.capture_index(i - 1) + 1 {
                seg += 1;
            }
            ids.push(seg);
        }
        ids
    }

    /// SHA-256 over the serialized samples.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update(serde_json::to_vec(s).expect("sample serializes"));
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        let hz = self.manifest.capture_hz;
        for (i, s) in self.samples.iter().enumerate() {
            if s.frame.len() != self.manifest.ray_count {
                return Err(Error::Integrity(format!(
                    "sample {i} has {} rays, manifest says {}",
                    s.frame.len(),
                    self.manifest.ray_count
                )));
            }
            if s.steer.abs() > 1.0 || !s.steer.is_finite() || s.speed < 0.0 {
                return Err(Error::Integrity(format!(
                    "sample {i} has out-of-range steer/speed"
                )));
            }
            let k = s.t * hz;
            if (k - k.round()).abs() > 1e-6 {
                return Err(Error::Integrity(format!(
                    "sample {i} time {} is off the {hz} Hz grid",
                    s.t
                )));
            }
            if i > 0 && self.capture_index(i) <= self.capture_index(i - 1) {
                return Err(Error::Integrity(format!(
                    "sample {i} time is not increasing"
                )));
            }
        }
        Ok(())
    }

    /// Writes `manifest.json` and `samples.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = self.manifest.clone();
        manifest.sample_count = self.samples.len();
        let mpath = dir.join("manifest.json");
        fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&mpath, e))?;
        let spath = dir.join("samples.jsonl");
        let mut buf = Vec::with_capacity(self.samples.len() * 400);
        for s in &self.samples {
            serde_json::to_writer(&mut buf, s)?;
            buf.push(b'\n');
        }
        write_atomic(&spath, &buf)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let mtext = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&mtext).map_err(|e| Error::Parse {
            path: mpath.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let spath = dir.join("samples.jsonl");
        let samples: Vec<Sample> = read_jsonl(&spath, manifest.sample_count)?;
        let rec = Recording { manifest, samples };
        rec.validate()?;
        Ok(rec)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, expected: usize) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::with_capacity(expected);
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(v);
    }
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: text.lines().count(),
            msg: "file ends mid-record".into(),
        });
    }
    if out.len() != expected {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: out.len() + 1,
            msg: format!(
                "unexpected end of data: expected {expected} records, found {}",
                out.len()
            ),
        });
    }
    Ok(out)
}

/// Drops every sample from `before` seconds ahead of an infraction until `after`
/// seconds past it, then renumbers laps densely.
pub fn clean(recording: &Recording, before: f64, after: f64) -> Recording {
    let marks: Vec<f64> = recording
        .samples
        .iter()
        .filter(|s| s.infraction_window)
        .map(|s| s.t)
        .collect();
    let eps = 1e-9;
    let kept: Vec<Sample> = recording
        .samples
        .iter()
        .filter(|s| {
            !marks
                .iter()
                .any(|&m| s.t >= m - before - eps && s.t <= m + after + eps)
        })
        .cloned()
        .collect();
    let mut samples = kept;
    let mut next_lap = 0u32;
    let mut last_src: Option<u32> = None;
    for s in &mut samples {
        if let Some(prev) = last_src {
            if s.lap != prev {
                next_lap += 1;
            }
        }
        last_src = Some(s.lap);
        s.lap = next_lap;
    }
    let removed = recording.samples.len() - samples.len();
    let mut manifest = recording.manifest.clone();
    manifest.removed_count += removed;
    manifest.sample_count = samples.len();
    Recording { manifest, samples }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_hash: String,
    pub shift_ms: i64,
    pub stack_size: usize,
    pub stride: usize,
    pub dropped: usize,
}

/// (observation, label) pairs built from a recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftedDataset {
    /// Flattened observations, oldest frame first.
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    /// Recording indices of the frames of each pair, oldest first.
    pub frame_indices: Vec<Vec<usize>>,
    pub label_indices: Vec<usize>,
    /// Time of the newest frame and of the label, per pair.
    pub frame_times: Vec<f64>,
    pub label_times: Vec<f64>,
    pub shift_ms: i64,
    pub stack_size: usize,
    pub provenance: Provenance,
}

impl ShiftedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    /// Sub-dataset with the given pair indices (order kept).
    pub fn subset(&self, idx: &[usize]) -> ShiftedDataset {
        ShiftedDataset {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            frame_indices: idx.iter().map(|&i| self.frame_indices[i].clone()).collect(),
            label_indices: idx.iter().map(|&i| self.label_indices[i]).collect(),
            frame_times: idx.iter().map(|&i| self.frame_times[i]).collect(),
            label_times: idx.iter().map(|&i| self.label_times[i]).collect(),
            shift_ms: self.shift_ms,
            stack_size: self.stack_size,
            provenance: self.provenance.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        #[derive(Serialize)]
        struct Header<'a> {
            pairs: usize,
            shift_ms: i64,
            stack_size: usize,
            provenance: &'a Provenance,
        }
        let mpath = dir.join("manifest.json");
        let header = Header {
            pairs: self.len(),
            shift_ms: self.shift_ms,
            stack_size: self.stack_size,
            provenance: &self.provenance,
        };
        fs::write(&mpath, serde_json::to_string_pretty(&header)?)
            .map_err(|e| Error::io(&mpath, e))?;
        let mut buf = Vec::new();
        for i in 0..self.len() {
            serde_json::to_writer(
                &mut buf,
                &PairRecord {
                    frames: self.frame_indices[i].clone(),
                    label_index: self.label_indices[i],
                    t: self.frame_times[i],
                    label_t: self.label_times[i],
                    input: self.inputs[i].clone(),
                    label: self.labels[i],
                },
            )?;
            buf.push(b'\n');
        }
        write_atomic(&dir.join("pairs.jsonl"), &buf)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            pairs: usize,
            shift_ms: i64,
            stack_size: usize,
            provenance: Provenance,
        }
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let h: Header = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: mpath.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let pairs: Vec<PairRecord> = read_jsonl(&dir.join("pairs.jsonl"), h.pairs)?;
        let mut ds = ShiftedDataset {
            inputs: Vec::with_capacity(pairs.len()),
            labels: Vec::with_capacity(pairs.len()),
            frame_indices: Vec::with_capacity(pairs.len()),
            label_indices: Vec::with_capacity(pairs.len()),
            frame_times: Vec::with_capacity(pairs.len()),
            label_times: Vec::with_capacity(pairs.len()),
            shift_ms: h.shift_ms,
            stack_size: h.stack_size,
            provenance: h.provenance,
        };
        for p in pairs {
            ds.inputs.push(p.input);
            ds.labels.push(p.label);
            ds.frame_indices.push(p.frames);
            ds.label_indices.push(p.label_index);
            ds.frame_times.push(p.t);
            ds.label_times.push(p.label_t);
        }
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    frames: Vec<usize>,
    label_index: usize,
    t: f64,
    label_t: f64,
    input: Vec<f64>,
    label: f64,
}

/// Converts a millisecond shift to whole capture periods.
pub fn shift_steps(shift_ms: i64, capture_hz: f64) -> Result<i64> {
    let steps = shift_ms as f64 * capture_hz / 1000.0;
    if shift_ms % SHIFT_STEP_MS != 0 || (steps - steps.round()).abs() > 1e-9 {
        return Err(Error::input(format!(
            "label shift {shift_ms} ms is not a whole number of {:.0} ms capture periods",
            1000.0 / capture_hz
        )));
    }
    Ok(steps.round() as i64)
}

/// Single-frame pairs with labels taken `shift_ms` after each frame.
pub fn shift_labels(recording: &Recording, shift_ms: i64) -> Result<ShiftedDataset> {
    build_pairs(recording, shift_ms, 1, 1)
}

/// Pairs whose observation is `stack_size` frames spaced `stride` captures apart,
/// labeled with the command recorded `shift_ms` after the newest frame. Pairs that
/// would reach outside the recording or across a gap are dropped.
pub fn build_pairs(
    recording: &Recording,
    shift_ms: i64,
    stack_size: usize,
    stride: usize,
) -> Result<ShiftedDataset> {
    if stack_size == 0 || stride == 0 {
        return Err(Error::input("stack_size and stride must be positive"));
    }
    let k = shift_steps(shift_ms, recording.manifest.capture_hz)?;
    let seg = recording.segment_ids();
    let n = recording.len() as i64;
    let span = ((stack_size - 1) * stride) as i64;
    let mut ds = ShiftedDataset {
        inputs: Vec::new(),
        labels: Vec::new(),
        frame_indices: Vec::new(),
        label_indices: Vec::new(),
        frame_times: Vec::new(),
        label_times: Vec::new(),
        shift_ms,
        stack_size,
        provenance: Provenance {
            source_hash: recording.content_hash(),
            shift_ms,
            stack_size,
            stride,
            dropped: 0,
        },
    };
    let mut dropped = 0;
    for i in 0..n {
        let first = i - span;
        let j = i + k;
        let ok = first >= 0
            && j >= 0
            && j < n
            && seg[first as usize] == seg[i as usize]
            && seg[j as usize] == seg[i as usize];
        if !ok {
            dropped += 1;
            continue;
        }
        let frames: Vec<usize> = (0..stack_size)
            .map(|m| (first as usize) + m * stride)
            .collect();
        let mut input = Vec::with_capacity(stack_size * recording.manifest.ray_count);
        for &f in &frames {
            input.extend_from_slice(&recording.samples[f].frame);
        }
        let label_sample = &recording.samples[j as usize];
        ds.inputs.push(input);
        ds.labels.push(label_sample.steer);
        ds.frame_indices.push(frames);
        ds.label_indices.push(j as usize);
        ds.frame_times.push(recording.samples[i as usize].t);
        ds.label_times.push(label_sample.t);
    }
    ds.provenance.dropped = dropped;
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitScheme {
    Block,
    Period,
    Random,
}

/// Fold membership per pair; `None` marks pairs excluded from every fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub scheme: SplitScheme,
    pub folds: usize,
    pub periods: usize,
    pub fold_of: Vec<Option<usize>>,
}

impl FoldAssignment {
    pub fn validation(&self, fold: usize) -> Vec<usize> {
        self.fold_of
            .iter()
            .enumerate()
            .filter(|(_, f)| **f == Some(fold))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn training(&self, fold: usize) -> Vec<usize> {
        self.fold_of
            .iter()
            .enumerate()
            .filter(|(_, f)| matches!(f, Some(g) if *g != fold))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn retained(&self) -> Vec<usize> {
        self.fold_of
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_some())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn dropped(&self) -> usize {
        self.fold_of.iter().filter(|f| f.is_none()).count()
    }
}

/// Splits `n` into `parts` contiguous sizes, larger pieces first.
fn contiguous_sizes(n: usize, parts: usize) -> Vec<usize> {
    let base = n / parts;
    let rem = n % parts;
    (0..parts).map(|k| base + usize::from(k < rem)).collect()
}

/// Contiguous temporal blocks, one per fold.
pub fn split_block(n: usize, folds: usize) -> Result<FoldAssignment> {
    if folds < 2 {
        return Err(Error::input("need at least 2 folds"));
    }
    if n < folds * MIN_PER_FOLD {
        return Err(Error::input(format!(
            "{n} samples cannot fill {folds} folds of at least {MIN_PER_FOLD}"
        )));
    }
    let mut fold_of = Vec::with_capacity(n);
    for (k, size) in contiguous_sizes(n, folds).into_iter().enumerate() {
        fold_of.extend(std::iter::repeat_n(Some(k), size));
    }
    Ok(FoldAssignment {
        scheme: SplitScheme::Block,
        folds,
        periods: 1,
        fold_of,
    })
}

/// Cuts the pairs into `periods` contiguous periods and each period into `folds`
/// contiguous slices (slice k goes to fold k). Pairs that reuse a frame owned by
/// another fold are dropped, so no frame is shared between folds.
pub fn split_period(ds: &ShiftedDataset, folds: usize, periods: usize) -> Result<FoldAssignment> {
    if folds < 2 {
        return Err(Error::input("need at least 2 folds"));
    }
    if periods < folds {
        return Err(Error::input(format!(
            "periods ({periods}) must be at least folds ({folds})"
        )));
    }
    let n = ds.len();
    if n < folds * periods * MIN_PER_FOLD {
        return Err(Error::input(format!(
            "{n} samples cannot fill {periods} periods x {folds} folds"
        )));
    }
    let mut fold_of: Vec<Option<usize>> = Vec::with_capacity(n);
    for period in contiguous_sizes(n, periods) {
        for (k, size) in contiguous_sizes(period, folds).into_iter().enumerate() {
            fold_of.extend(std::iter::repeat_n(Some(k), size));
        }
    }
    exclude_shared_frames(ds, &mut fold_of);
    Ok(FoldAssignment {
        scheme: SplitScheme::Period,
        folds,
        periods,
        fold_of,
    })
}

/// Uniform random fold per pair (the 80/20 split uses fold 0 as validation).
pub fn split_random(ds: &ShiftedDataset, folds: usize, seed: u64) -> Result<FoldAssignment> {
    if folds < 2 || ds.len() < folds * MIN_PER_FOLD {
        return Err(Error::input("not enough samples for a random split"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![None; ds.len()];
    for (rank, &i) in order.iter().enumerate() {
        fold_of[i] = Some(rank % folds);
    }
    exclude_shared_frames(ds, &mut fold_of);
    Ok(FoldAssignment {
        scheme: SplitScheme::Random,
        folds,
        periods: 1,
        fold_of,
    })
}

/// Each frame belongs to the fold of the first pair that uses it; pairs using a frame
/// owned by a different fold are excluded.
fn exclude_shared_frames(ds: &ShiftedDataset, fold_of: &mut [Option<usize>]) {
    let max_frame = ds
        .frame_indices
        .iter()
        .flatten()
        .copied()
        .max()
        .unwrap_or(0);
    let mut owner: Vec<Option<usize>> = vec![None; max_frame + 1];
    for (p, frames) in ds.frame_indices.iter().enumerate() {
        for &f in frames {
            if owner[f].is_none() {
                owner[f] = fold_of[p];
            }
        }
    }
    for (p, frames) in ds.frame_indices.iter().enumerate() {
        if frames.iter().any(|&f| owner[f] != fold_of[p]) {
            fold_of[p] = None;
        }
    }
}

impl FoldAssignment {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn synthetic(n: usize, rays: usize) -> Recording {
        let samples = (0..n)
            .map(|i| Sample {
                t: i as f64 / 20.0,
                frame: (0..rays).map(|r| (i * rays + r) as f64 * 1e-3).collect(),
                steer: ((i as f64) * 0.37).sin() * 0.9,
                speed: 1.0,
                lap: (i / 100) as u32,
                s: (i as f64 * 0.05) % 17.0,
                infraction_window: false,
                perturb_mask: false,
            })
            .collect();
        Recording {
            manifest: Manifest {
                capture_hz: 20.0,
                ray_count: rays,
                fov: 2.79,
                max_range: 3.0,
                track_hash: "t".into(),
                expert_params: ExpertParams::default(),
                speed_setpoint: 1.0,
                seed: 0,
                sample_count: n,
                removed_count: 0,
                truncated: None,
                clean_lap_times: vec![],
            },
            samples,
        }
    }

    #[test]
    fn clean_without_infractions_is_identity() {
        let r = synthetic(300, 4);
        assert_eq!(clean(&r, 5.0, 1.0).samples, r.samples);
    }

    #[test]
    fn clean_removes_window() {
        let mut r = synthetic(3000, 2);
        r.samples[2000].infraction_window = true; // t = 100
        let c = clean(&r, 5.0, 1.0);
        assert!(c
            .samples
            .iter()
            .all(|s| s.t < 95.0 - 1e-9 || s.t > 101.0 + 1e-9));
        assert_eq!(c.len(), 3000 - 121);
        assert_eq!(c.manifest.removed_count, 121);
        assert!(c.samples.iter().all(|s| !s.infraction_window));

        let mut early = synthetic(400, 2);
        early.samples[60].infraction_window = true; // t = 3
        let c = clean(&early, 5.0, 1.0);
        assert_eq!(c.samples[0].t, 4.05);
        assert_eq!(c.samples[0].lap, 0);
    }

    #[test]
    fn shift_zero_is_identity() {
        let r = synthetic(50, 3);
        let d = shift_labels(&r, 0).unwrap();
        assert_eq!(d.len(), 50);
        for i in 0..50 {
            assert_eq!(d.inputs[i], r.samples[i].frame);
            assert_eq!(d.labels[i], r.samples[i].steer);
        }
    }

    #[test]
    fn shift_index_arithmetic() {
        let r = synthetic(1000, 2);
        let d = shift_labels(&r, 100).unwrap();
        assert_eq!(d.len(), 998);
        assert_eq!(d.provenance.dropped, 2);
        for i in 0..d.len() {
            assert_eq!(d.labels[i], r.samples[i + 2].steer);
            assert!((d.label_times[i] - d.frame_times[i] - 0.1).abs() < 1e-9);
        }
        let back = shift_labels(&r, -50).unwrap();
        assert_eq!(back.frame_indices[0], vec![1]);
        assert_eq!(back.labels[0], r.samples[0].steer);
        assert!(shift_labels(&r, 30).is_err());
    }

    #[test]
    fn shift_drops_pairs_across_gaps() {
        let mut r = synthetic(100, 1);
        r.samples.remove(50);
        let d = shift_labels(&r, 50).unwrap();
        // Sample 49 would borrow its label from across the gap.
        assert!(!d.frame_indices.iter().any(|f| f[0] == 49));
        assert_eq!(d.len(), 99 - 2);
    }

    #[test]
    fn block_split_sizes() {
        let a = split_block(100, 5).unwrap();
        assert_eq!(a.validation(0), (0..20).collect::<Vec<_>>());
        let b = split_block(101, 5).unwrap();
        let sizes: Vec<usize> = (0..5).map(|k| b.validation(k).len()).collect();
        assert_eq!(sizes, vec![21, 20, 20, 20, 20]);
        assert!(split_block(5, 5).is_err());
    }

    #[test]
    fn period_split_drops_straddling_stacks() {
        let r = synthetic(1002, 1);
        let d = build_pairs(&r, 0, 3, 1).unwrap();
        assert_eq!(d.len(), 1000);
        let a = split_period(&d, 5, 10).unwrap();
        // Every slice boundary loses the two stacks reaching back into the previous slice.
        assert_eq!(a.dropped(), 2 * (50 - 1));
        for k in 0..5 {
            let v = a.validation(k);
            assert!(v.len() >= 10 * 18, "fold {k}: {}", v.len());
        }
        assert!(split_period(&d, 5, 4).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = synthetic(200, 5);
        r.save(dir.path()).unwrap();
        let back = Recording::load(dir.path()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn load_rejects_truncation_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let r = synthetic(20, 5);
        r.save(dir.path()).unwrap();
        let path = dir.path().join("samples.jsonl");
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() - 7]).unwrap();
        assert!(matches!(
            Recording::load(dir.path()),
            Err(Error::Parse { .. })
        ));
        // Cut at a line boundary: the record count no longer matches the manifest.
        let lines: Vec<&str> = text.lines().take(15).collect();
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        assert!(matches!(
            Recording::load(dir.path()),
            Err(Error::Parse { line: 16, .. })
        ));

        let mut bad = synthetic(20, 5);
        bad.samples[3].frame.pop();
        bad.save(dir.path()).unwrap();
        assert!(matches!(
            Recording::load(dir.path()),
            Err(Error::Integrity(_))
        ));
    }
}
