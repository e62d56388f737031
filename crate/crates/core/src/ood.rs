//! Nearest-neighbor distance to training embeddings as a novelty score, and
//! AUROC as the separability measure between same-speed and novel-speed data.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_pairs, Recording, ShiftedDataset};
use crate::error::{Error, Result};
use crate::learner::{extract_embeddings, Policy, Tap};

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::Euclidean, Metric::Cosine];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        }
    }

    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            Metric::Cosine => {
                let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
                for (x, y) in a.iter().zip(b) {
                    ab += x * y;
                    aa += x * x;
                    bb += y * y;
                }
                if aa == 0.0 || bb == 0.0 {
                    return 1.0;
                }
                (1.0 - ab / (aa.sqrt() * bb.sqrt())).max(0.0)
            }
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            _ => Err(Error::input(format!("unknown metric '{s}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceSet {
    pub embeddings: Vec<Vec<f64>>,
    pub metric: Metric,
    pub tap: Tap,
    pub source_hash: String,
    /// Euclidean norm of each row, for the cosine metric.
    norms: Vec<f64>,
}

impl ReferenceSet {
    pub fn new(embeddings: Vec<Vec<f64>>, metric: Metric, tap: Tap) -> Result<Self> {
        let d = embeddings.first().map_or(0, Vec::len);
        if embeddings
            .iter()
            .any(|e| e.len() != d || e.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::input(
                "reference embeddings must be finite with equal width",
            ));
        }
        let norms = embeddings.iter().map(|e| dot(e, e).sqrt()).collect();
        Ok(Self {
            embeddings,
            metric,
            tap,
            source_hash: String::new(),
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }
}

/// Mean of the `k` smallest distances from `query` to the reference rows.
pub fn knn_distance(reference: &ReferenceSet, query: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > reference.len() {
        return Err(Error::input(format!(
            "k = {k} needs 1..={} reference rows",
            reference.len()
        )));
    }
    if query.len() != reference.dim() {
        return Err(Error::input(format!(
            "query has {} values, references have {}",
            query.len(),
            reference.dim()
        )));
    }
    // The k best so far, kept sorted. Euclidean ranks on squared distance.
    let mut best: Vec<f64> = Vec::with_capacity(k + 1);
    let mut keep = |d: f64| {
        if best.len() < k || d < best[k - 1] {
            let pos = best.partition_point(|b| *b <= d);
            best.insert(pos, d);
            best.truncate(k);
        }
    };
    match reference.metric {
        Metric::Euclidean => {
            for r in &reference.embeddings {
                keep(sq_dist(query, r));
            }
            Ok(best.iter().map(|d| d.sqrt()).sum::<f64>() / k as f64)
        }
        Metric::Cosine => {
            let qn = dot(query, query).sqrt();
            for (r, &rn) in reference.embeddings.iter().zip(&reference.norms) {
                keep(if qn == 0.0 || rn == 0.0 {
                    1.0
                } else {
                    (1.0 - dot(query, r) / (qn * rn)).max(0.0)
                });
            }
            Ok(best.iter().sum::<f64>() / k as f64)
        }
    }
}

// Four accumulators so the loops vectorize.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

pub fn knn_distances(reference: &ReferenceSet, queries: &[Vec<f64>], k: usize) -> Result<Vec<f64>> {
    queries
        .par_iter()
        .map(|q| knn_distance(reference, q, k))
        .collect()
}

/// Probability that a random positive scores above a random negative, ties
/// counting one half.
pub fn auroc(negatives: &[f64], positives: &[f64]) -> Result<f64> {
    if negatives.is_empty() || positives.is_empty() {
        return Err(Error::input("auroc needs non-empty score lists"));
    }
    let mut neg = negatives.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for p in positives {
        let below = neg.partition_point(|n| n < p);
        let le = neg.partition_point(|n| n <= p);
        wins += below as f64 + 0.5 * (le - below) as f64;
    }
    Ok(wins / (neg.len() as f64 * positives.len() as f64))
}

/// Three-frame stacks from frames (i-4, i-2, i) of a slow recording: motion
/// between frames doubles while every frame and label is reused verbatim.
pub fn synth_fast_by_frameskip(slow: &Recording, shift_ms: i64) -> Result<ShiftedDataset> {
    if slow.len() < 5 {
        return Err(Error::input("recording too short for frame skipping"));
    }
    build_pairs(slow, shift_ms, 3, 2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodCell {
    pub speed: String,
    pub metric: Metric,
    pub location: Tap,
    pub fold: usize,
    pub mean_dist_same: f64,
    pub mean_dist_novel: f64,
    pub auroc: f64,
}

/// One trained fold: the model, its training inputs (the reference source)
/// and its same-speed validation inputs.
pub struct FoldModel<'a> {
    pub policy: &'a Policy,
    pub train_inputs: Vec<&'a [f64]>,
    pub val_inputs: Vec<&'a [f64]>,
}

pub struct SpeedModels<'a> {
    pub speed: String,
    pub folds: Vec<FoldModel<'a>>,
    /// Inputs recorded at the other speed.
    pub novel_inputs: Vec<&'a [f64]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodConfig {
    pub k: usize,
    /// Caps on reference and query rows, drawn with an even stride.
    pub max_reference: usize,
    pub max_queries: usize,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            max_reference: 50_000,
            max_queries: 2_000,
        }
    }
}

fn thin(rows: &[&[f64]], cap: usize) -> Vec<Vec<f64>> {
    if rows.len() <= cap {
        return rows.iter().map(|r| r.to_vec()).collect();
    }
    (0..cap)
        .map(|i| rows[i * rows.len() / cap].to_vec())
        .collect()
}

fn taps_for(policy: &Policy) -> Vec<Tap> {
    if policy.spec.batch_norm {
        vec![Tap::PostLinear, Tap::PostNorm, Tap::PostActivation]
    } else {
        vec![Tap::PostLinear, Tap::PostActivation]
    }
}

/// Every (speed, metric, location, fold) cell.
pub fn run_ood_study(models: &[SpeedModels], cfg: &OodConfig) -> Result<Vec<OodCell>> {
    let mut jobs = Vec::new();
    for sm in models {
        for (fold, fm) in sm.folds.iter().enumerate() {
            for tap in taps_for(fm.policy) {
                jobs.push((sm, fold, fm, tap));
            }
        }
    }
    let cells: Result<Vec<Vec<OodCell>>> = jobs
        .par_iter()
        .map(|&(sm, fold, fm, tap)| {
            let refs =
                extract_embeddings(fm.policy, &thin(&fm.train_inputs, cfg.max_reference), tap)?;
            let same = extract_embeddings(fm.policy, &thin(&fm.val_inputs, cfg.max_queries), tap)?;
            let novel =
                extract_embeddings(fm.policy, &thin(&sm.novel_inputs, cfg.max_queries), tap)?;
            let mut out = Vec::new();
            for metric in Metric::ALL {
                let reference = ReferenceSet::new(refs.clone(), metric, tap)?;
                let ds = knn_distances(&reference, &same, cfg.k)?;
                let dn = knn_distances(&reference, &novel, cfg.k)?;
                out.push(OodCell {
                    speed: sm.speed.clone(),
                    metric,
                    location: tap,
                    fold,
                    mean_dist_same: mean(&ds),
                    mean_dist_novel: mean(&dn),
                    auroc: auroc(&ds, &dn)?,
                });
            }
            Ok(out)
        })
        .collect();
    let mut cells: Vec<OodCell> = cells?.into_iter().flatten().collect();
    cells.sort_by(|a, b| {
        (&a.speed, a.metric.as_str(), a.location.as_str(), a.fold).cmp(&(
            &b.speed,
            b.metric.as_str(),
            b.location.as_str(),
            b.fold,
        ))
    });
    Ok(cells)
}

/// Fold-averaged cell values per (speed, metric, location).
pub fn aggregate(cells: &[OodCell]) -> Vec<OodCell> {
    let mut keys: Vec<(String, Metric, Tap)> = Vec::new();
    for c in cells {
        let key = (c.speed.clone(), c.metric, c.location);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(speed, metric, location)| {
            let group: Vec<&OodCell> = cells
                .iter()
                .filter(|c| c.speed == speed && c.metric == metric && c.location == location)
                .collect();
            let avg = |f: fn(&OodCell) -> f64| {
                group.iter().map(|c| f(c)).sum::<f64>() / group.len() as f64
            };
            OodCell {
                mean_dist_same: avg(|c| c.mean_dist_same),
                mean_dist_novel: avg(|c| c.mean_dist_novel),
                auroc: avg(|c| c.auroc),
                speed,
                metric,
                location,
                fold: usize::MAX,
            }
        })
        .collect()
}

pub fn write_csv(cells: &[OodCell]) -> String {
    let mut s = String::from("speed,metric,location,fold,mean_dist_same,mean_dist_novel,auroc\n");
    for c in cells {
        let fold = if c.fold == usize::MAX {
            "mean".to_string()
        } else {
            c.fold.to_string()
        };
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6}\n",
            c.speed,
            c.metric.as_str(),
            c.location.as_str(),
            fold,
            c.mean_dist_same,
            c.mean_dist_novel,
            c.auroc
        ));
    }
    s
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}
