//! Feed-forward steering regressor: a small MLP with optional batch norm and
//! dropout, trained with AdamW on mean squared error.
//!
//! Parameters live in one flat vector. Per hidden layer the layout is
//! `W (out x in)`, `b (out)`, then `gamma (out)`, `beta (out)` when normalized;
//! the output layer is `W (1 x in)`, `b (1)`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{write_atomic, ShiftedDataset};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub input_dim: usize,
    pub stack_size: usize,
    /// Capture spacing between stacked frames.
    #[serde(default = "one")]
    pub stride: usize,
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
    pub dropout: f64,
    /// Label shift the policy was trained with (ms).
    pub shift_ms: i64,
}

fn one() -> usize {
    1
}

impl PolicySpec {
    pub fn single_frame(ray_count: usize) -> Self {
        Self {
            input_dim: ray_count,
            stack_size: 1,
            stride: 1,
            hidden: vec![64, 32],
            batch_norm: false,
            dropout: 0.2,
            shift_ms: 0,
        }
    }

    pub fn multi_frame(ray_count: usize) -> Self {
        Self {
            input_dim: 3 * ray_count,
            stack_size: 3,
            stride: 1,
            hidden: vec![128, 64],
            batch_norm: true,
            dropout: 0.2,
            shift_ms: 0,
        }
    }

    pub fn for_stack(ray_count: usize, stack_size: usize) -> Self {
        if stack_size == 1 {
            Self::single_frame(ray_count)
        } else {
            Self {
                input_dim: stack_size * ray_count,
                stack_size,
                ..Self::multi_frame(ray_count)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::input(
                "network needs a non-empty input and hidden layers",
            ));
        }
        if self.stack_size == 0 || self.stride == 0 {
            return Err(Error::input("stack size and stride must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::input("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    fn layers(&self) -> Vec<LayerLayout> {
        let mut out = Vec::new();
        let mut offset = 0;
        let mut fan_in = self.input_dim;
        let widths: Vec<usize> = self.hidden.iter().copied().chain([1]).collect();
        for (k, &w) in widths.iter().enumerate() {
            let hidden = k + 1 < widths.len();
            let norm = hidden && self.batch_norm;
            let l = LayerLayout {
                fan_in,
                fan_out: w,
                w: offset,
                b: offset + w * fan_in,
                gamma: offset + w * fan_in + w,
                beta: offset + w * fan_in + 2 * w,
                norm,
                hidden,
            };
            offset = l.b + w + if norm { 2 * w } else { 0 };
            out.push(l);
            fan_in = w;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().last().map_or(0, |l| {
            l.b + l.fan_out + if l.norm { 2 * l.fan_out } else { 0 }
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
    gamma: usize,
    beta: usize,
    norm: bool,
    hidden: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Infer,
    Train { mask_seed: u64 },
}

/// Penultimate-layer activations at each extraction point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Taps {
    pub post_linear: Vec<f64>,
    /// Only present for normalized networks.
    pub post_norm: Option<Vec<f64>>,
    pub post_activation: Vec<f64>,
}

impl Taps {
    pub fn get(&self, tap: Tap) -> Option<&[f64]> {
        match tap {
            Tap::PostLinear => Some(&self.post_linear),
            Tap::PostNorm => self.post_norm.as_deref(),
            Tap::PostActivation => Some(&self.post_activation),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub prediction: f64,
    pub taps: Taps,
}

/// Where in the penultimate layer embeddings are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tap {
    PostLinear,
    PostNorm,
    PostActivation,
}

impl Tap {
    pub fn as_str(self) -> &'static str {
        match self {
            Tap::PostLinear => "post_linear",
            Tap::PostNorm => "post_norm",
            Tap::PostActivation => "post_activation",
        }
    }
}

impl std::str::FromStr for Tap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "post_linear" => Ok(Tap::PostLinear),
            "post_norm" => Ok(Tap::PostNorm),
            "post_activation" => Ok(Tap::PostActivation),
            _ => Err(Error::input(format!("unknown tap '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub spec: PolicySpec,
    pub params: Vec<f64>,
    /// Running (mean, var) per normalized layer.
    pub running_mean: Vec<Vec<f64>>,
    pub running_var: Vec<Vec<f64>>,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
}

/// Running (mean, var) buffers to update during a training pass.
type RunningStats<'a> = (&'a mut Vec<Vec<f64>>, &'a mut Vec<Vec<f64>>);

/// Per-layer activations kept for backprop.
struct LayerCache {
    input: Vec<f64>,
    z: Vec<f64>,
    zhat: Vec<f64>,
    inv_std: Vec<f64>,
    pre_act: Vec<f64>,
    mask: Vec<f64>,
}

impl Policy {
    pub fn new(spec: PolicySpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; spec.param_count()];
        let mut running_mean = Vec::new();
        let mut running_var = Vec::new();
        for l in spec.layers() {
            // Uniform with variance 2/fan_in (1/fan_in for the linear head).
            let scale = if l.hidden { 6.0 } else { 3.0 };
            let bound = (scale / l.fan_in as f64).sqrt();
            for p in &mut params[l.w..l.w + l.fan_in * l.fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            if l.norm {
                params[l.gamma..l.gamma + l.fan_out].fill(1.0);
                running_mean.push(vec![0.0; l.fan_out]);
                running_var.push(vec![1.0; l.fan_out]);
            }
        }
        Ok(Self {
            input_mean: vec![0.0; spec.input_dim],
            input_std: vec![1.0; spec.input_dim],
            spec,
            params,
            running_mean,
            running_var,
        })
    }

    /// Sets the input standardization from training inputs.
    pub fn fit_standardizer(&mut self, inputs: &[Vec<f64>]) {
        let d = self.spec.input_dim;
        let n = inputs.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for x in inputs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for x in inputs {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        self.input_mean = mean;
        self.input_std = var
            .into_iter()
            .map(|v| if v.sqrt() > 1e-6 { v.sqrt() } else { 1.0 })
            .collect();
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.input_mean)
            .zip(&self.input_std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.input_dim {
            return Err(Error::input(format!(
                "policy expects {} inputs, got {}",
                self.spec.input_dim,
                x.len()
            )));
        }
        Ok(())
    }

    /// Inference-mode prediction (running statistics, no dropout).
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let xs = self.standardize(x);
        let (out, _) = self.forward_eval(&xs, None);
        Ok(out)
    }

    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        xs.iter().map(|x| self.predict(x)).collect()
    }

    /// Single-sample pass returning the prediction and every penultimate tap.
    /// Both modes normalize with running statistics; `Train` also draws
    /// dropout masks from `mask_seed`.
    pub fn forward(&self, x: &[f64], mode: Mode) -> Result<Forward> {
        self.check_dim(x)?;
        let xs = self.standardize(x);
        let mut rng = match mode {
            Mode::Infer => None,
            Mode::Train { mask_seed } => Some(ChaCha8Rng::seed_from_u64(mask_seed)),
        };
        let mut taps = Taps::default();
        let out = self.forward_single(&xs, rng.as_mut(), &mut taps);
        Ok(Forward {
            prediction: out,
            taps,
        })
    }

    fn forward_single(&self, x: &[f64], mut rng: Option<&mut ChaCha8Rng>, taps: &mut Taps) -> f64 {
        let layers = self.spec.layers();
        let last_hidden = layers.len() - 2;
        let keep = 1.0 - self.spec.dropout;
        let mut a = x.to_vec();
        let mut norm_idx = 0;
        for (k, l) in layers.iter().enumerate() {
            let mut z = vec![0.0; l.fan_out];
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &self.params[l.w + o * l.fan_in..l.w + (o + 1) * l.fan_in];
                *zo = dot(row, &a) + self.params[l.b + o];
            }
            if !l.hidden {
                return z[0];
            }
            if k == last_hidden {
                taps.post_linear = z.clone();
            }
            if l.norm {
                let (rm, rv) = (&self.running_mean[norm_idx], &self.running_var[norm_idx]);
                for (o, zo) in z.iter_mut().enumerate() {
                    let zh = (*zo - rm[o]) / (rv[o] + BN_EPS).sqrt();
                    *zo = self.params[l.gamma + o] * zh + self.params[l.beta + o];
                }
                norm_idx += 1;
                if k == last_hidden {
                    taps.post_norm = Some(z.clone());
                }
            }
            for v in &mut z {
                *v = v.max(0.0);
            }
            if k == last_hidden {
                taps.post_activation = z.clone();
            }
            if let Some(r) = rng.as_deref_mut().filter(|_| self.spec.dropout > 0.0) {
                for v in &mut z {
                    *v = if r.random::<f64>() < keep {
                        *v / keep
                    } else {
                        0.0
                    };
                }
            }
            a = z;
        }
        unreachable!("network ends with the output layer")
    }

    /// Single-sample eval pass; optionally captures the penultimate layer at `tap`.
    fn forward_eval(&self, x: &[f64], tap: Option<Tap>) -> (f64, Vec<f64>) {
        let layers = self.spec.layers();
        let last_hidden = layers.len() - 2;
        let mut a = x.to_vec();
        let mut emb = Vec::new();
        let mut norm_idx = 0;
        for (k, l) in layers.iter().enumerate() {
            let mut z = vec![0.0; l.fan_out];
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &self.params[l.w + o * l.fan_in..l.w + (o + 1) * l.fan_in];
                *zo = dot(row, &a) + self.params[l.b + o];
            }
            if !l.hidden {
                return (z[0], emb);
            }
            if k == last_hidden && tap == Some(Tap::PostLinear) {
                emb = z.clone();
            }
            if l.norm {
                let (rm, rv) = (&self.running_mean[norm_idx], &self.running_var[norm_idx]);
                for (o, zo) in z.iter_mut().enumerate() {
                    let zh = (*zo - rm[o]) / (rv[o] + BN_EPS).sqrt();
                    *zo = self.params[l.gamma + o] * zh + self.params[l.beta + o];
                }
                norm_idx += 1;
            }
            if k == last_hidden && tap == Some(Tap::PostNorm) {
                emb = z.clone();
            }
            for v in &mut z {
                *v = v.max(0.0);
            }
            if k == last_hidden && tap == Some(Tap::PostActivation) {
                emb = z.clone();
            }
            a = z;
        }
        unreachable!("network ends with the output layer")
    }

    /// Training-mode batch forward (batch statistics, dropout). Inputs are standardized.
    fn forward_train<R: Rng>(
        &self,
        xs: &[&[f64]],
        rng: &mut R,
        update_running: Option<RunningStats<'_>>,
    ) -> (Vec<f64>, Vec<LayerCache>) {
        let layers = self.spec.layers();
        let n = xs.len();
        let keep = 1.0 - self.spec.dropout;
        let mut act: Vec<f64> = xs.iter().flat_map(|x| x.iter().copied()).collect();
        let mut caches = Vec::with_capacity(layers.len());
        let mut new_stats: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for l in &layers {
            let mut z = vec![0.0; n * l.fan_out];
            for i in 0..n {
                let x = &act[i * l.fan_in..(i + 1) * l.fan_in];
                for o in 0..l.fan_out {
                    let row = &self.params[l.w + o * l.fan_in..l.w + (o + 1) * l.fan_in];
                    z[i * l.fan_out + o] = dot(row, x) + self.params[l.b + o];
                }
            }
            if !l.hidden {
                caches.push(LayerCache {
                    input: act,
                    z: z.clone(),
                    zhat: Vec::new(),
                    inv_std: Vec::new(),
                    pre_act: Vec::new(),
                    mask: Vec::new(),
                });
                if let Some((rm, rv)) = update_running {
                    for (k, (m, v)) in new_stats.into_iter().enumerate() {
                        for o in 0..m.len() {
                            rm[k][o] = BN_MOMENTUM * rm[k][o] + (1.0 - BN_MOMENTUM) * m[o];
                            rv[k][o] = BN_MOMENTUM * rv[k][o] + (1.0 - BN_MOMENTUM) * v[o];
                        }
                    }
                }
                return (z, caches);
            }
            let mut zhat = Vec::new();
            let mut inv_std = Vec::new();
            let mut pre = z.clone();
            if l.norm {
                let f = l.fan_out;
                let mut mean = vec![0.0; f];
                let mut var = vec![0.0; f];
                for i in 0..n {
                    for o in 0..f {
                        mean[o] += z[i * f + o] / n as f64;
                    }
                }
                for i in 0..n {
                    for o in 0..f {
                        let d = z[i * f + o] - mean[o];
                        var[o] += d * d / n as f64;
                    }
                }
                inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                zhat = vec![0.0; n * f];
                for i in 0..n {
                    for o in 0..f {
                        let zh = (z[i * f + o] - mean[o]) * inv_std[o];
                        zhat[i * f + o] = zh;
                        pre[i * f + o] = self.params[l.gamma + o] * zh + self.params[l.beta + o];
                    }
                }
                new_stats.push((mean, var));
            }
            let mut mask = vec![1.0; pre.len()];
            if self.spec.dropout > 0.0 {
                for m in &mut mask {
                    *m = if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    };
                }
            }
            let out: Vec<f64> = pre.iter().zip(&mask).map(|(v, m)| v.max(0.0) * m).collect();
            caches.push(LayerCache {
                input: act,
                z,
                zhat,
                inv_std,
                pre_act: pre,
                mask,
            });
            act = out;
        }
        unreachable!("network ends with the output layer")
    }

    /// Training-mode MSE and its gradient for standardized inputs; the dropout
    /// masks come from `dropout_seed`.
    pub fn loss_and_grad(&self, xs: &[&[f64]], ys: &[f64], dropout_seed: u64) -> (f64, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let (out, caches) = self.forward_train(xs, &mut rng, None);
        self.backward(&out, &caches, ys)
    }

    fn backward(&self, out: &[f64], caches: &[LayerCache], ys: &[f64]) -> (f64, Vec<f64>) {
        let layers = self.spec.layers();
        let n = ys.len();
        let nf = n as f64;
        let loss = out
            .iter()
            .zip(ys)
            .map(|(o, y)| (o - y) * (o - y))
            .sum::<f64>()
            / nf;
        let mut grad = vec![0.0; self.params.len()];
        // Gradient w.r.t. the current layer's linear output z.
        let mut dz: Vec<f64> = out
            .iter()
            .zip(ys)
            .map(|(o, y)| 2.0 * (o - y) / nf)
            .collect();
        for k in (0..layers.len()).rev() {
            let l = layers[k];
            let c = &caches[k];
            if l.hidden {
                // dz currently holds dL/d(output of this layer); go back through dropout, ReLU, BN.
                let f = l.fan_out;
                let mut dpre: Vec<f64> = dz
                    .iter()
                    .zip(&c.mask)
                    .zip(&c.pre_act)
                    .map(|((g, m), p)| if *p > 0.0 { g * m } else { 0.0 })
                    .collect();
                if l.norm {
                    let mut dzz = vec![0.0; n * f];
                    for o in 0..f {
                        let gamma = self.params[l.gamma + o];
                        let mut sum_d = 0.0;
                        let mut sum_dz = 0.0;
                        for i in 0..n {
                            let d = dpre[i * f + o];
                            grad[l.beta + o] += d;
                            grad[l.gamma + o] += d * c.zhat[i * f + o];
                            sum_d += d * gamma;
                            sum_dz += d * gamma * c.zhat[i * f + o];
                        }
                        for i in 0..n {
                            let dh = dpre[i * f + o] * gamma;
                            dzz[i * f + o] =
                                c.inv_std[o] / nf * (nf * dh - sum_d - c.zhat[i * f + o] * sum_dz);
                        }
                    }
                    dpre = dzz;
                }
                dz = dpre;
            }
            let mut dx = vec![0.0; n * l.fan_in];
            for i in 0..n {
                let x = &c.input[i * l.fan_in..(i + 1) * l.fan_in];
                let dxi = &mut dx[i * l.fan_in..(i + 1) * l.fan_in];
                for o in 0..l.fan_out {
                    let g = dz[i * l.fan_out + o];
                    if g == 0.0 {
                        continue;
                    }
                    grad[l.b + o] += g;
                    let w0 = l.w + o * l.fan_in;
                    let gw = &mut grad[w0..w0 + l.fan_in];
                    for (gwj, xj) in gw.iter_mut().zip(x) {
                        *gwj += g * xj;
                    }
                    let row = &self.params[w0..w0 + l.fan_in];
                    for (d, w) in dxi.iter_mut().zip(row) {
                        *d += g * w;
                    }
                }
            }
            dz = dx;
        }
        let _ = &caches.last().map(|c| &c.z);
        (loss, grad)
    }

    /// Mask of parameters subject to weight decay (linear weights only).
    fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for l in self.spec.layers() {
            mask[l.w..l.w + l.fan_in * l.fan_out].fill(true);
        }
        mask
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec).expect("serializable"));
        for v in self
            .params
            .iter()
            .chain(self.running_mean.iter().flatten())
            .chain(self.running_var.iter().flatten())
            .chain(&self.input_mean)
            .chain(&self.input_std)
        {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Stored<'a> {
            hash: String,
            policy: &'a Policy,
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = serde_json::to_vec(&Stored {
            hash: self.content_hash(),
            policy: self,
        })?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Stored {
            hash: String,
            policy: Policy,
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stored: Stored = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let p = stored.policy;
        p.spec.validate()?;
        if p.params.len() != p.spec.param_count() {
            return Err(Error::Integrity(format!(
                "{}: expected {} parameters, found {}",
                path.display(),
                p.spec.param_count(),
                p.params.len()
            )));
        }
        if p.content_hash() != stored.hash {
            return Err(Error::Integrity(format!(
                "{}: parameter hash mismatch",
                path.display()
            )));
        }
        Ok(p)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub weight_decay: f64,
    /// Train for exactly this many epochs and ignore validation for stopping.
    pub fixed_epochs: Option<usize>,
    /// One update per epoch over the whole training set.
    pub full_batch: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 100,
            patience: 5,
            weight_decay: 1e-4,
            fixed_epochs: None,
            full_batch: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::input(
                "learning rate, batch size and epochs must be positive",
            ));
        }
        Ok(())
    }
}

/// Tracks the best validation loss and says when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records an epoch's loss; returns true if it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub epochs_run: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut [f64], grad: &[f64], decay: &[bool], cfg: &TrainConfig) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            if decay[i] {
                params[i] -= cfg.learning_rate * cfg.weight_decay * params[i];
            }
            params[i] -= cfg.learning_rate * mh / (vh.sqrt() + 1e-8);
        }
    }
}

/// Mean squared error in inference mode.
pub fn mse(policy: &Policy, ds: &ShiftedDataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(f64::NAN);
    }
    let preds = policy.predict_batch(&ds.inputs)?;
    Ok(preds
        .iter()
        .zip(&ds.labels)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / ds.len() as f64)
}

/// Trains a fresh network. With `val`, keeps the parameters of the best
/// validation epoch and stops after `patience` epochs without improvement.
pub fn train(
    spec: &PolicySpec,
    train_set: &ShiftedDataset,
    val: Option<&ShiftedDataset>,
    cfg: &TrainConfig,
) -> Result<(Policy, TrainReport)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    if train_set.input_dim() != spec.input_dim {
        return Err(Error::input(format!(
            "network expects {} inputs, dataset has {}",
            spec.input_dim,
            train_set.input_dim()
        )));
    }
    let mut policy = Policy::new(spec.clone(), cfg.seed)?;
    policy.fit_standardizer(&train_set.inputs);
    let xs: Vec<Vec<f64>> = train_set
        .inputs
        .iter()
        .map(|x| policy.standardize(x))
        .collect();
    let decay = policy.decay_mask();
    let mut adam = Adam {
        m: vec![0.0; policy.params.len()],
        v: vec![0.0; policy.params.len()],
        t: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let batch = if cfg.full_batch {
        xs.len()
    } else {
        cfg.batch_size
    };
    let epochs = cfg.fixed_epochs.unwrap_or(cfg.max_epochs);
    let use_val = val.filter(|v| !v.is_empty() && cfg.fixed_epochs.is_none());

    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = policy.clone();
    let mut report = TrainReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        epochs_run: 0,
    };
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            // A batch of one cannot be normalized.
            if chunk.len() < 2 && policy.spec.batch_norm {
                continue;
            }
            let bx: Vec<&[f64]> = chunk.iter().map(|&i| xs[i].as_slice()).collect();
            let by: Vec<f64> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let mut rm = policy.running_mean.clone();
            let mut rv = policy.running_var.clone();
            let (out, caches) = policy.forward_train(&bx, &mut rng, Some((&mut rm, &mut rv)));
            let (loss, grad) = policy.backward(&out, &caches, &by);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, loss });
            }
            policy.running_mean = rm;
            policy.running_var = rv;
            adam.step(&mut policy.params, &grad, &decay, cfg);
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / xs.len() as f64;
        report.train_loss.push(train_loss);
        report.epochs_run = epoch;
        match use_val {
            Some(v) => {
                let vl = mse(&policy, v)?;
                if !vl.is_finite() {
                    return Err(Error::Diverged { epoch, loss: vl });
                }
                report.val_loss.push(vl);
                if stopper.observe(epoch, vl) {
                    best = policy.clone();
                }
                if stopper.should_stop() {
                    break;
                }
            }
            None => {
                best = policy.clone();
                stopper.best_epoch = epoch;
            }
        }
    }
    report.best_epoch = stopper.best_epoch;
    Ok((best, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffPolicyEval {
    pub mae: f64,
    pub predictions: Vec<f64>,
    /// prediction - label, per sample.
    pub residuals: Vec<f64>,
}

pub fn evaluate_offpolicy(policy: &Policy, ds: &ShiftedDataset) -> Result<OffPolicyEval> {
    if ds.is_empty() {
        return Err(Error::input("evaluation set is empty"));
    }
    let predictions = policy.predict_batch(&ds.inputs)?;
    let residuals: Vec<f64> = predictions
        .iter()
        .zip(&ds.labels)
        .map(|(p, y)| p - y)
        .collect();
    let mae = residuals.iter().map(|r| r.abs()).sum::<f64>() / residuals.len() as f64;
    Ok(OffPolicyEval {
        mae,
        predictions,
        residuals,
    })
}

/// Penultimate-layer activations (inference mode) for each input.
pub fn extract_embeddings(policy: &Policy, inputs: &[Vec<f64>], tap: Tap) -> Result<Vec<Vec<f64>>> {
    if tap == Tap::PostNorm && !policy.spec.batch_norm {
        return Err(Error::input("post_norm tap needs a normalized network"));
    }
    inputs
        .iter()
        .map(|x| {
            policy.check_dim(x)?;
            Ok(policy.forward_eval(&policy.standardize(x), Some(tap)).1)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Provenance;

    fn toy(n: usize, dim: usize, seed: u64) -> ShiftedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(0.0..3.0)).collect())
            .collect();
        let labels = inputs
            .iter()
            .map(|x| (0.6 * (x[0] - x[dim - 1])).tanh())
            .collect();
        ShiftedDataset {
            inputs,
            labels,
            frame_indices: (0..n).map(|i| vec![i]).collect(),
            label_indices: (0..n).collect(),
            frame_times: (0..n).map(|i| i as f64 * 0.05).collect(),
            label_times: (0..n).map(|i| i as f64 * 0.05).collect(),
            shift_ms: 0,
            stack_size: 1,
            provenance: Provenance {
                source_hash: String::new(),
                shift_ms: 0,
                stack_size: 1,
                stride: 1,
                dropped: 0,
            },
        }
    }

    fn numeric_check(spec: PolicySpec) {
        let mut p = Policy::new(spec, 3).unwrap();
        // Perturb BN params away from identity so their gradients matter.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for v in &mut p.params {
            *v += rng.random_range(-0.05..0.05);
        }
        let ds = toy(3, p.spec.input_dim, 1);
        let xs: Vec<&[f64]> = ds.inputs.iter().map(|x| x.as_slice()).collect();
        let (_, g) = p.loss_and_grad(&xs, &ds.labels, 42);
        let h = 1e-5;
        for (i, &gi) in g.iter().enumerate() {
            let orig = p.params[i];
            p.params[i] = orig + h;
            let (lp, _) = p.loss_and_grad(&xs, &ds.labels, 42);
            p.params[i] = orig - h;
            let (lm, _) = p.loss_and_grad(&xs, &ds.labels, 42);
            p.params[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            let denom = num.abs().max(gi.abs()).max(1e-7);
            assert!(
                (num - gi).abs() / denom < 1e-4 || (num - gi).abs() < 1e-8,
                "param {i}: numeric {num} analytic {gi}"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        numeric_check(PolicySpec {
            input_dim: 5,
            stack_size: 1,
            stride: 1,
            hidden: vec![6, 4],
            batch_norm: false,
            dropout: 0.0,
            shift_ms: 0,
        });
        numeric_check(PolicySpec {
            input_dim: 5,
            stack_size: 1,
            stride: 1,
            hidden: vec![6, 4],
            batch_norm: true,
            dropout: 0.3,
            shift_ms: 0,
        });
    }

    #[test]
    fn learns_a_smooth_target() {
        let spec = PolicySpec {
            hidden: vec![32, 16],
            dropout: 0.0,
            ..PolicySpec::single_frame(8)
        };
        let tr = toy(1500, 8, 1);
        let va = toy(300, 8, 2);
        let (p, rep) = train(&spec, &tr, Some(&va), &TrainConfig::default()).unwrap();
        let m = mse(&p, &va).unwrap();
        assert!(m < 0.01, "val mse {m}");
        assert!(rep.best_epoch >= 1 && rep.best_epoch <= rep.epochs_run);
        let bn = PolicySpec {
            dropout: 0.1,
            ..PolicySpec::for_stack(8, 3)
        };
        let tr3 = toy(1500, 24, 3);
        let va3 = toy(300, 24, 4);
        let (p3, _) = train(&bn, &tr3, Some(&va3), &TrainConfig::default()).unwrap();
        assert!(mse(&p3, &va3).unwrap() < 0.03);
    }

    #[test]
    fn early_stopping_rule() {
        let mut s = EarlyStopping::new(2);
        assert!(s.observe(1, 1.0));
        assert!(!s.observe(2, 1.1));
        assert!(!s.should_stop());
        assert!(!s.observe(3, 1.0));
        assert!(s.should_stop());
        assert_eq!(s.best_epoch, 1);
    }

    #[test]
    fn training_is_deterministic() {
        let spec = PolicySpec::single_frame(8);
        let tr = toy(200, 8, 5);
        let cfg = TrainConfig {
            fixed_epochs: Some(3),
            ..Default::default()
        };
        let (a, _) = train(&spec, &tr, None, &cfg).unwrap();
        let (b, _) = train(&spec, &tr, None, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_reported() {
        let spec = PolicySpec::single_frame(8);
        let mut tr = toy(100, 8, 5);
        tr.labels[3] = f64::NAN;
        let r = train(&spec, &tr, None, &TrainConfig::default());
        assert!(matches!(r, Err(Error::Diverged { .. })));
    }

    #[test]
    fn save_load_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = Policy::new(PolicySpec::multi_frame(4), 1).unwrap();
        p.save(&path).unwrap();
        let q = Policy::load(&path).unwrap();
        assert_eq!(p, q);
        let x = vec![0.5; 12];
        assert_eq!(p.predict(&x).unwrap(), q.predict(&x).unwrap());
        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.find("\"params\":[").unwrap() + 10;
        let mut bad = text.clone();
        bad.insert_str(first, "0.125,");
        // Drop one trailing value to keep the length.
        let end = bad[first..].find(']').unwrap() + first;
        let cut = bad[..end].rfind(',').unwrap();
        bad.replace_range(cut..end, "");
        std::fs::write(&path, bad).unwrap();
        assert!(matches!(Policy::load(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn taps_have_penultimate_width() {
        let p = Policy::new(PolicySpec::multi_frame(4), 1).unwrap();
        let xs = vec![vec![0.3; 12]];
        for tap in [Tap::PostLinear, Tap::PostNorm, Tap::PostActivation] {
            let e = extract_embeddings(&p, &xs, tap).unwrap();
            assert_eq!(e[0].len(), 64);
        }
        let act = extract_embeddings(&p, &xs, Tap::PostActivation).unwrap();
        assert!(act[0].iter().all(|v| *v >= 0.0));
        assert!(p.predict(&[0.0; 5]).is_err());
    }

    #[test]
    fn post_norm_requires_normalization() {
        let p = Policy::new(PolicySpec::single_frame(4), 1).unwrap();
        let xs = vec![vec![0.3; 4]];
        assert!(extract_embeddings(&p, &xs, Tap::PostNorm).is_err());
        let f = p.forward(&xs[0], Mode::Infer).unwrap();
        assert!(f.taps.post_norm.is_none());
        assert_eq!(f.taps.post_linear.len(), 32);
    }

    #[test]
    fn forward_taps_follow_rectifier() {
        let mut p = Policy::new(PolicySpec::multi_frame(4), 2).unwrap();
        p.running_mean[1].iter_mut().for_each(|m| *m = 0.1);
        let x = vec![0.7; 12];
        let a = p.forward(&x, Mode::Infer).unwrap();
        let b = p.forward(&x, Mode::Infer).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.prediction, p.predict(&x).unwrap());
        let norm = a.taps.post_norm.as_ref().unwrap();
        for (n, r) in norm.iter().zip(&a.taps.post_activation) {
            assert_eq!(*r, n.max(0.0));
        }
        assert!(p.forward(&[0.0; 3], Mode::Infer).is_err());
    }

    #[test]
    fn zero_final_layer_predicts_zero() {
        let mut p = Policy::new(PolicySpec::multi_frame(4), 5).unwrap();
        let last = *p.spec.layers().last().unwrap();
        p.params[last.w..].fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x: Vec<f64> = (0..12).map(|_| rng.random_range(-5.0..5.0)).collect();
            assert_eq!(p.predict(&x).unwrap(), 0.0);
        }
    }

    #[test]
    fn init_is_uniform_and_bounded() {
        let p = Policy::new(PolicySpec::single_frame(32), 7).unwrap();
        let l = p.spec.layers()[0];
        let bound = (6.0 / 32.0f64).sqrt();
        let w = &p.params[l.w..l.w + l.fan_in * l.fan_out];
        assert!(w.iter().all(|v| v.abs() < bound));
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0 / 32.0).abs() < 0.2 * 2.0 / 32.0, "var {var}");
        assert!(p.params[l.b..l.b + l.fan_out].iter().all(|b| *b == 0.0));
    }

    #[test]
    fn dropout_matches_expectation() {
        let spec = PolicySpec {
            input_dim: 6,
            stack_size: 1,
            stride: 1,
            hidden: vec![24],
            batch_norm: false,
            dropout: 0.3,
            shift_ms: 0,
        };
        let p = Policy::new(spec, 11).unwrap();
        let x = vec![0.4, -1.0, 2.0, 0.1, 0.8, -0.3];
        let infer = p.forward(&x, Mode::Infer).unwrap().prediction;
        let n = 10_000;
        let samples: Vec<f64> = (0..n)
            .map(|i| {
                p.forward(&x, Mode::Train { mask_seed: i })
                    .unwrap()
                    .prediction
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - infer).abs() < 3.0 * se,
            "mean {mean} infer {infer} se {se}"
        );
    }

    #[test]
    fn full_batch_loss_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ds = toy(200, 4, 6);
        for (x, y) in ds.inputs.iter_mut().zip(ds.labels.iter_mut()) {
            *x = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            *y = 0.3 * x[0] - 0.2 * x[1] + 0.1 * x[3];
        }
        let spec = PolicySpec {
            input_dim: 4,
            stack_size: 1,
            stride: 1,
            hidden: vec![8],
            batch_norm: false,
            dropout: 0.0,
            shift_ms: 0,
        };
        let cfg = TrainConfig {
            full_batch: true,
            fixed_epochs: Some(60),
            ..Default::default()
        };
        let (_, rep) = train(&spec, &ds, None, &cfg).unwrap();
        for w in rep.train_loss.windows(2) {
            assert!(w[1] <= w[0], "{:?}", rep.train_loss);
        }
        assert!(rep.train_loss.last().unwrap() < &rep.train_loss[0]);
    }

    #[test]
    fn constant_labels_are_learned() {
        let mut tr = toy(2000, 6, 8);
        let mut va = toy(200, 6, 9);
        tr.labels.fill(0.37);
        va.labels.fill(0.37);
        let spec = PolicySpec {
            dropout: 0.0,
            ..PolicySpec::single_frame(6)
        };
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            ..Default::default()
        };
        let (p, rep) = train(&spec, &tr, Some(&va), &cfg).unwrap();
        assert!(rep.epochs_run >= 1);
        let preds = p.predict_batch(&va.inputs).unwrap();
        let n = preds.len() as f64;
        let mean = preds.iter().sum::<f64>() / n;
        let mae = preds.iter().map(|y| (y - 0.37).abs()).sum::<f64>() / n;
        assert!((mean - 0.37).abs() < 0.01, "mean {mean}");
        assert!(mae < 0.01, "mae {mae}");
    }

    #[test]
    fn patience_example() {
        let losses = [0.5, 0.4, 0.41, 0.42, 0.43, 0.44, 0.45];
        let mut s = EarlyStopping::new(5);
        let mut stopped = None;
        for (i, l) in losses.iter().enumerate() {
            s.observe(i + 1, *l);
            if s.should_stop() {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(7));
        assert_eq!(s.best_epoch, 2);
    }
}
