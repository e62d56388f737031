//! End-to-end studies: the speed study (cross-speed off-policy and on-policy
//! evaluation plus the embedding OOD analysis) and the delay study (label
//! shifts against added computational delay).
//!
//! Each study writes its artifacts under an output directory as it goes, so a
//! failed step leaves the earlier outputs in place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::closedloop::{cross_speed_eval, run_sweep, CrossSpeedCell, SweepReport};
use crate::config::ExperimentConfig;
use crate::dataset::{
    build_pairs, clean, split_block, split_period, write_atomic, FoldAssignment, Recording,
    ShiftedDataset,
};
use crate::error::{Error, Result};
use crate::expert::{collect_run, lap_time_stats, CollectConfig};
use crate::learner::{evaluate_offpolicy, train, Policy, PolicySpec, TrainReport};
use crate::ood::{
    aggregate, run_ood_study, synth_fast_by_frameskip, FoldModel, OodCell, SpeedModels,
};
use crate::sensing::mean_sq_interframe_diff;
use crate::track::{generate_track, Track};

/// Deterministic per-purpose seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Single,
    Multi,
}

impl Arch {
    pub const ALL: [Arch; 2] = [Arch::Single, Arch::Multi];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Single => "single",
            Arch::Multi => "multi",
        }
    }
}

/// Off-policy MAE of one (architecture, training speed) model family on one
/// validation speed, per fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeRow {
    pub arch: Arch,
    pub train_speed: String,
    pub val_speed: String,
    pub fold_mae: Vec<f64>,
}

impl MaeRow {
    pub fn mean(&self) -> f64 {
        self.fold_mae.iter().sum::<f64>() / self.fold_mae.len() as f64
    }

    pub fn same_speed(&self) -> bool {
        self.train_speed == self.val_speed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    pub slow: f64,
    pub fast: f64,
    pub synthetic_fast: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedStudyReport {
    pub seed: u64,
    pub config_hash: String,
    pub track_hash: String,
    pub recording_hashes: BTreeMap<String, String>,
    pub model_hashes: BTreeMap<String, String>,
    pub table3: Vec<MaeRow>,
    pub table4: Vec<CrossSpeedCell>,
    pub ood: Vec<OodCell>,
    pub frameskip: Vec<OodCell>,
    pub interframe_msd: FrameStats,
    /// Best epoch per fold, keyed like the model names.
    pub best_epochs: BTreeMap<String, Vec<usize>>,
    pub runtime_s: f64,
    /// Wall time of the embedding and frame-skip analyses.
    #[serde(default)]
    pub ood_runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayStudyReport {
    pub seed: u64,
    pub config_hash: String,
    pub track_hash: String,
    pub recording_hash: String,
    pub model_hashes: BTreeMap<i64, String>,
    pub train_lap_mean_s: f64,
    pub train_lap_std_s: f64,
    pub sweep: SweepReport,
    pub runtime_s: f64,
}

fn config_hash(cfg: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(cfg.to_text().as_bytes()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub fn build_track(cfg: &ExperimentConfig) -> Result<Track> {
    generate_track(cfg.seed, &cfg.track_params())
}

/// Expert recording at `speed`, cleaned around infractions.
pub fn collect_clean(
    cfg: &ExperimentConfig,
    track: &Track,
    speed: f64,
    duration: f64,
    jitter: f64,
    tag: &str,
) -> Result<Recording> {
    let rec = collect_run(
        track,
        &cfg.vehicle_params(),
        &cfg.expert_params(),
        &cfg.sensor_config(),
        &cfg.pipeline_config(),
        &CollectConfig {
            speed_setpoint: speed,
            duration,
            speed_jitter: jitter,
            seed: derive_seed(cfg.seed, tag),
        },
    )?;
    Ok(clean(
        &rec,
        cfg.expert.clean_before_s,
        cfg.expert.clean_after_s,
    ))
}

pub fn policy_spec(cfg: &ExperimentConfig, arch: Arch, shift_ms: i64) -> PolicySpec {
    let rays = cfg.sensor.ray_count;
    let base = match arch {
        Arch::Single => PolicySpec {
            hidden: cfg.train.single_hidden.clone(),
            ..PolicySpec::single_frame(rays)
        },
        Arch::Multi => PolicySpec {
            input_dim: rays * cfg.sensor.multi_stack,
            stack_size: cfg.sensor.multi_stack,
            stride: cfg.sensor.stride,
            hidden: cfg.train.multi_hidden.clone(),
            ..PolicySpec::multi_frame(rays)
        },
    };
    PolicySpec {
        dropout: cfg.train.dropout,
        shift_ms,
        ..base
    }
}

pub fn pairs_for(
    cfg: &ExperimentConfig,
    rec: &Recording,
    arch: Arch,
    shift_ms: i64,
) -> Result<ShiftedDataset> {
    match arch {
        Arch::Single => build_pairs(rec, shift_ms, 1, 1),
        Arch::Multi => build_pairs(rec, shift_ms, cfg.sensor.multi_stack, cfg.sensor.stride),
    }
}

pub fn split_for(
    cfg: &ExperimentConfig,
    ds: &ShiftedDataset,
    arch: Arch,
) -> Result<FoldAssignment> {
    match arch {
        Arch::Single => split_block(ds.len(), cfg.train.folds),
        Arch::Multi => split_period(ds, cfg.train.folds, cfg.train.periods),
    }
}

fn median(mut v: Vec<usize>) -> usize {
    v.sort_unstable();
    v[v.len() / 2]
}

struct FoldOutcome {
    policy: Policy,
    report: TrainReport,
    mae_same: f64,
    mae_novel: f64,
}

struct Family {
    arch: Arch,
    speed: usize,
    data: ShiftedDataset,
    novel: ShiftedDataset,
    split: FoldAssignment,
}

/// Runs the speed study and writes its artifacts into `out`.
pub fn run_speed_study(cfg: &ExperimentConfig, out: &Path) -> Result<SpeedStudyReport> {
    let started = Instant::now();
    ensure_dir(out)?;
    write_text(&out.join("config.toml"), &cfg.to_text())?;
    let track = build_track(cfg).map_err(|e| e.in_step("track"))?;
    track
        .save(&out.join("track.json"))
        .map_err(|e| e.in_step("track"))?;

    let speeds = [
        ("slow", cfg.expert.slow_speed),
        ("fast", cfg.expert.fast_speed),
    ];
    let recordings: Vec<Recording> = speeds
        .par_iter()
        .map(|(name, v)| {
            collect_clean(
                cfg,
                &track,
                *v,
                cfg.expert.speed_study_duration_s,
                0.0,
                &format!("collect-{name}"),
            )
            .map_err(|e| e.in_step(&format!("collect {name}")))
        })
        .collect::<Result<_>>()?;
    let mut recording_hashes = BTreeMap::new();
    for ((name, _), rec) in speeds.iter().zip(&recordings) {
        rec.save(&out.join("data").join(name))
            .map_err(|e| e.in_step("collect"))?;
        recording_hashes.insert(name.to_string(), rec.content_hash());
    }

    let mut families = Vec::new();
    for arch in Arch::ALL {
        for s in 0..2 {
            let step = format!("split {}-{}", arch.as_str(), speeds[s].0);
            let data = pairs_for(cfg, &recordings[s], arch, 0).map_err(|e| e.in_step(&step))?;
            let novel =
                pairs_for(cfg, &recordings[1 - s], arch, 0).map_err(|e| e.in_step(&step))?;
            let split = split_for(cfg, &data, arch).map_err(|e| e.in_step(&step))?;
            families.push(Family {
                arch,
                speed: s,
                data,
                novel,
                split,
            });
        }
    }

    // Every fold of every family is an independent job.
    let jobs: Vec<(usize, usize)> = (0..families.len())
        .flat_map(|f| (0..cfg.train.folds).map(move |k| (f, k)))
        .collect();
    let outcomes: Vec<FoldOutcome> = jobs
        .par_iter()
        .map(|&(f, k)| {
            let fam = &families[f];
            let name = format!("{}-{}-fold{k}", fam.arch.as_str(), speeds[fam.speed].0);
            let tr = fam.data.subset(&fam.split.training(k));
            let va = fam.data.subset(&fam.split.validation(k));
            let spec = policy_spec(cfg, fam.arch, 0);
            let (policy, report) = train(
                &spec,
                &tr,
                Some(&va),
                &cfg.train_config(derive_seed(cfg.seed, &name)),
            )
            .map_err(|e| e.in_step(&format!("train {name}")))?;
            let mae_same = evaluate_offpolicy(&policy, &va)?.mae;
            let mae_novel = evaluate_offpolicy(&policy, &fam.novel)?.mae;
            Ok(FoldOutcome {
                policy,
                report,
                mae_same,
                mae_novel,
            })
        })
        .collect::<Result<_>>()?;

    let mut model_hashes = BTreeMap::new();
    let mut best_epochs = BTreeMap::new();
    let mut table3 = Vec::new();
    let models_dir = out.join("models");
    for (f, fam) in families.iter().enumerate() {
        let family = format!("{}-{}", fam.arch.as_str(), speeds[fam.speed].0);
        let outs = &outcomes[f * cfg.train.folds..(f + 1) * cfg.train.folds];
        for (k, o) in outs.iter().enumerate() {
            let name = format!("{family}-fold{k}");
            o.policy.save(&models_dir.join(format!("{name}.json")))?;
            model_hashes.insert(name, o.policy.content_hash());
        }
        best_epochs.insert(
            family.clone(),
            outs.iter().map(|o| o.report.best_epoch).collect::<Vec<_>>(),
        );
        let other = speeds[1 - fam.speed].0;
        table3.push(MaeRow {
            arch: fam.arch,
            train_speed: speeds[fam.speed].0.into(),
            val_speed: speeds[fam.speed].0.into(),
            fold_mae: outs.iter().map(|o| o.mae_same).collect(),
        });
        table3.push(MaeRow {
            arch: fam.arch,
            train_speed: speeds[fam.speed].0.into(),
            val_speed: other.into(),
            fold_mae: outs.iter().map(|o| o.mae_novel).collect(),
        });
    }
    write_text(&out.join("table3.csv"), &table3_csv(&table3))?;

    // Full-data models train for the median of the folds' best epochs.
    let full: Vec<Policy> = families
        .par_iter()
        .enumerate()
        .map(|(f, fam)| {
            let family = format!("{}-{}", fam.arch.as_str(), speeds[fam.speed].0);
            let outs = &outcomes[f * cfg.train.folds..(f + 1) * cfg.train.folds];
            let epochs = median(outs.iter().map(|o| o.report.best_epoch.max(1)).collect());
            let mut tc = cfg.train_config(derive_seed(cfg.seed, &format!("{family}-full")));
            tc.fixed_epochs = Some(epochs);
            let all = fam.data.subset(&fam.split.retained());
            train(&policy_spec(cfg, fam.arch, 0), &all, None, &tc)
                .map(|(p, _)| p)
                .map_err(|e| e.in_step(&format!("train {family}-full")))
        })
        .collect::<Result<_>>()?;
    let mut named: Vec<(String, &Policy)> = Vec::new();
    for (fam, p) in families.iter().zip(&full) {
        let name = format!("{}-{}", fam.arch.as_str(), speeds[fam.speed].0);
        p.save(&models_dir.join(format!("{name}-full.json")))?;
        model_hashes.insert(format!("{name}-full"), p.content_hash());
        named.push((name, p));
    }

    let deploy: Vec<(String, f64)> = speeds.iter().map(|(n, v)| (n.to_string(), *v)).collect();
    let table4 = cross_speed_eval(
        &track,
        &cfg.vehicle_params(),
        &cfg.sensor_config(),
        &named,
        &deploy,
        &cfg.pipeline_config(),
        cfg.pipeline.eval_laps,
        derive_seed(cfg.seed, "crosspeed"),
    )
    .map_err(|e| e.in_step("eval-on"))?;
    write_text(&out.join("crosspeed.csv"), &crosspeed_csv(&table4))?;

    // Embedding OOD analysis on the multi-frame fold models.
    let enabled = cfg.ood.enabled;
    let ood_started = Instant::now();
    let mut ood_inputs = Vec::new();
    for (f, fam) in families
        .iter()
        .enumerate()
        .filter(|(_, fam)| fam.arch == Arch::Multi)
    {
        let outs = &outcomes[f * cfg.train.folds..(f + 1) * cfg.train.folds];
        ood_inputs.push(SpeedModels {
            speed: speeds[fam.speed].0.into(),
            folds: outs
                .iter()
                .enumerate()
                .map(|(k, o)| FoldModel {
                    policy: &o.policy,
                    train_inputs: rows(&fam.data, &fam.split.training(k)),
                    val_inputs: rows(&fam.data, &fam.split.validation(k)),
                })
                .collect(),
            novel_inputs: fam.novel.inputs.iter().map(Vec::as_slice).collect(),
        });
    }
    let ood = if enabled {
        run_ood_study(&ood_inputs, &cfg.ood_config()).map_err(|e| e.in_step("ood"))?
    } else {
        Vec::new()
    };
    let mut ood_rows = ood.clone();
    ood_rows.extend(aggregate(&ood));
    write_text(&out.join("ood.csv"), &crate::ood::write_csv(&ood_rows))?;

    // Frame-skip control: slow frames restacked as (i-4, i-2, i).
    let slow_multi = families
        .iter()
        .position(|fam| fam.arch == Arch::Multi && fam.speed == 0)
        .expect("slow multi family");
    let synth = synth_fast_by_frameskip(&recordings[0], 0).map_err(|e| e.in_step("frameskip"))?;
    let fam = &families[slow_multi];
    let outs = &outcomes[slow_multi * cfg.train.folds..(slow_multi + 1) * cfg.train.folds];
    let synth_sets: Vec<Vec<&[f64]>> = (0..cfg.train.folds)
        .map(|k| validation_only(fam, k, &synth))
        .collect();
    let fs_input = vec![SpeedModels {
        speed: "slow-frameskip".into(),
        folds: outs
            .iter()
            .enumerate()
            .map(|(k, o)| FoldModel {
                policy: &o.policy,
                train_inputs: rows(&fam.data, &fam.split.training(k)),
                val_inputs: rows(&fam.data, &fam.split.validation(k)),
            })
            .collect(),
        novel_inputs: Vec::new(),
    }];
    let frameskip = if enabled {
        frameskip_cells(&fs_input, &synth_sets, cfg).map_err(|e| e.in_step("frameskip"))?
    } else {
        Vec::new()
    };
    let mut fs_rows = frameskip.clone();
    fs_rows.extend(aggregate(&frameskip));
    write_text(&out.join("frameskip.csv"), &crate::ood::write_csv(&fs_rows))?;

    let ood_runtime_s = ood_started.elapsed().as_secs_f64();

    let fast_multi = &families
        .iter()
        .find(|fam| fam.arch == Arch::Multi && fam.speed == 1)
        .expect("fast multi family")
        .data;
    let interframe_msd = FrameStats {
        slow: stack_msd(&fam.data, cfg.sensor.ray_count),
        fast: stack_msd(fast_multi, cfg.sensor.ray_count),
        synthetic_fast: stack_msd(&synth, cfg.sensor.ray_count),
    };

    let report = SpeedStudyReport {
        seed: cfg.seed,
        config_hash: config_hash(cfg),
        track_hash: track.content_hash(),
        recording_hashes,
        model_hashes,
        table3,
        table4,
        ood,
        frameskip,
        interframe_msd,
        best_epochs,
        runtime_s: started.elapsed().as_secs_f64(),
        ood_runtime_s,
    };
    write_text(
        &out.join("speed_study.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

fn rows<'a>(ds: &'a ShiftedDataset, idx: &[usize]) -> Vec<&'a [f64]> {
    idx.iter().map(|&i| ds.inputs[i].as_slice()).collect()
}

/// Synthetic stacks whose frames all come from fold `k`'s validation frames.
fn validation_only<'a>(fam: &Family, k: usize, synth: &'a ShiftedDataset) -> Vec<&'a [f64]> {
    let mut owned = std::collections::BTreeSet::new();
    for i in fam.split.validation(k) {
        owned.extend(fam.data.frame_indices[i].iter().copied());
    }
    synth
        .frame_indices
        .iter()
        .zip(&synth.inputs)
        .filter(|(frames, _)| frames.iter().all(|f| owned.contains(f)))
        .map(|(_, x)| x.as_slice())
        .collect()
}

fn frameskip_cells(
    models: &[SpeedModels],
    synth: &[Vec<&[f64]>],
    cfg: &ExperimentConfig,
) -> Result<Vec<OodCell>> {
    let sm = &models[0];
    let mut cells = Vec::new();
    for (k, fm) in sm.folds.iter().enumerate() {
        let one = SpeedModels {
            speed: sm.speed.clone(),
            folds: vec![FoldModel {
                policy: fm.policy,
                train_inputs: fm.train_inputs.clone(),
                val_inputs: fm.val_inputs.clone(),
            }],
            novel_inputs: synth[k].clone(),
        };
        for mut c in run_ood_study(&[one], &cfg.ood_config())? {
            c.fold = k;
            cells.push(c);
        }
    }
    Ok(cells)
}

/// Mean squared difference between consecutive frames within each stack.
fn stack_msd(ds: &ShiftedDataset, rays: usize) -> f64 {
    let pairs = ds.inputs.iter().flat_map(|x| {
        let frames: Vec<&[f64]> = x.chunks(rays).collect();
        (1..frames.len())
            .map(move |j| (frames[j - 1], frames[j]))
            .collect::<Vec<_>>()
    });
    mean_sq_interframe_diff(pairs)
}

/// Runs the delay study and writes its artifacts into `out`.
pub fn run_delay_study(cfg: &ExperimentConfig, out: &Path) -> Result<DelayStudyReport> {
    let started = Instant::now();
    ensure_dir(out)?;
    write_text(&out.join("config.toml"), &cfg.to_text())?;
    let track = build_track(cfg).map_err(|e| e.in_step("track"))?;
    track
        .save(&out.join("track.json"))
        .map_err(|e| e.in_step("track"))?;
    let rec = collect_clean(
        cfg,
        &track,
        cfg.expert.delay_speed,
        cfg.expert.delay_study_duration_s,
        cfg.expert.delay_speed_jitter,
        "collect-delay",
    )
    .map_err(|e| e.in_step("collect"))?;
    rec.save(&out.join("data").join("delay"))
        .map_err(|e| e.in_step("collect"))?;
    let (lap_mean, lap_std) = lap_time_stats(&rec.manifest.clean_lap_times);
    if !lap_mean.is_finite() || !lap_std.is_finite() {
        return Err(
            Error::input("training recording has fewer than two clean laps").in_step("collect"),
        );
    }
    let threshold = lap_mean + 2.0 * lap_std;

    let shifts = cfg.sweep.shifts_ms.clone();
    let models: Vec<Policy> = shifts
        .par_iter()
        .map(|&shift| {
            let step = format!("train shift {shift}");
            let ds = pairs_for(cfg, &rec, Arch::Single, shift).map_err(|e| e.in_step(&step))?;
            let (tr, va) = holdout_split(&ds, cfg.train.holdout_fraction);
            let spec = policy_spec(cfg, Arch::Single, shift);
            let seed = derive_seed(cfg.seed, &format!("delay-shift{shift}"));
            train(&spec, &tr, va.as_ref(), &cfg.train_config(seed))
                .map(|(p, _)| p)
                .map_err(|e| e.in_step(&step))
        })
        .collect::<Result<_>>()?;
    let mut model_hashes = BTreeMap::new();
    for (shift, p) in shifts.iter().zip(&models) {
        p.save(&out.join("models").join(format!("shift{shift}.json")))?;
        model_hashes.insert(*shift, p.content_hash());
    }
    let pairs: Vec<(i64, &Policy)> = shifts.iter().copied().zip(&models).collect();
    let sweep = run_sweep(
        &track,
        &cfg.vehicle_params(),
        &cfg.sensor_config(),
        &pairs,
        &cfg.sweep.delays_ms,
        &cfg.pipeline_config(),
        &cfg.search_config(),
        threshold,
        derive_seed(cfg.seed, "sweep"),
    )
    .map_err(|e| e.in_step("sweep"))?;
    write_text(&out.join("sweep.csv"), &sweep_csv(&sweep))?;

    let report = DelayStudyReport {
        seed: cfg.seed,
        config_hash: config_hash(cfg),
        track_hash: track.content_hash(),
        recording_hash: rec.content_hash(),
        model_hashes,
        train_lap_mean_s: lap_mean,
        train_lap_std_s: lap_std,
        sweep,
        runtime_s: started.elapsed().as_secs_f64(),
    };
    write_text(
        &out.join("delay_study.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

/// Chronological split: the last `fraction` of pairs validate.
pub fn holdout_split(
    ds: &ShiftedDataset,
    fraction: f64,
) -> (ShiftedDataset, Option<ShiftedDataset>) {
    if fraction <= 0.0 {
        return (ds.clone(), None);
    }
    let cut = ((1.0 - fraction) * ds.len() as f64).round() as usize;
    // Skip pairs whose frames or labels reach across the cut.
    let last_train_label = ds.label_indices[..cut].iter().copied().max().unwrap_or(0);
    let tr: Vec<usize> = (0..cut).collect();
    let va: Vec<usize> = (cut..ds.len())
        .filter(|&i| {
            ds.frame_indices[i].iter().all(|&f| f > last_train_label)
                && ds.label_indices[i] > last_train_label
        })
        .collect();
    (
        ds.subset(&tr),
        Some(ds.subset(&va)).filter(|v| !v.is_empty()),
    )
}

pub fn fmt_time(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.3}")
    } else {
        "inf".into()
    }
}

pub fn table3_csv(rows: &[MaeRow]) -> String {
    let folds = rows.first().map_or(0, |r| r.fold_mae.len());
    let mut s = String::from("arch,train_speed,val_speed");
    for k in 0..folds {
        s.push_str(&format!(",fold{k}"));
    }
    s.push_str(",mean\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{}",
            r.arch.as_str(),
            r.train_speed,
            r.val_speed
        ));
        for m in &r.fold_mae {
            s.push_str(&format!(",{m:.6}"));
        }
        s.push_str(&format!(",{:.6}\n", r.mean()));
    }
    s
}

pub fn crosspeed_csv(cells: &[CrossSpeedCell]) -> String {
    let mut s = String::from("model,deploy_speed,deploy_speed_mps,laps_completed,infractions,per_ten_laps,inside,outside,straight\n");
    for c in cells {
        let per_ten = 10.0 * c.infractions as f64 / c.laps_completed.max(1) as f64;
        s.push_str(&format!(
            "{},{},{:.2},{},{},{:.2},{},{},{}\n",
            c.model,
            c.deploy_speed_name,
            c.deploy_speed,
            c.laps_completed,
            c.infractions,
            per_ten,
            c.inside,
            c.outside,
            c.straight
        ));
    }
    s
}

pub fn sweep_csv(sweep: &SweepReport) -> String {
    let mut cells: Vec<_> = sweep.cells.iter().collect();
    cells.sort_by(|a, b| {
        (a.shift_ms, a.added_delay_ms)
            .partial_cmp(&(b.shift_ms, b.added_delay_ms))
            .expect("finite delays")
    });
    let mut s = String::from("shift_ms,added_delay_ms,fastest_lap_s,passes_task\n");
    for c in cells {
        s.push_str(&format!(
            "{},{},{},{}\n",
            c.shift_ms,
            c.added_delay_ms,
            fmt_time(c.fastest_lap_s),
            c.passes_task
        ));
    }
    s
}

pub fn load_speed_report(dir: &Path) -> Result<SpeedStudyReport> {
    load_json(&dir.join("speed_study.json"))
}

pub fn load_delay_report(dir: &Path) -> Result<DelayStudyReport> {
    load_json(&dir.join("delay_study.json"))
}

fn load_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })
}
