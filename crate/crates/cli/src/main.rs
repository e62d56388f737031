use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use shiftdrive::closedloop::{run_laps, run_sweep, PolicyController, RunOptions};
use shiftdrive::config::ExperimentConfig;
use shiftdrive::dataset::{
    split_block, split_period, split_random, FoldAssignment, Recording, ShiftedDataset,
};
use shiftdrive::expert::lap_time_stats;
use shiftdrive::learner::{evaluate_offpolicy, train};
use shiftdrive::ood::{aggregate, run_ood_study, write_csv, FoldModel, SpeedModels};
use shiftdrive::report::{render_dir, DELAY_DIR, SPEED_DIR};
use shiftdrive::study::{self, Arch};
use shiftdrive::{Error, Policy};

const EXIT_CONFIG: u8 = 2;
const EXIT_STUDY: u8 = 3;
const EXIT_PARTIAL: u8 = 4;

#[derive(Parser)]
#[command(
    name = "shiftdrive",
    version,
    about = "Speed and delay studies for behavioral-cloning steering policies"
)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the track and write track.json.
    TrackGen,
    /// Record the expert driving at one speed.
    Collect(CollectArgs),
    /// Build label-shifted (and optionally stacked) pairs from a recording.
    Shift(ShiftArgs),
    /// Assign pairs to validation folds.
    Split(SplitArgs),
    /// Train a policy on a shifted dataset.
    Train(TrainArgs),
    /// Off-policy MAE of a policy on a dataset.
    EvalOff(EvalOffArgs),
    /// Closed-loop laps with a policy.
    EvalOn(EvalOnArgs),
    /// Fastest-safe-lap sweep over label shifts and added delays.
    Sweep(SweepArgs),
    /// Embedding OOD analysis of speed-study fold models.
    Ood(OodArgs),
    /// Full speed study into <out>/speed.
    SpeedStudy,
    /// Full delay study into <out>/delay.
    DelayStudy,
    /// Render tables from <out>/speed and <out>/delay.
    Report,
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long)]
    speed: f64,
    #[arg(long, default_value_t = 600.0)]
    duration: f64,
    /// Relative per-lap speed spread.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    /// Seconds removed before each infraction (after is taken from the config).
    #[arg(long)]
    clean_window_s: Option<f64>,
}

#[derive(Args)]
struct ShiftArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    shift_ms: i64,
    #[arg(long, value_enum, default_value_t = ArchArg::Single)]
    arch: ArchArg,
}

#[derive(Copy, Clone, ValueEnum)]
enum ArchArg {
    Single,
    Multi,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Single => Arch::Single,
            ArchArg::Multi => Arch::Multi,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum Scheme {
    Block,
    Period,
    Random80,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Scheme::Block)]
    split: Scheme,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    periods: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = ArchArg::Single)]
    arch: ArchArg,
    /// Fold file from `split`; with --fold, trains on the other folds.
    #[arg(long, requires = "fold")]
    folds_file: Option<PathBuf>,
    #[arg(long)]
    fold: Option<usize>,
}

#[derive(Args)]
struct EvalOffArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct EvalOnArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    speed: f64,
    #[arg(long, default_value_t = 10)]
    laps: usize,
    #[arg(long, default_value_t = 0.0)]
    added_delay_ms: f64,
    /// Decouple compute delay from decision rate.
    #[arg(long)]
    pipelined: bool,
    /// Write trace.jsonl.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Directory of shift<ms>.json policies.
    #[arg(long)]
    models: PathBuf,
    /// Recording whose clean laps set the task threshold.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    shifts: Option<Vec<i64>>,
    #[arg(long, value_delimiter = ',')]
    delays: Option<Vec<f64>>,
}

#[derive(Args)]
struct OodArgs {
    /// Speed-study models directory.
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    slow: PathBuf,
    #[arg(long)]
    fast: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(EXIT_CONFIG),
                _ => ExitCode::from(EXIT_STUDY),
            }
        }
    }
}

fn load_config(cli: &Cli) -> shiftdrive::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn mkdir(dir: &Path) -> shiftdrive::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> shiftdrive::Result<()> {
    if let Some(d) = path.parent() {
        mkdir(d)?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> shiftdrive::Result<ExitCode> {
    let cfg = load_config(&cli)?;
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    }
    let out = cli.out.as_path();
    match &cli.cmd {
        Cmd::TrackGen => {
            let track = study::build_track(&cfg)?;
            mkdir(out)?;
            track.save(&out.join("track.json"))?;
            println!(
                "track {} m, hash {}",
                fmt(track.total_length()),
                track.content_hash()
            );
        }
        Cmd::Collect(a) => {
            let track = study::build_track(&cfg)?;
            let mut c = cfg.clone();
            if let Some(w) = a.clean_window_s {
                c.expert.clean_before_s = w;
            }
            let rec = study::collect_clean(
                &c,
                &track,
                a.speed,
                a.duration,
                a.jitter,
                &format!("collect-{}", a.speed),
            )?;
            rec.save(out)?;
            let (m, s) = lap_time_stats(&rec.manifest.clean_lap_times);
            println!(
                "{} samples ({} removed), clean laps {} ({} ± {} s)",
                rec.len(),
                rec.manifest.removed_count,
                rec.manifest.clean_lap_times.len(),
                fmt(m),
                fmt(s)
            );
        }
        Cmd::Shift(a) => {
            let rec = Recording::load(&a.data)?;
            let ds = study::pairs_for(&cfg, &rec, a.arch.into(), a.shift_ms)?;
            ds.save(out)?;
            println!("{} pairs, {} dropped", ds.len(), ds.provenance.dropped);
        }
        Cmd::Split(a) => {
            let ds = ShiftedDataset::load(&a.data)?;
            let folds = a.folds.unwrap_or(cfg.train.folds);
            let periods = a.periods.unwrap_or(cfg.train.periods);
            let split = match a.split {
                Scheme::Block => split_block(ds.len(), folds)?,
                Scheme::Period => split_period(&ds, folds, periods)?,
                Scheme::Random80 => split_random(&ds, 5, cfg.seed)?,
            };
            mkdir(out)?;
            split.save(&out.join("folds.json"))?;
            let sizes: Vec<usize> = (0..split.folds)
                .map(|k| split.validation(k).len())
                .collect();
            println!("fold sizes {sizes:?}, {} dropped", split.dropped());
        }
        Cmd::Train(a) => {
            let ds = ShiftedDataset::load(&a.data)?;
            let spec = study::policy_spec(&cfg, a.arch.into(), ds.shift_ms);
            let (tr, va) = match (&a.folds_file, a.fold) {
                (Some(f), Some(k)) => {
                    let split = FoldAssignment::load(f)?;
                    (
                        ds.subset(&split.training(k)),
                        Some(ds.subset(&split.validation(k))),
                    )
                }
                _ => study::holdout_split(&ds, cfg.train.holdout_fraction),
            };
            let (policy, rep) = train(&spec, &tr, va.as_ref(), &cfg.train_config(cfg.seed))?;
            mkdir(out)?;
            policy.save(&out.join("policy.json"))?;
            write(
                &out.join("history.json"),
                &serde_json::to_string_pretty(&rep)?,
            )?;
            println!(
                "best epoch {} of {}, hash {}",
                rep.best_epoch,
                rep.epochs_run,
                policy.content_hash()
            );
        }
        Cmd::EvalOff(a) => {
            let policy = Policy::load(&a.model)?;
            let ds = ShiftedDataset::load(&a.data)?;
            let e = evaluate_offpolicy(&policy, &ds)?;
            println!("MAE {:.6} over {} samples", e.mae, ds.len());
        }
        Cmd::EvalOn(a) => {
            let policy = Policy::load(&a.model)?;
            let track = study::build_track(&cfg)?;
            let mut pipeline = cfg.pipeline_config().with_added_delay(a.added_delay_ms);
            pipeline.pipelined |= a.pipelined;
            let mut opts = RunOptions::new(a.speed, a.laps, cfg.seed);
            opts.trace = a.trace;
            let mut ctl = PolicyController::new(&policy);
            let r = run_laps(
                &track,
                &cfg.vehicle_params(),
                &cfg.sensor_config(),
                &mut ctl,
                &pipeline,
                &opts,
            )?;
            if a.trace {
                let mut text = String::new();
                for row in &r.trace {
                    text.push_str(&serde_json::to_string(row)?);
                    text.push('\n');
                }
                write(&out.join("trace.jsonl"), &text)?;
            }
            let cell = shiftdrive::closedloop::tally("model".into(), "run".into(), a.speed, &r);
            write(&out.join("crosspeed.csv"), &study::crosspeed_csv(&[cell]))?;
            println!(
                "{} laps, {} infractions ({} per 10 laps), belatedness {} m",
                r.laps_completed,
                r.infractions,
                fmt(r.infractions_per_ten_laps()),
                fmt(r.mean_spatial_belatedness)
            );
        }
        Cmd::Sweep(a) => {
            let track = study::build_track(&cfg)?;
            let rec = Recording::load(&a.data)?;
            let (m, s) = lap_time_stats(&rec.manifest.clean_lap_times);
            let shifts = a.shifts.clone().unwrap_or(cfg.sweep.shifts_ms.clone());
            let delays = a.delays.clone().unwrap_or(cfg.sweep.delays_ms.clone());
            let models: Vec<Policy> = shifts
                .iter()
                .map(|s| Policy::load(&a.models.join(format!("shift{s}.json"))))
                .collect::<shiftdrive::Result<_>>()?;
            let pairs: Vec<(i64, &Policy)> = shifts.iter().copied().zip(&models).collect();
            let sweep = run_sweep(
                &track,
                &cfg.vehicle_params(),
                &cfg.sensor_config(),
                &pairs,
                &delays,
                &cfg.pipeline_config(),
                &cfg.search_config(),
                m + 2.0 * s,
                study::derive_seed(cfg.seed, "sweep"),
            )?;
            let csv = study::sweep_csv(&sweep);
            write(&out.join("sweep.csv"), &csv)?;
            print!("{csv}");
        }
        Cmd::Ood(a) => {
            let slow = Recording::load(&a.slow)?;
            let fast = Recording::load(&a.fast)?;
            let recs = [("slow", &slow), ("fast", &fast)];
            let mut sets = Vec::new();
            for (i, (name, rec)) in recs.iter().enumerate() {
                let data = study::pairs_for(&cfg, rec, Arch::Multi, 0)?;
                let novel = study::pairs_for(&cfg, recs[1 - i].1, Arch::Multi, 0)?;
                let split = study::split_for(&cfg, &data, Arch::Multi)?;
                let models: Vec<Policy> = (0..cfg.train.folds)
                    .map(|k| Policy::load(&a.models.join(format!("multi-{name}-fold{k}.json"))))
                    .collect::<shiftdrive::Result<_>>()?;
                sets.push((name.to_string(), data, novel, split, models));
            }
            let inputs: Vec<SpeedModels> = sets
                .iter()
                .map(|(name, data, novel, split, models)| SpeedModels {
                    speed: name.clone(),
                    folds: models
                        .iter()
                        .enumerate()
                        .map(|(k, p)| FoldModel {
                            policy: p,
                            train_inputs: split
                                .training(k)
                                .iter()
                                .map(|&i| data.inputs[i].as_slice())
                                .collect(),
                            val_inputs: split
                                .validation(k)
                                .iter()
                                .map(|&i| data.inputs[i].as_slice())
                                .collect(),
                        })
                        .collect(),
                    novel_inputs: novel.inputs.iter().map(Vec::as_slice).collect(),
                })
                .collect();
            let mut cells = run_ood_study(&inputs, &cfg.ood_config())?;
            cells.extend(aggregate(&cells));
            let csv = write_csv(&cells);
            write(&out.join("ood.csv"), &csv)?;
            print!("{csv}");
        }
        Cmd::SpeedStudy => {
            let r = study::run_speed_study(&cfg, &out.join(SPEED_DIR))?;
            print!("{}", study::table3_csv(&r.table3));
            print!("{}", study::crosspeed_csv(&r.table4));
        }
        Cmd::DelayStudy => {
            let r = study::run_delay_study(&cfg, &out.join(DELAY_DIR))?;
            print!("{}", study::sweep_csv(&r.sweep));
        }
        Cmd::Report => {
            let r = render_dir(out);
            write(&out.join("report.md"), &r.markdown)?;
            for (name, text) in &r.csv {
                write(&out.join(name), text)?;
            }
            print!("{}", r.markdown);
            if r.is_partial() {
                for m in &r.missing {
                    eprintln!("missing {m}");
                }
                return Ok(ExitCode::from(EXIT_PARTIAL));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn fmt(v: f64) -> String {
    format!("{v:.3}")
}
