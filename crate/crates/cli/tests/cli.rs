use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 4

[expert]
speed_study_duration_s = 90.0
delay_study_duration_s = 90.0

[train]
max_epochs = 2
folds = 2
periods = 4

[pipeline]
eval_laps = 1

[sweep]
shifts_ms = [0, 50]
delays_ms = [0.0, 50.0]
v_min = 0.8
v_step = 0.4
v_max = 1.6
probe_laps = 1
resolution = 0.1
confirm_laps = 1
confirm_seeds = 1

[ood]
max_reference = 300
max_queries = 60
"#;

fn shiftdrive(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shiftdrive"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

#[test]
fn unknown_key_is_a_config_error_with_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.toml"),
        "seed = 1\n\n[train]\nlearning_rte = 0.1\n",
    )
    .unwrap();
    let o = shiftdrive(&["--config", "bad.toml", "track-gen"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("line 4"), "{}", text(&o));
}

#[test]
fn invalid_value_and_missing_file_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[train]\nfolds = 1\n").unwrap();
    let o = shiftdrive(&["--config", "bad.toml", "track-gen"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let o = shiftdrive(&["--config", "nope.toml", "track-gen"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn missing_input_is_a_study_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = shiftdrive(&["shift", "--data", "missing"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
}

#[test]
fn report_on_empty_dir_is_partial() {
    let dir = tempfile::tempdir().unwrap();
    let o = shiftdrive(&["--out", "o", "report"], dir.path());
    assert_eq!(o.status.code(), Some(4), "{}", text(&o));
    assert!(dir.path().join("o/report.md").exists());
}

#[test]
fn track_gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = shiftdrive(&["--out", "a", "track-gen"], dir.path());
    let b = shiftdrive(&["--out", "b", "track-gen"], dir.path());
    assert!(a.status.success(), "{}", text(&a));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(
        fs::read(dir.path().join("a/track.json")).unwrap(),
        fs::read(dir.path().join("b/track.json")).unwrap()
    );
    let c = shiftdrive(&["--seed", "9", "--out", "c", "track-gen"], dir.path());
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn step_by_step_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", "tiny.toml", "--jobs", "1"];
        all.extend_from_slice(args);
        let o = shiftdrive(&all, d);
        assert!(o.status.success(), "{args:?}: {}", text(&o));
        text(&o)
    };
    run(&[
        "--out",
        "rec",
        "collect",
        "--speed",
        "1.14",
        "--duration",
        "60",
    ]);
    assert!(d.join("rec/manifest.json").exists());
    run(&[
        "--out",
        "pairs",
        "shift",
        "--data",
        "rec",
        "--shift-ms",
        "50",
        "--arch",
        "multi",
    ]);
    run(&[
        "--out",
        "split",
        "split",
        "--data",
        "pairs",
        "--split",
        "period",
        "--folds",
        "2",
        "--periods",
        "4",
    ]);
    run(&[
        "--out",
        "model",
        "train",
        "--data",
        "pairs",
        "--arch",
        "multi",
        "--folds-file",
        "split/folds.json",
        "--fold",
        "0",
    ]);
    let mae = run(&[
        "eval-off",
        "--model",
        "model/policy.json",
        "--data",
        "pairs",
    ]);
    assert!(mae.starts_with("MAE "), "{mae}");
    let on = run(&[
        "--out",
        "on",
        "eval-on",
        "--model",
        "model/policy.json",
        "--speed",
        "1.0",
        "--laps",
        "1",
        "--trace",
    ]);
    assert!(on.contains("laps"), "{on}");
    assert!(
        fs::read_to_string(d.join("on/trace.jsonl"))
            .unwrap()
            .lines()
            .count()
            > 100
    );
    assert!(fs::read_to_string(d.join("on/crosspeed.csv"))
        .unwrap()
        .starts_with("model,"));
}

#[test]
fn studies_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    for cmd in ["speed-study", "delay-study"] {
        let o = shiftdrive(&["--config", "tiny.toml", "--out", "o", cmd], d);
        assert!(o.status.success(), "{cmd}: {}", text(&o));
    }
    for f in [
        "speed/table3.csv",
        "speed/crosspeed.csv",
        "speed/ood.csv",
        "speed/frameskip.csv",
        "delay/sweep.csv",
    ] {
        assert!(d.join("o").join(f).exists(), "{f}");
    }
    let o = shiftdrive(&["--out", "o", "report"], d);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let md = fs::read_to_string(d.join("o/report.md")).unwrap();
    assert!(md.contains("Speed study (seed 4)") && md.contains("Delay study (seed 4)"));
    assert!(fs::read_to_string(d.join("o/table6.csv"))
        .unwrap()
        .starts_with("total_delay_ms,shift_0,shift_50"));
}
