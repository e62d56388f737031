//! Renders study artifacts as Markdown tables and CSV grids.
//!
//! Passing sweep cells carry a `*`; cells where the model cannot drive show `inf`.

use std::fmt::Write as _;
use std::path::Path;

use crate::closedloop::SweepReport;
use crate::error::Result;
use crate::ood::aggregate;
use crate::study::{
    fmt_time, load_delay_report, load_speed_report, DelayStudyReport, SpeedStudyReport,
};

pub const SPEED_DIR: &str = "speed";
pub const DELAY_DIR: &str = "delay";

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub markdown: String,
    /// CSV files to write next to the Markdown, by file name.
    pub csv: Vec<(String, String)>,
    /// Studies or artifacts that could not be read.
    pub missing: Vec<String>,
}

impl Rendered {
    pub fn is_partial(&self) -> bool {
        !self.missing.is_empty()
    }
}

/// Reads `<dir>/speed` and `<dir>/delay` and renders whatever is present.
pub fn render_dir(dir: &Path) -> Rendered {
    let speed = load_speed_report(&dir.join(SPEED_DIR));
    let delay = load_delay_report(&dir.join(DELAY_DIR));
    let mut missing = Vec::new();
    let speed = keep(speed, "speed study", &mut missing);
    let delay = keep(delay, "delay study", &mut missing);
    let mut r = render(speed.as_ref(), delay.as_ref());
    r.missing = missing;
    if r.is_partial() {
        let mut note = String::from("\n## Missing\n\n");
        for m in &r.missing {
            let _ = writeln!(note, "- {m}");
        }
        r.markdown.push_str(&note);
    }
    r
}

fn keep<T>(r: Result<T>, name: &str, missing: &mut Vec<String>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            missing.push(format!("{name}: {e}"));
            None
        }
    }
}

pub fn render(speed: Option<&SpeedStudyReport>, delay: Option<&DelayStudyReport>) -> Rendered {
    let mut md = String::from("# Study report\n");
    let mut csv = Vec::new();
    if let Some(s) = speed {
        md.push_str(&speed_markdown(s));
    }
    if let Some(d) = delay {
        md.push_str(&delay_markdown(d));
        csv.push(("table5.csv".into(), pass_grid_csv(&d.sweep, false)));
        csv.push(("table6.csv".into(), lap_grid_csv(&d.sweep, false)));
        csv.push(("appendix.csv".into(), lap_grid_csv(&d.sweep, true)));
    }
    Rendered {
        markdown: md,
        csv,
        missing: Vec::new(),
    }
}

fn speed_markdown(s: &SpeedStudyReport) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "\n## Speed study (seed {})\n", s.seed);
    let _ = writeln!(md, "Off-policy MAE, mean over folds.\n");
    let _ = writeln!(md, "| model | trained | validated | MAE | folds |");
    let _ = writeln!(md, "|---|---|---|---|---|");
    for r in &s.table3 {
        let folds: Vec<String> = r.fold_mae.iter().map(|m| format!("{m:.4}")).collect();
        let _ = writeln!(
            md,
            "| {} | {} | {} | {:.4} | {} |",
            r.arch.as_str(),
            r.train_speed,
            r.val_speed,
            r.mean(),
            folds.join(" ")
        );
    }
    let _ = writeln!(md, "\nInfractions per ten laps and wall sides.\n");
    let _ = writeln!(
        md,
        "| model | deployed | per 10 laps | inside | outside | straight |"
    );
    let _ = writeln!(md, "|---|---|---|---|---|---|");
    for c in &s.table4 {
        let per_ten = 10.0 * c.infractions as f64 / c.laps_completed.max(1) as f64;
        let _ = writeln!(
            md,
            "| {} | {} | {:.1} | {} | {} | {} |",
            c.model, c.deploy_speed_name, per_ten, c.inside, c.outside, c.straight
        );
    }
    let _ = writeln!(
        md,
        "\nMean five-nearest-neighbor distance and AUROC, averaged over folds.\n"
    );
    let _ = writeln!(md, "| trained | metric | location | same | novel | AUROC |");
    let _ = writeln!(md, "|---|---|---|---|---|---|");
    for c in aggregate(&s.ood)
        .iter()
        .chain(aggregate(&s.frameskip).iter())
    {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {:.3} | {:.3} | {:.3} |",
            c.speed,
            c.metric.as_str(),
            c.location.as_str(),
            c.mean_dist_same,
            c.mean_dist_novel,
            c.auroc
        );
    }
    let f = &s.interframe_msd;
    let _ = writeln!(
        md,
        "\nInter-frame mean squared difference: slow {:.5}, fast {:.5}, frame-skipped slow {:.5}.",
        f.slow, f.fast, f.synthetic_fast
    );
    let _ = writeln!(
        md,
        "\nConfig hash `{}`, track hash `{}`.",
        s.config_hash, s.track_hash
    );
    md
}

fn delay_markdown(d: &DelayStudyReport) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "\n## Delay study (seed {})\n", d.seed);
    let _ = writeln!(
        md,
        "Training laps {:.3} ± {:.3} s; task threshold {:.3} s.\n",
        d.train_lap_mean_s, d.train_lap_std_s, d.sweep.threshold_s
    );
    let _ = writeln!(md, "Task passed (`*`).\n");
    md.push_str(&grid_markdown(&d.sweep, false, |c| {
        if c.passes_task {
            "*".into()
        } else {
            String::new()
        }
    }));
    let _ = writeln!(md, "\nFastest safe lap time (s).\n");
    md.push_str(&grid_markdown(&d.sweep, false, cell_text));
    let _ = writeln!(md, "\nAll shifts, including negative ones.\n");
    md.push_str(&grid_markdown(&d.sweep, true, cell_text));
    let _ = writeln!(
        md,
        "\nConfig hash `{}`, track hash `{}`.",
        d.config_hash, d.track_hash
    );
    md
}

fn cell_text(c: &crate::closedloop::SweepCell) -> String {
    let t = fmt_time(c.fastest_lap_s);
    if c.passes_task {
        format!("{t}*")
    } else {
        t
    }
}

fn axes(sweep: &SweepReport, negative: bool) -> (Vec<i64>, Vec<(f64, f64)>) {
    let mut shifts: Vec<i64> = sweep
        .cells
        .iter()
        .map(|c| c.shift_ms)
        .filter(|s| negative || *s >= 0)
        .collect();
    shifts.sort_unstable();
    shifts.dedup();
    let mut delays: Vec<(f64, f64)> = sweep
        .cells
        .iter()
        .map(|c| (c.added_delay_ms, c.total_delay_ms))
        .collect();
    delays.sort_by(|a, b| a.0.total_cmp(&b.0));
    delays.dedup_by(|a, b| a.0 == b.0);
    (shifts, delays)
}

fn grid_markdown(
    sweep: &SweepReport,
    negative: bool,
    text: impl Fn(&crate::closedloop::SweepCell) -> String,
) -> String {
    let (shifts, delays) = axes(sweep, negative);
    let mut md = String::from("| compute ms |");
    for s in &shifts {
        let _ = write!(md, " {s:+} ms |");
    }
    md.push_str("\n|---|");
    md.push_str(&"---|".repeat(shifts.len()));
    md.push('\n');
    for (added, total) in delays {
        let _ = write!(md, "| {total:.0} |");
        for &s in &shifts {
            let cell = sweep
                .cell(s, added)
                .map(&text)
                .unwrap_or_else(|| "?".into());
            let _ = write!(md, " {cell} |");
        }
        md.push('\n');
    }
    md
}

pub fn pass_grid_csv(sweep: &SweepReport, negative: bool) -> String {
    grid_csv(sweep, negative, |c| c.passes_task.to_string())
}

pub fn lap_grid_csv(sweep: &SweepReport, negative: bool) -> String {
    grid_csv(sweep, negative, cell_text)
}

fn grid_csv(
    sweep: &SweepReport,
    negative: bool,
    text: impl Fn(&crate::closedloop::SweepCell) -> String,
) -> String {
    let (shifts, delays) = axes(sweep, negative);
    let mut s = String::from("total_delay_ms");
    for sh in &shifts {
        let _ = write!(s, ",shift_{sh}");
    }
    s.push('\n');
    for (added, total) in delays {
        let _ = write!(s, "{total}");
        for &sh in &shifts {
            let cell = sweep.cell(sh, added).map(&text).unwrap_or_default();
            let _ = write!(s, ",{cell}");
        }
        s.push('\n');
    }
    s
}
