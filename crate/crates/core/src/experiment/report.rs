//! Result files: per-episode CSV, learning-curve table, summary and a
//! gnuplot script.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{ExperimentConfig, RunRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub runs: PathBuf,
    pub curves: PathBuf,
    pub summary: PathBuf,
    pub plot: PathBuf,
}

/// Fraction of records that succeeded. Failed seeds count as failures;
/// no records gives `0.0`.
pub fn success_rate(records: &[RunRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.success).count() as f64 / records.len() as f64
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

pub fn format_mean_std(xs: &[f64]) -> String {
    let (m, s) = mean_std(xs);
    format!("{m:.2} ± {s:.2}")
}

/// The best `ceil(frac·n)` completed runs by final cost.
pub fn top_fraction(records: &[RunRecord], frac: f64) -> Vec<&RunRecord> {
    let mut ok: Vec<&RunRecord> = records.iter().filter(|r| r.final_cost().is_some()).collect();
    ok.sort_by(|a, b| a.final_cost().unwrap().total_cmp(&b.final_cost().unwrap()).then(a.seed.cmp(&b.seed)));
    let n = (frac * ok.len() as f64).ceil() as usize;
    ok.truncate(n);
    ok
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn episode_column(records: &[&RunRecord], e: usize) -> Vec<f64> {
    let mut v: Vec<f64> = records.iter().filter_map(|r| r.episode_costs.get(e).copied()).collect();
    v.sort_by(f64::total_cmp);
    v
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Serde(format!("{}: {other:?}", path.display())),
    }
}

fn write_runs(path: &Path, records: &[RunRecord], threshold: f64) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["seed", "episode", "mean_cost", "success"])
        .map_err(|e| csv_err(path, e))?;
    for r in records {
        for (e, c) in r.episode_costs.iter().enumerate() {
            w.write_record([
                r.seed.to_string(),
                e.to_string(),
                c.to_string(),
                u8::from(*c < threshold).to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_curves(path: &Path, records: &[RunRecord]) -> Result<()> {
    let all: Vec<&RunRecord> = records.iter().collect();
    let top = top_fraction(records, 0.4);
    let n_ep = records.iter().map(|r| r.episode_costs.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record([
        "episode", "n", "mean", "q25", "median", "q75", "top_n", "top_mean", "top_q25", "top_q75",
    ])
    .map_err(|e| csv_err(path, e))?;
    for e in 0..n_ep {
        let a = episode_column(&all, e);
        let t = episode_column(&top, e);
        let row = [
            e.to_string(),
            a.len().to_string(),
            mean_std(&a).0.to_string(),
            quantile(&a, 0.25).to_string(),
            quantile(&a, 0.5).to_string(),
            quantile(&a, 0.75).to_string(),
            t.len().to_string(),
            mean_std(&t).0.to_string(),
            quantile(&t, 0.25).to_string(),
            quantile(&t, 0.75).to_string(),
        ];
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn summary_text(cfg: &ExperimentConfig, records: &[RunRecord]) -> String {
    let mut s = String::new();
    let finals: Vec<f64> = records.iter().filter_map(RunRecord::final_cost).collect();
    let top: Vec<f64> = top_fraction(records, 0.4).iter().filter_map(|r| r.final_cost()).collect();
    let _ = writeln!(s, "config_hash: {}", cfg.hash());
    let _ = writeln!(
        s,
        "task: {:?}  cost: {:?}  k: {}  estimator: {}  particles: {}  grad_steps: {}  noise_mult: {}  resample: {}",
        cfg.task, cfg.cost, cfg.k, cfg.estimator, cfg.particles, cfg.grad_steps, cfg.noise_mult, cfg.resample
    );
    let _ = writeln!(s, "seeds: {}", records.len());
    let _ = writeln!(
        s,
        "success rate (final cost < {}): {:.2}",
        cfg.success_threshold,
        success_rate(records)
    );
    if !finals.is_empty() {
        let _ = writeln!(s, "final cost, all runs: {}", format_mean_std(&finals));
        let _ = writeln!(s, "final cost, top 40%: {}", format_mean_std(&top));
    }
    for r in records {
        match &r.error {
            Some(e) => {
                let _ = writeln!(s, "seed {}: FAILED: {e}", r.seed);
            }
            None => {
                let _ = writeln!(
                    s,
                    "seed {}: final {:.3}  success {}  wall {:.1}s",
                    r.seed,
                    r.final_cost().unwrap_or(f64::NAN),
                    r.success,
                    r.wall_clock_s
                );
            }
        }
    }
    s
}

const PLOT: &str = r##"# gnuplot -p plot.gp
set datafile separator ","
set key autotitle columnhead
set xlabel "episode"
set ylabel "evaluated cost"
set multiplot layout 1,2
set title "all runs"
plot "curves.csv" using 1:4:6 with filledcurves lc rgb "#c0d0f0" title "quartiles", \
     "" using 1:3 with linespoints lc rgb "#2040a0" title "mean"
set title "top 40% of runs"
plot "curves.csv" using 1:9:10 with filledcurves lc rgb "#f0d0c0" title "quartiles", \
     "" using 1:8 with linespoints lc rgb "#a04020" title "mean"
unset multiplot
"##;

/// Write `runs.csv`, `curves.csv`, `summary.txt` and `plot.gp` into `out`.
pub fn emit_report(cfg: &ExperimentConfig, records: &[RunRecord], out: &Path) -> Result<ReportPaths> {
    if records.is_empty() {
        return Err(Error::Config("no run records to report".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let paths = ReportPaths {
        runs: out.join("runs.csv"),
        curves: out.join("curves.csv"),
        summary: out.join("summary.txt"),
        plot: out.join("plot.gp"),
    };
    write_runs(&paths.runs, records, cfg.success_threshold)?;
    write_curves(&paths.curves, records)?;
    write_file(&paths.summary, &summary_text(cfg, records))?;
    write_file(&paths.plot, PLOT)?;
    Ok(paths)
}
