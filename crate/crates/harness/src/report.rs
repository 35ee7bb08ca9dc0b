//! Comparison tables and plot-ready CSVs from completed runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use safe_core::io::load_params;
use safe_core::trace::read_jsonl;

use crate::error::{HarnessError, Result};
use crate::run::{read_aggregate, read_seed_summary, seed_dir, AggregateSummary, SeedSummary};

/// Lower edge of the first non-trivial magnitude bin; smaller magnitudes
/// (including exact zeros) share bin 0.
pub const HISTOGRAM_FLOOR: f64 = 1e-8;
/// Log-spaced bins per decade.
pub const BINS_PER_DECADE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Magnitude histogram with bin 0 = `[0, floor)` and log-spaced bins above,
/// the last one closed so every value is counted exactly once.
pub fn magnitude_histogram(values: &[f64]) -> Vec<HistogramBin> {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let lo_exp = HISTOGRAM_FLOOR.log10();
    let hi_exp = if max > HISTOGRAM_FLOOR { max.log10().ceil().max(lo_exp + 1.0) } else { lo_exp + 1.0 };
    let nbins = ((hi_exp - lo_exp) as usize) * BINS_PER_DECADE;
    let edge = |k: usize| 10f64.powf(lo_exp + k as f64 / BINS_PER_DECADE as f64);
    let mut bins = vec![HistogramBin {
        lo: 0.0,
        hi: HISTOGRAM_FLOOR,
        count: 0,
    }];
    bins.extend((0..nbins).map(|k| HistogramBin {
        lo: edge(k),
        hi: edge(k + 1),
        count: 0,
    }));
    for v in values {
        let a = v.abs();
        let i = if a < HISTOGRAM_FLOOR {
            0
        } else {
            let k = ((a.log10() - lo_exp) * BINS_PER_DECADE as f64).floor() as usize;
            // guard against rounding at edges
            let mut k = k.min(nbins - 1);
            while k > 0 && a < bins[k + 1].lo {
                k -= 1;
            }
            while k + 1 < nbins && a >= bins[k + 2].lo {
                k += 1;
            }
            k + 1
        };
        bins[i].count += 1;
    }
    bins
}

#[derive(Clone, Debug)]
pub struct ReportOutcome {
    pub included: Vec<PathBuf>,
    pub skipped: Vec<PathBuf>,
    pub files: Vec<PathBuf>,
}

struct Run {
    dir: PathBuf,
    agg: AggregateSummary,
    seeds: Vec<(SeedSummary, PathBuf)>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| HarnessError::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `metrics.csv`, `distance.csv`, `histogram.csv`, `landscape.csv`
/// and `summary.md` into `out`. Runs without `summary.json` are skipped with
/// a warning; runs over different model/data are refused.
pub fn export_report(run_dirs: &[PathBuf], out: &Path) -> Result<ReportOutcome> {
    if run_dirs.is_empty() {
        return Err(HarnessError::Report("no run directories given".into()));
    }
    let mut runs = Vec::new();
    let mut skipped = Vec::new();
    for dir in run_dirs {
        let agg = match read_aggregate(dir) {
            Ok(a) => a,
            Err(e) => {
                log::warn!("skipping {}: {e}", dir.display());
                skipped.push(dir.clone());
                continue;
            }
        };
        let mut seeds = Vec::new();
        for &s in &agg.seeds {
            let sd = seed_dir(dir, s);
            match read_seed_summary(&sd) {
                Ok(sum) => seeds.push((sum, sd)),
                Err(e) => log::warn!("skipping seed {s} of {}: {e}", dir.display()),
            }
        }
        runs.push(Run {
            dir: dir.clone(),
            agg,
            seeds,
        });
    }
    if runs.is_empty() {
        return Err(HarnessError::Report("no completed runs among the inputs".into()));
    }
    let md = &runs[0].agg.model_data_hash;
    if let Some(bad) = runs.iter().find(|r| &r.agg.model_data_hash != md) {
        return Err(HarnessError::Report(format!(
            "{} was trained on a different model/data configuration ({} vs {md})",
            bad.dir.display(),
            bad.agg.model_data_hash
        )));
    }
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let mut files = Vec::new();

    // metrics and distance vs step
    let metrics_path = out.join("metrics.csv");
    let dist_path = out.join("distance.csv");
    let mut mw = create(&metrics_path)?;
    let mut dw = create(&dist_path)?;
    let io_m = |e| HarnessError::io(&metrics_path, e);
    let io_d = |e| HarnessError::io(&dist_path, e);
    writeln!(mw, "config_hash,method,seed,step,loss,dense_test_acc,sparse_test_acc,sparsity").map_err(io_m)?;
    writeln!(dw, "config_hash,method,seed,step,dist_to_z,dist_to_constraint,dual_update").map_err(io_d)?;
    for run in &runs {
        for (s, sd) in &run.seeds {
            let path = sd.join("trace.jsonl");
            let Ok(f) = File::open(&path) else {
                log::warn!("{} missing", path.display());
                continue;
            };
            for r in read_jsonl(BufReader::new(f))? {
                let m = |k: &str| fmt_opt(r.metrics.get(k).copied());
                writeln!(
                    mw,
                    "{},{},{},{},{},{},{},{}",
                    s.config_hash,
                    s.method,
                    s.seed,
                    r.step,
                    r.loss,
                    m("dense_test_acc"),
                    m("sparse_test_acc"),
                    r.sparsity
                )
                .map_err(io_m)?;
                writeln!(
                    dw,
                    "{},{},{},{},{},{},{}",
                    s.config_hash, s.method, s.seed, r.step, r.dist_to_z, r.dist_to_constraint, r.dual_update
                )
                .map_err(io_d)?;
            }
        }
    }
    mw.flush().map_err(|e| HarnessError::io(&metrics_path, e))?;
    dw.flush().map_err(|e| HarnessError::io(&dist_path, e))?;
    files.push(metrics_path.clone());
    files.push(dist_path.clone());

    // weight histograms
    let hist_path = out.join("histogram.csv");
    let mut hw = create(&hist_path)?;
    let io_h = |e| HarnessError::io(&hist_path, e);
    writeln!(hw, "config_hash,method,seed,which,lo,hi,count").map_err(io_h)?;
    for run in &runs {
        for (s, sd) in &run.seeds {
            for which in ["dense", "sparse"] {
                let path = sd.join(format!("{which}.safef64"));
                let x = match load_params::<f64>(&path) {
                    Ok((x, _)) => x,
                    Err(e) => {
                        log::warn!("{}: {e}", path.display());
                        continue;
                    }
                };
                for b in magnitude_histogram(x.as_slice()) {
                    writeln!(hw, "{},{},{},{which},{},{},{}", s.config_hash, s.method, s.seed, b.lo, b.hi, b.count)
                        .map_err(io_h)?;
                }
            }
        }
    }
    hw.flush().map_err(|e| HarnessError::io(&hist_path, e))?;
    files.push(hist_path.clone());

    // landscape grids, concatenated
    let land_path = out.join("landscape.csv");
    let mut lw = create(&land_path)?;
    let io_l = |e| HarnessError::io(&land_path, e);
    let mut header_written = false;
    for run in &runs {
        for (s, sd) in &run.seeds {
            let path = sd.join("landscape.csv");
            let Ok(f) = File::open(&path) else { continue };
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| HarnessError::io(&path, e))?;
                if i == 0 {
                    if !header_written {
                        writeln!(lw, "method,seed,{}", line).map_err(io_l)?;
                        header_written = true;
                    }
                    continue;
                }
                writeln!(lw, "{},{},{}", s.method, s.seed, line).map_err(io_l)?;
            }
        }
    }
    if !header_written {
        writeln!(lw, "method,seed,config_hash,alpha,loss").map_err(io_l)?;
    }
    lw.flush().map_err(|e| HarnessError::io(&land_path, e))?;
    files.push(land_path);

    let md_path = out.join("summary.md");
    fs::write(&md_path, summary_table(&runs)).map_err(|e| HarnessError::io(&md_path, e))?;
    files.push(md_path);

    Ok(ReportOutcome {
        included: runs.iter().map(|r| r.dir.clone()).collect(),
        skipped,
        files,
    })
}

fn cell(agg: &AggregateSummary, key: &str, digits: usize) -> String {
    match (agg.mean.get(key), agg.std.get(key)) {
        (Some(m), Some(s)) => format!("{m:.digits$} ± {s:.digits$}"),
        (Some(m), None) => format!("{m:.digits$}"),
        _ => "n/a".into(),
    }
}

fn summary_table(runs: &[Run]) -> String {
    let mut rows: BTreeMap<(String, String), &AggregateSummary> = BTreeMap::new();
    for r in runs {
        let sp = r.agg.target_sparsity.map_or("dense".to_string(), |s| format!("{:.1}%", 100.0 * s));
        rows.insert((r.agg.method.clone(), sp), &r.agg);
    }
    let mut s = String::new();
    writeln!(s, "| method | sparsity | seeds | dense acc | sparse acc | λ_max | stationarity gap | small-weight fraction | config |").unwrap();
    writeln!(s, "|---|---|---|---|---|---|---|---|---|").unwrap();
    for ((method, sp), agg) in rows {
        writeln!(
            s,
            "| {method} | {sp} | {} | {} | {} | {} | {} | {} | {} |",
            agg.seeds.len(),
            cell(agg, "dense_test_acc", 4),
            cell(agg, "sparse_test_acc", 4),
            cell(agg, "lambda_max", 3),
            cell(agg, "stationarity_gap", 3),
            cell(agg, "small_weight_fraction", 3),
            &agg.config_hash[..12.min(agg.config_hash.len())],
        )
        .unwrap();
    }
    s
}
