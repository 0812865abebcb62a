//! Batch report: plots, yaw-sweep strips and summary tables built from the
//! CSV files of a run and of an evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::camera::CameraPose;
use crate::data::{load_dataset, write_png};
use crate::error::{Error, Result};
use crate::eval::{strip, yaw_sweep};
use crate::plot::{bar_chart, histogram, line_chart};
use crate::train::load_checkpoint;

pub const DEFAULT_SWEEP_YAWS_DEG: [f64; 7] = [-60.0, -45.0, -22.5, 0.0, 22.5, 45.0, 60.0];
const PLOT_W: u32 = 480;
const PLOT_H: u32 = 300;
const HIST_CELLS: usize = 36;
/// Rows averaged for the final-loss columns of the summary.
const FINAL_WINDOW: usize = 100;

/// Inputs for a report. Missing pieces are skipped.
#[derive(Debug, Clone, Default)]
pub struct ReportSources {
    /// Directory holding `losses.csv`, `fake_poses.csv` and `checkpoints/`.
    pub run_dir: Option<PathBuf>,
    /// Checkpoints to sweep; when empty, every checkpoint under the run directory.
    pub checkpoints: Vec<PathBuf>,
    /// Dataset directory or manifest, for the real-pose histogram.
    pub dataset: Option<PathBuf>,
    pub sweep_yaws_deg: Vec<f64>,
    pub seed: u64,
}

/// Header and rows of a CSV file.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let header = r.headers().map_err(|e| Error::format(path, e))?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()).map_err(|e| Error::format(path, e)))
        .collect::<Result<Vec<Vec<String>>>>()?;
    Ok((header, rows))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    w.write_record(header).map_err(|e| Error::format(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Blank cells (terms not computed on that step) read as NaN.
fn parse(path: &Path, s: &str) -> Result<f64> {
    if s.is_empty() {
        return Ok(f64::NAN);
    }
    s.parse().map_err(|_| Error::format(path, format!("not a number: {s:?}")))
}

fn save_png(path: &Path, img: &image::RgbImage) -> Result<()> {
    img.save(path).map_err(|e| Error::format(path, e))
}

/// Latest value of every metric in a long-form `step,metric,value` file.
pub fn latest_metrics(path: &Path) -> Result<BTreeMap<String, (u64, f64)>> {
    let (_, rows) = read_csv(path)?;
    let mut out: BTreeMap<String, (u64, f64)> = BTreeMap::new();
    for row in rows {
        let [step, name, value] = row.as_slice() else {
            return Err(Error::format(path, "expected step,metric,value"));
        };
        let step: u64 = step.parse().map_err(|_| Error::format(path, format!("bad step {step:?}")))?;
        let value = parse(path, value)?;
        if out.get(name).is_none_or(|(s, _)| step >= *s) {
            out.insert(name.clone(), (step, value));
        }
    }
    Ok(out)
}

fn checkpoints_in(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = run_dir.join("checkpoints");
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut v: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
        .collect();
    v.sort();
    Ok(v)
}

/// Writes the report into `out` and returns the files written. Re-running on
/// unchanged inputs rewrites identical files.
pub fn emit_report(out: &Path, src: &ReportSources) -> Result<Vec<PathBuf>> {
    let data_dir = out.join("plot_data");
    fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    let mut written = Vec::new();
    let mut summary: Vec<(String, String)> = Vec::new();
    let mut md = String::from("# Run report\n\n");

    let run_dir = src.run_dir.as_deref();
    let losses = run_dir.map(|d| d.join("losses.csv")).filter(|p| p.exists());
    if let Some(path) = losses {
        let (header, rows) = read_csv(&path)?;
        let table = rows
            .iter()
            .map(|r| r.iter().map(|c| parse(&path, c)).collect::<Result<Vec<f64>>>())
            .collect::<Result<Vec<_>>>()?;
        // every series scaled to [0, 1] so they share one axis
        let series: Vec<Vec<(f64, f64)>> = (1..header.len())
            .map(|c| {
                let ys: Vec<f64> = table.iter().map(|r| r[c]).collect();
                let lo = ys.iter().copied().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
                let hi = ys.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
                let span = if hi > lo { hi - lo } else { 1.0 };
                table.iter().map(|r| (r[0], (r[c] - lo) / span)).collect()
            })
            .collect();
        let p = out.join("loss_curves.png");
        save_png(&p, &line_chart(&series, PLOT_W, PLOT_H))?;
        written.push(p);
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let p = data_dir.join("loss_curves.csv");
        write_csv(&p, &header_refs, &rows)?;
        written.push(p);

        let window = &table[table.len().saturating_sub(FINAL_WINDOW)..];
        if let Some(last) = table.last() {
            summary.push(("final_step".into(), (last[0] as u64).to_string()));
        }
        md.push_str("## Losses\n\n![loss curves](loss_curves.png)\n\nEach curve is min-max scaled. Means over the last rows:\n\n| loss | value |\n|---|---|\n");
        for (c, name) in header.iter().enumerate().skip(1) {
            let vals: Vec<f64> = window.iter().map(|r| r[c]).filter(|v| v.is_finite()).collect();
            let mean = if vals.is_empty() { f64::NAN } else { vals.iter().sum::<f64>() / vals.len() as f64 };
            summary.push((format!("final_{name}"), format!("{mean}")));
            md.push_str(&format!("| {name} | {mean:.5} |\n"));
        }
        md.push('\n');
    }

    let bins_csv = out.join("bins.csv");
    if bins_csv.exists() {
        let (_, rows) = read_csv(&bins_csv)?;
        let fids: Vec<f64> = rows.iter().map(|r| parse(&bins_csv, r.get(4).map_or("", String::as_str))).collect::<Result<_>>()?;
        let p = out.join("bins_fid.png");
        save_png(&p, &bar_chart(&fids.iter().map(|&f| vec![f]).collect::<Vec<_>>(), PLOT_W, PLOT_H))?;
        written.push(p);
        let p = data_dir.join("bins_fid.csv");
        let plot_rows: Vec<Vec<String>> = rows.iter().zip(&fids).map(|(r, f)| vec![r[0].clone(), f.to_string()]).collect();
        write_csv(&p, &["bin", "fid"], &plot_rows)?;
        written.push(p);
        md.push_str("## Image quality by yaw\n\n![fid by bin](bins_fid.png)\n\n| bin | yaw range (deg) | n | fid |\n|---|---|---|---|\n");
        for r in &rows {
            md.push_str(&format!("| {} | {}..{} | {} | {} |\n", r[0], r[1], r[2], r[3], r[4]));
        }
        md.push('\n');
    }

    let dataset_yaws: Vec<f64> = match &src.dataset {
        Some(d) => load_dataset(d)?.poses().iter().map(|p: &CameraPose| p.yaw.to_degrees()).collect(),
        None => Vec::new(),
    };
    let fake_poses = run_dir.map(|d| d.join("fake_poses.csv")).filter(|p| p.exists());
    let mut fake_yaws = Vec::new();
    if let Some(path) = &fake_poses {
        let (_, rows) = read_csv(path)?;
        for r in rows.iter().filter(|r| r.get(1).is_some_and(|u| u == "adversarial")) {
            fake_yaws.push(parse(path, r.get(3).map_or("", String::as_str))?.to_degrees());
        }
    }
    if !dataset_yaws.is_empty() || !fake_yaws.is_empty() {
        let real = histogram(&dataset_yaws, -90.0, 90.0, HIST_CELLS);
        let fake = histogram(&fake_yaws, -90.0, 90.0, HIST_CELLS);
        let frac = |c: &[u64], n: usize| -> Vec<f64> { c.iter().map(|&k| k as f64 / n.max(1) as f64).collect() };
        let (rf, ff) = (frac(&real, dataset_yaws.len()), frac(&fake, fake_yaws.len()));
        let groups: Vec<Vec<f64>> = rf.iter().zip(&ff).map(|(&a, &b)| vec![a, b]).collect();
        let p = out.join("pose_hist.png");
        save_png(&p, &bar_chart(&groups, PLOT_W, PLOT_H))?;
        written.push(p);
        let width = 180.0 / HIST_CELLS as f64;
        let rows: Vec<Vec<String>> = (0..HIST_CELLS)
            .map(|k| vec![(-90.0 + k as f64 * width).to_string(), (-90.0 + (k + 1) as f64 * width).to_string(), rf[k].to_string(), ff[k].to_string()])
            .collect();
        let p = data_dir.join("pose_hist.csv");
        write_csv(&p, &["yaw_lo_deg", "yaw_hi_deg", "dataset_fraction", "fake_fraction"], &rows)?;
        written.push(p);
        md.push_str("## Yaw distribution\n\n![yaw histogram](pose_hist.png)\n\nBlue: dataset poses. Orange: poses used for adversarial fakes.\n\n");
    }

    let checkpoints = if src.checkpoints.is_empty() { run_dir.map(checkpoints_in).transpose()?.unwrap_or_default() } else { src.checkpoints.clone() };
    if !checkpoints.is_empty() {
        let yaws = if src.sweep_yaws_deg.is_empty() { DEFAULT_SWEEP_YAWS_DEG.to_vec() } else { src.sweep_yaws_deg.clone() };
        let sweep_dir = out.join("sweeps");
        fs::create_dir_all(&sweep_dir).map_err(|e| Error::io(&sweep_dir, e))?;
        md.push_str(&format!("## Yaw sweeps\n\nYaw (deg): {yaws:?}, pitch 0, one latent per strip.\n\n"));
        for ckpt in &checkpoints {
            let (_, state) = load_checkpoint(ckpt)?;
            let panels = yaw_sweep(&state.gen, &yaws, src.seed)?;
            let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
            let p = sweep_dir.join(format!("{stem}.png"));
            write_png(&p, &strip(&panels)?)?;
            md.push_str(&format!("![{stem}](sweeps/{stem}.png)\n\n"));
            written.push(p);
        }
    }

    let metrics_csv = out.join("metrics.csv");
    if metrics_csv.exists() {
        let latest = latest_metrics(&metrics_csv)?;
        md.push_str("## Metrics\n\nQuality distances use a fixed random embedding; they compare runs of this code only.\n\n| metric | step | value |\n|---|---|---|\n");
        for (name, (step, v)) in &latest {
            summary.push((name.clone(), v.to_string()));
            md.push_str(&format!("| {name} | {step} | {v:.5} |\n"));
        }
        md.push('\n');
    }

    let p = out.join("summary.csv");
    write_csv(&p, &["metric", "value"], &summary.into_iter().map(|(k, v)| vec![k, v]).collect::<Vec<_>>())?;
    written.push(p);
    let p = out.join("report.md");
    fs::write(&p, md).map_err(|e| Error::io(&p, e))?;
    written.push(p);
    Ok(written)
}
