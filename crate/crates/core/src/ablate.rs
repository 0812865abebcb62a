//! Sequential training and evaluation of the ablation matrix, with a
//! comparison table.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_state, write_eval_outputs, EvalOptions, EvalSummary, PoseBin};
use crate::report::{emit_report, ReportSources};
use crate::train::{build_ablation_matrix, run, RunOptions, TrainConfig, TrainContext};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    pub run_dir: PathBuf,
    pub config: TrainConfig,
    pub summary: EvalSummary,
    /// Mean generator-side pose-regression loss over the last logged steps, when that baseline is on.
    pub final_pose_reg: Option<f64>,
}

pub const COMPARISON_HEADER: [&str; 14] = [
    "config",
    "pose_branch",
    "pose_matching",
    "pose_regression",
    "aups",
    "identity_reg",
    "density_reg",
    "fid_near_frontal",
    "fid_steep",
    "fid_extrapolated",
    "steep_over_frontal",
    "depth_error",
    "pose_auc",
    "final_pose_reg",
];

impl AblationResult {
    pub fn row(&self) -> Vec<String> {
        let c = &self.config;
        let fid = |b| self.summary.fid(b).map_or(String::new(), |v| v.to_string());
        let ratio = match (self.summary.fid(PoseBin::Steep), self.summary.fid(PoseBin::NearFrontal)) {
            (Some(s), Some(f)) => (s / f).to_string(),
            _ => String::new(),
        };
        vec![
            self.name.clone(),
            c.use_pose_branch.to_string(),
            c.use_pose_matching.to_string(),
            c.use_pose_regression_baseline.to_string(),
            c.use_aups.to_string(),
            c.use_identity_reg.to_string(),
            c.use_density_reg.to_string(),
            fid(PoseBin::NearFrontal),
            fid(PoseBin::Steep),
            fid(PoseBin::Extrapolated),
            ratio,
            self.summary.depth_error.to_string(),
            self.summary.pose_auc.map_or(String::new(), |v| v.to_string()),
            self.final_pose_reg.map_or(String::new(), |v| v.to_string()),
        ]
    }
}

/// Trains every configuration of the matrix under `root/<name>`, evaluates
/// the final weights, and writes `comparison.csv` and `comparison.md` in `root`.
pub fn run_ablation(base: &TrainConfig, root: &Path, eval: &EvalOptions) -> Result<Vec<AblationResult>> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut results = Vec::new();
    for (name, cfg) in build_ablation_matrix(base) {
        log::info!("ablation {name}: {} steps", cfg.total_steps);
        let run_dir = root.join(&name);
        let ctx = TrainContext::from_dataset(cfg.clone())?;
        let outcome = run(&cfg, &ctx, &RunOptions { run_dir: run_dir.clone(), ..Default::default() }, None)?;
        let summary = evaluate_state(&outcome.state, &ctx.samples, eval)?;
        let eval_dir = run_dir.join("eval");
        write_eval_outputs(&eval_dir, &summary)?;
        emit_report(&eval_dir, &ReportSources { run_dir: Some(run_dir.clone()), dataset: Some(cfg.dataset.clone()), seed: eval.seed, ..Default::default() })?;
        let tail = &outcome.history[outcome.history.len().saturating_sub(100)..];
        let regs: Vec<f64> = tail.iter().filter_map(|r| r.pose_reg_gen).collect();
        let final_pose_reg = (!regs.is_empty()).then(|| regs.iter().sum::<f64>() / regs.len() as f64);
        results.push(AblationResult { name, run_dir, config: cfg, summary, final_pose_reg });
    }
    write_comparison(root, &results)?;
    Ok(results)
}

pub fn write_comparison(root: &Path, results: &[AblationResult]) -> Result<()> {
    let path = root.join("comparison.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e))?;
    w.write_record(COMPARISON_HEADER).map_err(|e| Error::format(&path, e))?;
    for r in results {
        w.write_record(r.row()).map_err(|e| Error::format(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let mut md = format!("| {} |\n|{}\n", COMPARISON_HEADER.join(" | "), "---|".repeat(COMPARISON_HEADER.len()));
    for r in results {
        md.push_str(&format!("| {} |\n", r.row().join(" | ")));
    }
    let path = root.join("comparison.md");
    fs::write(&path, md).map_err(|e| Error::io(&path, e))
}
