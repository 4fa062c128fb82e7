//! Cartesian sweeps over config keys, one isolated run per cell.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{set_path, ExperimentConfig};
use super::manifest::{RunStatus, CODE_HASH, MANIFEST_FILE, SWEEP_MANIFEST_FILE};
use super::run::{run_config, RunOptions};
use crate::error::{Error, Result};
use crate::metrics::MetricsRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Complete,
    Partial,
    /// The cell never started: bad merged config or a crash.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell: String,
    /// Relative to the sweep directory.
    pub dir: String,
    pub params: BTreeMap<String, serde_json::Value>,
    pub status: CellStatus,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub final_metrics: Option<MetricsRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub run_id: String,
    pub code_hash: String,
    pub wall_clock_s: f64,
    pub keys: Vec<String>,
    pub cells: Vec<CellRecord>,
}

impl SweepManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: not a sweep manifest: {e}", path.display())))
    }

    /// Manifest path of every cell that produced one.
    pub fn cell_manifests(&self, sweep_dir: &Path) -> Vec<PathBuf> {
        self.cells
            .iter()
            .filter(|c| c.status != CellStatus::Failed)
            .map(|c| sweep_dir.join(&c.dir).join(MANIFEST_FILE))
            .collect()
    }
}

/// One planned cell: its name, parameter assignment and merged config.
pub struct CellPlan {
    pub cell: String,
    pub params: Vec<(String, toml::Value)>,
    pub config: Result<ExperimentConfig>,
}

/// Expands the grid (keys in sorted order, then seeds) into cells.
pub fn plan_cells(cfg: &ExperimentConfig) -> Result<Vec<CellPlan>> {
    let spec = cfg.sweep.clone().unwrap_or_default();
    let mut axes: Vec<(String, Vec<toml::Value>)> = spec.grid.into_iter().collect();
    if !spec.seeds.is_empty() {
        axes.push(("train.seed".into(), spec.seeds.iter().map(|&s| toml::Value::Integer(s as i64)).collect()));
    }
    let mut base = cfg.clone();
    base.sweep = None;
    base.out_dir = None;
    let base_doc = toml::Value::try_from(&base).map_err(|e| Error::Config(format!("sweep: {e}")))?;

    let mut combos: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
    for (key, values) in &axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    let mut out = Vec::new();
    for (i, params) in combos.into_iter().enumerate() {
        let cell = format!("cell_{i:03}");
        let config = (|| {
            let mut doc = base_doc.clone();
            for (k, v) in &params {
                set_path(&mut doc, k, v.clone())?;
            }
            let mut c: ExperimentConfig =
                doc.try_into().map_err(|e: toml::de::Error| Error::Config(format!("sweep cell {cell}: {e}")))?;
            c.run_id = format!("{}-{cell}", cfg.run_id);
            c.validate()?;
            Ok(c)
        })();
        out.push(CellPlan { cell, params, config });
    }
    Ok(out)
}

fn run_cell(plan: &CellPlan, sweep_dir: &Path, opts: RunOptions) -> CellRecord {
    let params = plan.params.iter().map(|(k, v)| (k.clone(), serde_json::to_value(v).unwrap_or_default())).collect();
    let mut rec = CellRecord {
        cell: plan.cell.clone(),
        dir: plan.cell.clone(),
        params,
        status: CellStatus::Failed,
        error: None,
        final_metrics: None,
    };
    let cfg = match &plan.config {
        Ok(c) => c,
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    let dir = sweep_dir.join(&plan.cell);
    match catch_unwind(AssertUnwindSafe(|| run_config(cfg, &dir, opts))) {
        Ok(Ok(m)) => {
            rec.status = match m.status {
                RunStatus::Complete => CellStatus::Complete,
                RunStatus::Partial => CellStatus::Partial,
            };
            rec.error = m.error;
            rec.final_metrics = m.final_metrics;
        }
        Ok(Err(e)) => rec.error = Some(e.to_string()),
        Err(p) => {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            rec.error = Some(format!("panic: {}", msg.unwrap_or_default()));
        }
    }
    rec
}

/// Loads a config and sweeps it under `root`.
pub fn sweep(config_path: &Path, root: &Path, opts: RunOptions) -> Result<SweepManifest> {
    let cfg = ExperimentConfig::load(config_path)?;
    sweep_config(&cfg, &cfg.output_dir(root), opts)
}

/// Runs every cell into its own subdirectory of `dir`, `workers` at a time,
/// then writes `sweep_manifest.json` and `summary.csv`. A missing `[sweep]`
/// table is a one-cell sweep.
pub fn sweep_config(cfg: &ExperimentConfig, dir: &Path, opts: RunOptions) -> Result<SweepManifest> {
    cfg.validate()?;
    let plans = plan_cells(cfg)?;
    if dir.join(SWEEP_MANIFEST_FILE).exists() && !opts.force {
        return Err(Error::Config(format!("out_dir: {} already holds a sweep; pass --force", dir.display())));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join("sweep.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let workers = cfg.sweep.as_ref().map_or(1, |s| s.workers);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Invalid(format!("sweep worker pool: {e}")))?;
    let start = Instant::now();
    log::info!("sweep {}: {} cells on {workers} workers", cfg.run_id, plans.len());
    let cells: Vec<CellRecord> = pool.install(|| plans.par_iter().map(|p| run_cell(p, dir, opts)).collect());
    let keys = plans.first().map(|p| p.params.iter().map(|(k, _)| k.clone()).collect()).unwrap_or_default();
    let manifest = SweepManifest {
        run_id: cfg.run_id.clone(),
        code_hash: CODE_HASH.to_string(),
        wall_clock_s: start.elapsed().as_secs_f64(),
        keys,
        cells,
    };
    let p = dir.join(SWEEP_MANIFEST_FILE);
    fs::write(&p, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&p, e))?;
    write_summary(&dir.join("summary.csv"), &manifest)?;
    Ok(manifest)
}

fn param_text(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One row per cell: parameters, status and final accuracies.
pub fn write_summary(path: &Path, m: &SweepManifest) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["cell".to_string()];
    header.extend(m.keys.iter().cloned());
    header.extend(
        ["status", "epoch", "acc_single_pos", "acc_seen_pair_cfg", "acc_unseen_pair", "acc_label_set", "error"]
            .map(String::from),
    );
    w.write_record(&header)?;
    for c in &m.cells {
        let mut rec = vec![c.cell.clone()];
        rec.extend(m.keys.iter().map(|k| c.params.get(k).map(param_text).unwrap_or_default()));
        rec.push(serde_json::to_value(c.status)?.as_str().unwrap_or_default().to_string());
        match &c.final_metrics {
            Some(f) => rec.extend([
                f.epoch.to_string(),
                f.acc_single_pos.to_string(),
                f.acc_seen_pair_cfg.to_string(),
                f.acc_unseen_pair.to_string(),
                f.acc_label_set.to_string(),
            ]),
            None => rec.extend(std::iter::repeat_n(String::new(), 5)),
        }
        rec.push(c.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
