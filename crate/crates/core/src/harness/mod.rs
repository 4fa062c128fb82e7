//! Experiment plumbing: TOML configs, runs, sweeps, manifests and figure
//! bundles for the plotting side.

mod config;
mod export;
mod manifest;
mod run;
mod sweep;

pub use config::{
    set_path, AnalysisToggles, EncoderOverride, ExperimentConfig, ModelPreset, ModelSpec, PruneSpec, SweepSpec,
    DEFAULT_ABLATIONS, TOGGLE_NAMES,
};
pub use export::{export, figure_ids, BundleFile, FigureBundle, SourceRun, FIGURES};
pub use manifest::{
    audit, collect_artifacts, list_files, Artifact, RunKind, RunManifest, RunStatus, Seeds, CODE_HASH, MANIFEST_FILE,
    SWEEP_MANIFEST_FILE,
};
pub use run::{analyze, config_for_checkpoint, output_root, run, run_config, RunOptions, OUT_ENV};
pub use sweep::{plan_cells, sweep, sweep_config, write_summary, CellPlan, CellRecord, CellStatus, SweepManifest};
