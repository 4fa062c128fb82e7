use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn relclip(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relclip"))
        .args(args)
        .env("RELCLIP_OUT", out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn quick_config(dir: &Path, extra: &str) -> PathBuf {
    let text = std::fs::read_to_string(repo_root().join("configs/smoke.toml")).unwrap();
    let text = text.replace("epochs = 20", "epochs = 4").replace("extra_epochs = 5", "extra_epochs = 1");
    let p = dir.join("quick.toml");
    std::fs::write(&p, format!("{text}{extra}")).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_export_and_analyze_round_trip_through_the_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), "");
    let o = relclip(tmp.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run_dir = tmp.path().join("smoke");
    assert!(run_dir.join("manifest.json").is_file());

    // Same run again refuses to clobber, then succeeds with --force.
    let o = relclip(tmp.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--force"));
    let o = relclip(tmp.path(), &["run", cfg.to_str().unwrap(), "--force"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let manifest = run_dir.join("manifest.json");
    let o = relclip(tmp.path(), &["export", manifest.to_str().unwrap(), "--figure", "fig4c_scatter"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(run_dir.join("figures/fig4c_scatter/scatter.csv").is_file());

    let o = relclip(tmp.path(), &["export", manifest.to_str().unwrap(), "--figure", "figX"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fig3_similarity"));
    let o = relclip(tmp.path(), &["export", manifest.to_str().unwrap(), "--figure", "figS_rope"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("rerun with toggle `rope`"));

    let ckpt = run_dir.join("final.ckpt");
    let o = relclip(tmp.path(), &["analyze", ckpt.to_str().unwrap(), "--toggles", "head_bias,rotation"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(run_dir.join("analyze_final/analysis/head_bias_summary.csv").is_file());
    let o = relclip(tmp.path(), &["analyze", ckpt.to_str().unwrap(), "--toggles", "nonsense"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn exit_codes_separate_config_errors_from_runtime_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml");
    assert_eq!(relclip(tmp.path(), &["run", missing.to_str().unwrap()]).status.code(), Some(1));

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "run_id = \"x\"\n[dataset]\nn_tot = 6\nn_pair = 9\nn2 = 5\n").unwrap();
    let o = relclip(tmp.path(), &["run", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dataset.n_pair"));

    let diverge = quick_config(tmp.path(), "");
    let text = std::fs::read_to_string(&diverge).unwrap().replace("[train]", "[train]\nlr = 1e30\nweight_decay = 0.0");
    std::fs::write(&diverge, text).unwrap();
    let o = relclip(tmp.path(), &["run", diverge.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("partial"));

    let ckpt = tmp.path().join("missing.ckpt");
    let o = relclip(tmp.path(), &["analyze", ckpt.to_str().unwrap(), "--toggles", "head_bias", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    assert_eq!(relclip(tmp.path(), &["frobnicate"]).status.code(), Some(1));
}

#[test]
fn sweep_reports_failed_cells_with_a_runtime_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), "\n[sweep]\n[sweep.grid]\n\"dataset.n_pair\" = [4, 99]\n");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("[analysis.prune]\nkeep = [[0], [0, 1]]\nextra_epochs = 1\n", "");
    std::fs::write(&cfg, text).unwrap();
    let o = relclip(tmp.path(), &["sweep", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("cell_001"));
    let summary = std::fs::read_to_string(tmp.path().join("smoke/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}
