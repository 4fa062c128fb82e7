use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use relclip::harness::{
    analyze, audit, export, plan_cells, run_config, set_path, sweep_config, AnalysisToggles, CellStatus, ExperimentConfig,
    RunKind, RunManifest, RunOptions, RunStatus, FIGURES, MANIFEST_FILE,
};
use relclip::Error;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn smoke() -> ExperimentConfig {
    ExperimentConfig::load(&repo_root().join("configs/smoke.toml")).unwrap()
}

fn quick(run_id: &str) -> ExperimentConfig {
    let mut cfg = smoke();
    cfg.run_id = run_id.into();
    cfg.analysis = AnalysisToggles::default();
    cfg.train.epochs = 6;
    cfg.train.eval_every = 3;
    cfg
}

fn all_configs() -> Vec<PathBuf> {
    let mut out = Vec::new();
    for dir in ["configs", "configs/acceptance"] {
        for e in fs::read_dir(repo_root().join(dir)).unwrap() {
            let p = e.unwrap().path();
            if p.extension().is_some_and(|x| x == "toml") {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn every_checked_in_config_loads_and_round_trips() {
    let paths = all_configs();
    assert!(paths.len() >= 10);
    for p in paths {
        let cfg = ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg, "{}", p.display());
        for plan in plan_cells(&cfg).unwrap() {
            plan.config.unwrap_or_else(|e| panic!("{} {}: {e}", p.display(), plan.cell));
        }
    }
}

#[test]
fn config_errors_name_the_offending_key() {
    let base = smoke().to_toml();
    let cases = [
        (base.replace("n_pair = 4", "n_pair = 9"), "dataset.n_pair"),
        (base.replace("epochs = 20", "epochs = 0"), "train.epochs"),
        (base.replace("rope = false", "rope = true"), "analysis.rope"),
        (base.replace("[train]", "[train]\nbogus_knob = 1"), "bogus_knob"),
        (base.replace("[model.text]", "[model.text]\nd_model = 64"), "analysis.rotation"),
        (base.replace("ablations = [", "ablations = [\"XY\", "), "XY"),
    ];
    for (text, key) in cases {
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.is_config(), "{err}");
        assert!(err.to_string().contains(key), "`{err}` should mention {key}");
    }
}

#[test]
fn grid_paths_merge_tables() {
    let mut doc: toml::Value = toml::from_str("[dataset]\nn_tot = 20\nn_pair = 15\nn2 = 10\n").unwrap();
    let patch: toml::Value = toml::from_str("x = { n_tot = 10, n_pair = 5 }").unwrap();
    set_path(&mut doc, "dataset", patch["x"].clone()).unwrap();
    set_path(&mut doc, "train.seed", toml::Value::Integer(3)).unwrap();
    assert_eq!(doc["dataset"]["n_tot"].as_integer(), Some(10));
    assert_eq!(doc["dataset"]["n_pair"].as_integer(), Some(5));
    assert_eq!(doc["dataset"]["n2"].as_integer(), Some(10));
    assert_eq!(doc["train"]["seed"].as_integer(), Some(3));
}

#[test]
fn toggle_names_parse_and_reject_unknowns() {
    let t = AnalysisToggles::from_names(&["head_bias", "ablation", "rotation"]).unwrap();
    assert!(t.head_bias && t.rotation && !t.decomposition && !t.similarity);
    assert_eq!(t.ablation_specs().unwrap().len(), relclip::harness::DEFAULT_ABLATIONS.len());
    let err = AnalysisToggles::from_names(&["head_bais"]).unwrap_err();
    assert!(err.to_string().contains("head_bais") && err.to_string().contains("head_bias"));
}

#[test]
fn smoke_run_is_fast_complete_and_self_describing() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("smoke");
    let start = Instant::now();
    let m = run_config(&smoke(), &dir, RunOptions::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "smoke run took {secs:.1}s");
    assert_eq!(m.status, RunStatus::Complete, "{:?}", m.error);
    audit(&dir, &m).unwrap();
    for f in [
        "config.toml",
        "dataset.json",
        "metrics.csv",
        "loss.csv",
        "final.ckpt",
        "eval.json",
        "phases.json",
        "similarity_single_pos.csv",
        "similarity_seen_pair_config.csv",
        "similarity_unseen_pair.csv",
        "analysis/attention_examples.csv",
        "analysis/text_attention.csv",
        "analysis/decomposition/examples.json",
        "analysis/decomposition/ex0_EP_h0.csv",
        "analysis/cls_row_std.csv",
        "analysis/head_bias_summary.csv",
        "analysis/head_bias_observations.csv",
        "analysis/ablation.csv",
        "analysis/rotation.json",
        "analysis/pe_consistency.json",
        "analysis/prune/prune_summary.csv",
        "analysis/prune/h0-1/metrics.csv",
        "analysis/summary.json",
    ] {
        assert!(m.has_artifact(f), "manifest lacks {f}");
    }
    let reloaded = RunManifest::load(&dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(reloaded, m);
    assert_eq!(m.code_hash.len(), 64);
    assert_eq!(m.seeds.train, 0);

    // Every figure bundle except the rotary one exports from the smoke run.
    for (id, _) in FIGURES {
        let out = tmp.path().join("fig").join(id);
        match export(&dir.join(MANIFEST_FILE), id, Some(&out)) {
            Ok(b) => {
                assert!(out.join("bundle.json").is_file());
                for f in &b.files {
                    assert!(out.join(&f.name).is_file());
                }
            }
            Err(e) => {
                assert_eq!(id, "figS_rope", "{id}: {e}");
                assert!(e.to_string().contains("rerun with toggle `rope`"), "{e}");
            }
        }
    }
}

#[test]
fn figure_bundles_follow_their_format_contracts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let mut cfg = quick("contracts");
    cfg.analysis.head_bias = true;
    run_config(&cfg, &dir, RunOptions::default()).unwrap();
    let manifest = dir.join(MANIFEST_FILE);

    let out = tmp.path().join("scatter");
    export(&manifest, "fig4c_scatter", Some(&out)).unwrap();
    let mut r = csv::Reader::from_path(out.join("scatter.csv")).unwrap();
    assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>(), ["run_id", "image_id", "head", "delta_label", "delta_pe"]);
    let n_unseen = 2 * 5;
    assert_eq!(r.records().count(), n_unseen * 4);

    let out = tmp.path().join("sim");
    export(&manifest, "fig3_similarity", Some(&out)).unwrap();
    let mut sim = csv::Reader::from_path(out.join("similarity.csv")).unwrap();
    let n_cols = sim.headers().unwrap().len() - 3;
    let n_rows = sim.records().count();
    let mut blocks = csv::Reader::from_path(out.join("caption_blocks.csv")).unwrap();
    let blocks: Vec<String> = blocks.records().map(|r| r.unwrap()[2].to_string()).collect();
    assert_eq!(blocks.len(), n_cols);
    assert_eq!(blocks.iter().filter(|b| *b == "single").count(), 6);
    assert_eq!(blocks.iter().filter(|b| *b == "pair_seen_labels").count(), 12);
    assert_eq!(blocks.iter().filter(|b| *b == "pair_unseen_labels").count(), 2);
    assert_eq!(n_rows, 6 * 5 + 12 * 5 + 2 * 5);

    let err = export(&manifest, "fig9_nope", None).unwrap_err();
    assert!(err.is_config());
    for (id, _) in FIGURES {
        assert!(err.to_string().contains(id));
    }
    let err = export(&manifest, "fig4e_ablation", None).unwrap_err();
    assert!(matches!(err, Error::MissingAnalysis { .. }));
    assert!(err.to_string().contains("rerun with toggle `ablation`"), "{err}");
}

#[test]
fn identical_configs_give_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick("det");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_config(&cfg, &a, RunOptions::default()).unwrap();
    run_config(&cfg, &b, RunOptions::default()).unwrap();
    for f in ["metrics.csv", "loss.csv", "final.ckpt", "eval.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let mut other = cfg.clone();
    other.train.seed = 1;
    let c = tmp.path().join("c");
    run_config(&other, &c, RunOptions::default()).unwrap();
    assert_ne!(fs::read(a.join("loss.csv")).unwrap(), fs::read(c.join("loss.csv")).unwrap());
}

#[test]
fn existing_output_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("r");
    let cfg = quick("force");
    run_config(&cfg, &dir, RunOptions::default()).unwrap();
    let err = run_config(&cfg, &dir, RunOptions::default()).unwrap_err();
    assert!(err.is_config() && err.to_string().contains("--force"), "{err}");
    fs::write(dir.join("stray.txt"), "x").unwrap();
    let m = run_config(&cfg, &dir, RunOptions { force: true }).unwrap();
    assert_eq!(m.status, RunStatus::Complete);
    assert!(!dir.join("stray.txt").exists());
}

#[test]
fn audit_flags_unlisted_and_missing_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("r");
    let m = run_config(&quick("audit"), &dir, RunOptions::default()).unwrap();
    audit(&dir, &m).unwrap();
    fs::write(dir.join("extra.csv"), "a\n").unwrap();
    assert!(audit(&dir, &m).unwrap_err().to_string().contains("extra.csv"));
    fs::remove_file(dir.join("extra.csv")).unwrap();
    fs::remove_file(dir.join("loss.csv")).unwrap();
    assert!(audit(&dir, &m).unwrap_err().to_string().contains("loss.csv"));
}

#[test]
fn diverging_run_leaves_a_partial_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("r");
    let mut cfg = quick("diverge");
    cfg.train.lr = 1e30;
    cfg.train.weight_decay = 0.0;
    let m = run_config(&cfg, &dir, RunOptions::default()).unwrap();
    assert_eq!(m.status, RunStatus::Partial);
    assert!(m.error.is_some());
    assert!(m.final_metrics.is_none());
    assert!(m.has_artifact("config.toml") && m.has_artifact("metrics.csv"));
    audit(&dir, &m).unwrap();
}

#[test]
fn one_cell_sweep_matches_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick("single");
    let run_dir = tmp.path().join("run");
    run_config(&cfg, &run_dir, RunOptions::default()).unwrap();
    let sweep_dir = tmp.path().join("sweep");
    let sm = sweep_config(&cfg, &sweep_dir, RunOptions::default()).unwrap();
    assert_eq!(sm.cells.len(), 1);
    assert_eq!(sm.cells[0].status, CellStatus::Complete);
    for f in ["metrics.csv", "final.ckpt"] {
        assert_eq!(fs::read(run_dir.join(f)).unwrap(), fs::read(sweep_dir.join("cell_000").join(f)).unwrap());
    }
}

#[test]
fn sweep_isolates_failing_cells_and_summarizes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut text = quick("grid").to_toml();
    text.push_str("\n[sweep]\nworkers = 2\nseeds = [0, 1]\n\n[sweep.grid]\n\"dataset.n_pair\" = [4, 99]\n");
    let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
    let dir = tmp.path().join("grid");
    let sm = sweep_config(&cfg, &dir, RunOptions::default()).unwrap();
    assert_eq!(sm.cells.len(), 4);
    assert_eq!(sm.keys, ["dataset.n_pair", "train.seed"]);
    let status: Vec<CellStatus> = sm.cells.iter().map(|c| c.status).collect();
    assert_eq!(status, [CellStatus::Complete, CellStatus::Complete, CellStatus::Failed, CellStatus::Failed]);
    assert!(sm.cells[2].error.as_deref().unwrap().contains("dataset.n_pair"));
    // Seeds differ between the two good cells.
    let a = fs::read(dir.join("cell_000/loss.csv")).unwrap();
    let b = fs::read(dir.join("cell_001/loss.csv")).unwrap();
    assert_ne!(a, b);

    let mut r = csv::Reader::from_path(dir.join("summary.csv")).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(&header[..4], ["cell", "dataset.n_pair", "train.seed", "status"]);
    let rows: Vec<csv::StringRecord> = r.records().map(|r| r.unwrap()).collect();
    assert_eq!(&rows[2][3], "failed");
    assert_eq!(&rows[0][3], "complete");
    assert!(!rows[0][header.iter().position(|h| h == "acc_unseen_pair").unwrap()].is_empty());

    let out = tmp.path().join("wd");
    let b = export(&dir.join("sweep_manifest.json"), "figS_weight_decay", Some(&out)).unwrap();
    assert_eq!(b.sources.len(), 2);
    assert_eq!(csv::Reader::from_path(out.join("final.csv")).unwrap().records().count(), 2);
    let err = export(&dir.join("sweep_manifest.json"), "fig3_similarity", Some(&out)).unwrap_err();
    assert!(err.to_string().contains("one run"));
}

#[test]
fn analyze_reads_a_checkpoint_into_its_own_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let cfg = quick("an");
    run_config(&cfg, &run_dir, RunOptions::default()).unwrap();
    let toggles = AnalysisToggles::from_names(&["head_bias", "rotation", "phases"]).unwrap();
    let out = tmp.path().join("an");
    let m = analyze(&run_dir.join("final.ckpt"), &cfg, toggles, &out, RunOptions::default()).unwrap();
    assert_eq!(m.kind, RunKind::Analyze);
    assert_eq!(m.status, RunStatus::Complete, "{:?}", m.error);
    for f in ["analysis/head_bias_summary.csv", "analysis/rotation.json", "phases.json", "eval.json"] {
        assert!(m.has_artifact(f), "{f}");
    }
    assert!(!m.has_artifact("analysis/ablation.csv"));
    audit(&out, &m).unwrap();
    // Same weights, same evaluation.
    assert_eq!(fs::read(run_dir.join("eval.json")).unwrap(), fs::read(out.join("eval.json")).unwrap());

    let rope = AnalysisToggles::from_names(&["rope"]).unwrap();
    let err = analyze(&run_dir.join("final.ckpt"), &cfg, rope, &tmp.path().join("rope"), RunOptions::default()).unwrap_err();
    assert!(err.is_config() && err.to_string().contains("analysis.rope"), "{err}");
    assert!(!tmp.path().join("rope").exists());
}
