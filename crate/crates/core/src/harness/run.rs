//! Single runs: train, evaluate, analyze, persist.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde_json::{json, Map, Value};

use super::config::{AnalysisToggles, ExperimentConfig};
use super::manifest::{audit, collect_artifacts, RunKind, RunManifest, RunStatus, Seeds, CODE_HASH};
use crate::checkpoint::Checkpoint;
use crate::dataset::{build_splits, export_json, render_image, Caption, Example, SceneSpec, SplitBundle};
use crate::encoders::{encode_batch, vision_tokens};
use crate::error::{Error, Result};
use crate::evaluation::{cosine_matrix, detect_phases, embed_bundle, evaluate, write_similarity_csv};
use crate::mech_analysis::{
    ablation_study, all_head_subsets, cls_row_std, fit_label_rotation, head_bias, pe_consistency, prune_and_retrain,
    prune_vision_heads, rope_report, write_ablation_csv, write_decomposition, write_json, write_matrix_csv,
    write_rows_csv, xwx_share, Decomposer, Term,
};
use crate::metrics::{MetricsLog, MetricsRow};
use crate::model::{ClipConfig, ClipModel};
use crate::numerics::Tensor;
use crate::seed::derive_seed;
use crate::training::train;

/// Environment variable naming the output root.
pub const OUT_ENV: &str = "RELCLIP_OUT";

/// `$RELCLIP_OUT`, or `runs` under the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Delete an existing non-empty output directory instead of refusing.
    pub force: bool,
}

fn seeds_of(cfg: &ExperimentConfig) -> Seeds {
    Seeds {
        dataset: cfg.dataset.seed,
        train: cfg.train.seed,
        init: derive_seed(cfg.train.seed, "init"),
        shuffle: derive_seed(cfg.train.seed, "train"),
    }
}

fn prepare_dir(dir: &Path, opts: RunOptions) -> Result<()> {
    if dir.exists() {
        let empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_none();
        if !empty {
            if !opts.force {
                return Err(Error::Config(format!(
                    "out_dir: {} exists and is not empty; pass --force or pick another run_id",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

struct Outcome {
    final_metrics: Option<MetricsRow>,
    analyses: Vec<String>,
}

/// Writes the manifest for whatever `body` left in `dir`, marking the run
/// partial when `body` or the self-audit failed.
fn finish(
    dir: &Path,
    cfg: &ExperimentConfig,
    kind: RunKind,
    checkpoint: Option<String>,
    started: (u64, Instant),
    result: Result<Outcome>,
) -> Result<RunManifest> {
    let (final_metrics, analyses, error) = match result {
        Ok(o) => (o.final_metrics, o.analyses, None),
        Err(e) => {
            log::error!("run {} failed: {e}", cfg.run_id);
            (None, Vec::new(), Some(e.to_string()))
        }
    };
    let mut manifest = RunManifest {
        run_id: cfg.run_id.clone(),
        kind,
        config: cfg.clone(),
        seeds: seeds_of(cfg),
        checkpoint,
        code_hash: CODE_HASH.to_string(),
        started_unix: started.0,
        wall_clock_s: started.1.elapsed().as_secs_f64(),
        status: if error.is_none() { RunStatus::Complete } else { RunStatus::Partial },
        error,
        analyses,
        final_metrics,
        artifacts: collect_artifacts(dir)?,
    };
    manifest.save(dir)?;
    if let Err(e) = audit(dir, &manifest) {
        manifest.status = RunStatus::Partial;
        manifest.error = Some(e.to_string());
        manifest.save(dir)?;
    }
    Ok(manifest)
}

/// Loads a config file and runs it under `root`.
pub fn run(config_path: &Path, root: &Path, opts: RunOptions) -> Result<RunManifest> {
    let cfg = ExperimentConfig::load(config_path)?;
    let dir = cfg.output_dir(root);
    run_config(&cfg, &dir, opts)
}

/// Trains, evaluates and analyzes one config into `dir`.
///
/// Config problems return `Err` before anything is written. Failures after
/// training starts still produce a manifest, marked partial.
pub fn run_config(cfg: &ExperimentConfig, dir: &Path, opts: RunOptions) -> Result<RunManifest> {
    cfg.validate()?;
    prepare_dir(dir, opts)?;
    let started = (unix_now(), Instant::now());
    log::info!("run {} -> {}", cfg.run_id, dir.display());
    let result = guarded(|| execute(cfg, dir));
    finish(dir, cfg, RunKind::Run, None, started, result)
}

/// Turns a panic inside `f` into an error so the run still gets a manifest.
fn guarded<T>(f: impl FnOnce() -> Result<T>) -> Result<T> {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(Error::Invalid(format!("panic: {}", msg.unwrap_or_default())))
        }
    }
}

fn execute(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let bundle = build_splits(&cfg.dataset)?;
    let model_cfg = cfg.model_config();
    let (state, log) = train(&bundle, &model_cfg, &cfg.train, Some(dir))?;
    let mut analyses = write_outputs(cfg, &state.config, &state.model, &bundle, Some(&log), dir)?;
    analyses.insert(0, "train".into());
    Ok(Outcome { final_metrics: log.last().cloned(), analyses })
}

/// Evaluation files plus every toggled analysis. Returns the analysis names.
fn write_outputs(
    cfg: &ExperimentConfig,
    model_cfg: &ClipConfig,
    model: &ClipModel<f32>,
    bundle: &SplitBundle,
    log: Option<&MetricsLog>,
    dir: &Path,
) -> Result<Vec<String>> {
    let t = &cfg.analysis;
    let mut done = Vec::new();
    if t.dataset_export {
        let p = dir.join("dataset.json");
        fs::write(&p, export_json(bundle)?).map_err(|e| Error::io(&p, e))?;
        done.push("dataset_export".to_string());
    }
    let report = evaluate(model, model_cfg, bundle);
    write_json(&dir.join("eval.json"), &report)?;
    if t.similarity {
        let emb = embed_bundle(model, model_cfg, bundle);
        let vocab = bundle.vocab();
        for (split, imgs) in &emb.images {
            let name = serde_json::to_value(split)?.as_str().unwrap_or_default().to_string();
            let sims = cosine_matrix(imgs, &emb.text);
            write_similarity_csv(&dir.join(format!("similarity_{name}.csv")), *split, &sims, bundle.split(*split), &emb.universe, &vocab)?;
        }
        done.push("similarity".into());
    }
    if t.phases {
        if let Some(log) = log {
            write_json(&dir.join("phases.json"), &detect_phases(log, t.phase_threshold, t.phase_patience))?;
            done.push("phases".into());
        }
    }
    done.extend(run_analyses(cfg, model_cfg, model, bundle, &dir.join("analysis"))?);
    Ok(done)
}

fn pixels(ex: &Example) -> String {
    ex.image.0.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(" ")
}

/// The same pair with its two labels exchanged.
fn mirrored(ex: &Example, bundle: &SplitBundle) -> Result<Example> {
    let s = &ex.scene;
    let scene = SceneSpec::pair(s.labels[1], s.labels[0], s.positions[0], s.positions[1]);
    let image = render_image(&scene, &bundle.config)?;
    let captions = crate::dataset::captions_for(&scene, bundle.config.caption_mode, &bundle.vocab());
    Ok(Example { scene, image, captions })
}

#[derive(serde::Serialize)]
struct AttentionRow {
    example: usize,
    variant: &'static str,
    image: String,
    block: usize,
    head: usize,
    query: usize,
    key: usize,
    weight: f64,
}

#[derive(serde::Serialize)]
struct TextAttentionRow {
    block: usize,
    head: usize,
    query: usize,
    key: usize,
    mean: f64,
    std: f64,
}

#[derive(serde::Serialize)]
struct RowStdRow {
    image_id: usize,
    head: usize,
    term: String,
    std: f64,
}

#[derive(serde::Serialize)]
struct ObservationRow {
    image_id: usize,
    image: String,
    head: usize,
    attended: String,
    delta_label: Option<f64>,
    delta_pe: Option<f64>,
}

#[derive(serde::Serialize)]
struct PruneRow {
    keep: String,
    n_heads: usize,
    stage: &'static str,
    epochs: usize,
    acc_single_pos: f64,
    acc_seen_pair_cfg: f64,
    acc_unseen_pair: f64,
    acc_label_set: f64,
}

fn side_name<S: serde::Serialize>(s: &S) -> String {
    serde_json::to_value(s).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

/// Runs the mechanistic analyses selected in `cfg.analysis` into `dir`.
fn run_analyses(
    cfg: &ExperimentConfig,
    model_cfg: &ClipConfig,
    model: &ClipModel<f32>,
    bundle: &SplitBundle,
    dir: &Path,
) -> Result<Vec<String>> {
    let t = &cfg.analysis;
    let m64: ClipModel<f64> = model.cast();
    let vcfg = &model_cfg.vision;
    let unseen = &bundle.val_unseen_pair;
    let examples = &unseen[..t.examples.min(unseen.len())];
    let mut done = Vec::new();
    let mut summary = Map::new();
    let mkdir = |d: &Path| fs::create_dir_all(d).map_err(|e| Error::io(d, e));

    if t.attention {
        mkdir(dir)?;
        let mut rows = Vec::new();
        for (i, ex) in examples.iter().enumerate() {
            for (variant, e) in [("original", ex.clone()), ("mirrored", mirrored(ex, bundle)?)] {
                let toks = vision_tokens(vcfg, &e.image.0);
                let (_, trace) = encode_batch(&m64.vision, vcfg, &[toks], true, None);
                let trace = trace.expect("trace requested");
                for block in 0..trace.blocks.len() {
                    for head in 0..trace.heads {
                        let a = trace.attention(block, 0, head);
                        for q in 0..a.rows() {
                            for k in 0..a.cols() {
                                rows.push(AttentionRow {
                                    example: i,
                                    variant,
                                    image: pixels(&e),
                                    block,
                                    head,
                                    query: q,
                                    key: k,
                                    weight: a.at(q, k),
                                });
                            }
                        }
                    }
                }
            }
        }
        write_rows_csv(&dir.join("attention_examples.csv"), &rows)?;
        done.push("attention".into());
    }

    if t.text_attention {
        mkdir(dir)?;
        let vocab = bundle.vocab();
        let caps: Vec<Caption> = bundle.text_universe.iter().copied().filter(|c| c.is_pair(&vocab)).collect();
        let seqs: Vec<Vec<usize>> = caps.iter().map(|c| c.0.iter().map(|&x| x as usize).collect()).collect();
        let (_, trace) = encode_batch(&m64.text, &model_cfg.text, &seqs, true, None);
        let trace = trace.expect("trace requested");
        let n = trace.seq_len;
        let mut rows = Vec::new();
        for block in 0..trace.blocks.len() {
            for head in 0..trace.heads {
                let mut sum = Tensor::<f64>::zeros([n, n]);
                let mut sq = Tensor::<f64>::zeros([n, n]);
                for s in 0..seqs.len() {
                    let a = trace.attention(block, s, head);
                    sum.add_assign(&a);
                    sq.add_assign(&a.zip_map(&a, |x, y| x * y));
                }
                let c = seqs.len().max(1) as f64;
                for q in 0..n {
                    for k in 0..n {
                        let mean = sum.at(q, k) / c;
                        let var = (sq.at(q, k) / c - mean * mean).max(0.0);
                        rows.push(TextAttentionRow { block, head, query: q, key: k, mean, std: var.sqrt() });
                    }
                }
            }
        }
        write_rows_csv(&dir.join("text_attention.csv"), &rows)?;
        summary.insert("text_attention".into(), json!({ "n_captions": seqs.len() }));
        done.push("text_attention".into());
    }

    if t.decomposition {
        let ddir = dir.join("decomposition");
        mkdir(&ddir)?;
        let dec = Decomposer::new(&m64.vision, vcfg)?;
        let mut index = Vec::new();
        for (i, ex) in examples.iter().enumerate() {
            let d = dec.decompose(&vision_tokens(vcfg, &ex.image.0));
            write_decomposition(&ddir, &format!("ex{i}"), &d)?;
            index.push(json!({ "example": i, "image": pixels(ex), "labels": ex.scene.labels, "positions": ex.scene.positions }));
        }
        write_json(&ddir.join("examples.json"), &index)?;
        let mut per_input = Vec::new();
        let mut rows = Vec::new();
        for (i, ex) in unseen.iter().enumerate() {
            let stds = cls_row_std(&dec.decompose(&vision_tokens(vcfg, &ex.image.0)), 0);
            for s in &stds {
                for (term, v) in &s.terms {
                    rows.push(RowStdRow { image_id: i, head: s.head, term: term.name().into(), std: *v });
                }
                rows.push(RowStdRow { image_id: i, head: s.head, term: "xwx".into(), std: s.xwx });
                rows.push(RowStdRow { image_id: i, head: s.head, term: "total".into(), std: s.total });
            }
            per_input.push(stds);
        }
        write_rows_csv(&dir.join("cls_row_std.csv"), &rows)?;
        let shares: Vec<f64> = (0..vcfg.m_h).map(|h| xwx_share(&per_input, h)).collect();
        let mut term_means = Map::new();
        for term in Term::ALL {
            let per_head: Vec<f64> = (0..vcfg.m_h)
                .map(|h| per_input.iter().map(|s| s[h].term(term)).sum::<f64>() / per_input.len().max(1) as f64)
                .collect();
            term_means.insert(term.name().into(), json!(per_head));
        }
        summary.insert("decomposition".into(), json!({ "xwx_share": shares, "mean_row_std": term_means }));
        done.push("decomposition".into());
    }

    if t.head_bias {
        mkdir(dir)?;
        let stats = head_bias(&m64.vision, vcfg, unseen)?;
        write_rows_csv(&dir.join("head_bias_summary.csv"), &stats.heads)?;
        let obs: Vec<ObservationRow> = stats
            .observations
            .iter()
            .map(|o| ObservationRow {
                image_id: o.image,
                image: pixels(&unseen[o.image]),
                head: o.head,
                attended: side_name(&o.attended),
                delta_label: o.delta_label,
                delta_pe: o.delta_pe,
            })
            .collect();
        write_rows_csv(&dir.join("head_bias_observations.csv"), &obs)?;
        summary.insert("head_bias".into(), serde_json::to_value(&stats.heads)?);
        done.push("head_bias".into());
    }

    let specs = t.ablation_specs()?;
    if !specs.is_empty() {
        mkdir(dir)?;
        let rows = ablation_study(&m64, model_cfg, bundle, &specs)?;
        write_ablation_csv(&dir.join("ablation.csv"), &rows)?;
        summary.insert("ablation".into(), serde_json::to_value(&rows)?);
        done.push("ablation".into());
    }

    if t.rotation {
        mkdir(dir)?;
        let n_pair = bundle.config.n_pair as u32;
        let fit: Vec<u32> = t.rotation_fit_labels.clone().unwrap_or_else(|| (1..=n_pair).collect());
        let eval: Vec<u32> = (1..=bundle.config.n_tot as u32).filter(|l| !fit.contains(l)).collect();
        let r = fit_label_rotation(&m64, &fit, &eval)?;
        write_json(&dir.join("rotation.json"), &r)?;
        let as_tensor = |m: &Vec<Vec<f64>>| Tensor::from_rows(m);
        write_matrix_csv(&dir.join("rotation_cosine_pre.csv"), &as_tensor(&r.pre_cosine))?;
        write_matrix_csv(&dir.join("rotation_cosine_post.csv"), &as_tensor(&r.post_cosine))?;
        summary.insert(
            "rotation".into(),
            json!({ "pre_diag_mean": r.pre_diag_mean, "post_diag_mean": r.post_diag_mean, "rank": r.rank,
                    "determinant": r.determinant, "orthogonality_error": r.orthogonality_error() }),
        );
        done.push("rotation".into());
    }

    if t.rope {
        mkdir(dir)?;
        let rep = rope_report(&m64.vision, vcfg, unseen)?;
        write_rope(dir, &rep)?;
        summary.insert(
            "rope".into(),
            json!(rep.heads.iter().map(|h| json!({ "head": h.head, "full": h.full, "no_bias": h.no_bias,
                "effective_rank": h.effective_rank, "v_singular_cosine": h.v_singular_cosine })).collect::<Vec<_>>()),
        );
        done.push("rope".into());
    }

    if t.pe_consistency {
        mkdir(dir)?;
        let pc = pe_consistency(&m64.vision, vcfg, unseen)?;
        write_json(&dir.join("pe_consistency.json"), &json!({ "proportion": pc.proportion }))?;
        write_rows_csv(&dir.join("pe_consistency_pairs.csv"), &pc.pairs)?;
        summary.insert("pe_consistency".into(), json!({ "proportion": pc.proportion }));
        done.push("pe_consistency".into());
    }

    if let Some(p) = &t.prune {
        let pdir = dir.join("prune");
        mkdir(&pdir)?;
        let keeps = if p.keep.is_empty() { all_head_subsets(vcfg.m_h) } else { p.keep.clone() };
        let mut rows = Vec::new();
        for keep in &keeps {
            let tag = keep.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("-");
            let (pcfg, pruned) = prune_vision_heads(model, model_cfg, keep)?;
            let before = evaluate(&pruned, &pcfg, bundle);
            let acc = |r: &crate::evaluation::EvalReport, stage, epochs| {
                use crate::dataset::SplitName::*;
                PruneRow {
                    keep: tag.clone(),
                    n_heads: keep.len(),
                    stage,
                    epochs,
                    acc_single_pos: r.set(SinglePos).accuracy,
                    acc_seen_pair_cfg: r.set(SeenPairConfig).accuracy,
                    acc_unseen_pair: r.set(UnseenPair).accuracy,
                    acc_label_set: r.set(UnseenPair).label_set,
                }
            };
            rows.push(acc(&before, "pruned", 0));
            let (state, _) =
                prune_and_retrain(model, model_cfg, bundle, &cfg.train, keep, p.extra_epochs, Some(&pdir.join(format!("h{tag}"))))?;
            rows.push(acc(&evaluate(&state.model, &state.config, bundle), "retrained", p.extra_epochs));
        }
        write_rows_csv(&pdir.join("prune_summary.csv"), &rows)?;
        done.push("prune".into());
    }

    if !summary.is_empty() {
        write_json(&dir.join("summary.json"), &Value::Object(summary))?;
    }
    Ok(done)
}

#[derive(serde::Serialize)]
struct RopeHeadRow {
    head: usize,
    full: f64,
    no_bias: f64,
    rank90: usize,
    rank95: usize,
    rank99: usize,
    v_cos_sv1: f64,
    v_cos_sv2: f64,
    pc1_explained: f64,
}

#[derive(serde::Serialize)]
struct HeadIndexValue<I: serde::Serialize> {
    head: usize,
    index: I,
    value: f64,
}

#[derive(serde::Serialize)]
struct DistanceRow {
    head: usize,
    distance: usize,
    mean: f64,
    std: f64,
}

fn write_rope(dir: &Path, rep: &crate::mech_analysis::RopeTheoryReport) -> Result<()> {
    write_json(&dir.join("rope_report.json"), rep)?;
    write_rows_csv(&dir.join("rope_pairs.csv"), &rep.pairs)?;
    let heads: Vec<RopeHeadRow> = rep
        .heads
        .iter()
        .map(|h| RopeHeadRow {
            head: h.head,
            full: h.full,
            no_bias: h.no_bias,
            rank90: h.effective_rank[0],
            rank95: h.effective_rank[1],
            rank99: h.effective_rank[2],
            v_cos_sv1: h.v_singular_cosine.first().copied().unwrap_or(f64::NAN),
            v_cos_sv2: h.v_singular_cosine.get(1).copied().unwrap_or(f64::NAN),
            pc1_explained: h.pca_explained.first().copied().unwrap_or(f64::NAN),
        })
        .collect();
    write_rows_csv(&dir.join("rope_heads.csv"), &heads)?;
    let alpha: Vec<_> =
        rep.heads.iter().flat_map(|h| h.alpha.iter().map(|&(l, v)| HeadIndexValue { head: h.head, index: l, value: v })).collect();
    write_rows_csv(&dir.join("rope_alpha.csv"), &alpha)?;
    let rho: Vec<_> =
        rep.heads.iter().flat_map(|h| h.rho.iter().map(|&(p, v)| HeadIndexValue { head: h.head, index: p, value: v })).collect();
    write_rows_csv(&dir.join("rope_rho.csv"), &rho)?;
    let sv: Vec<_> = rep
        .heads
        .iter()
        .flat_map(|h| h.singular_values.iter().enumerate().map(|(i, &v)| HeadIndexValue { head: h.head, index: i, value: v }))
        .collect();
    write_rows_csv(&dir.join("rope_singular_values.csv"), &sv)?;
    let dist: Vec<_> = rep
        .heads
        .iter()
        .flat_map(|h| {
            h.pi_bias_by_distance.iter().map(|d| DistanceRow { head: h.head, distance: d.distance, mean: d.mean, std: d.std })
        })
        .collect();
    write_rows_csv(&dir.join("rope_pi_bias_distance.csv"), &dist)?;
    Ok(())
}

/// Finds the run config for a checkpoint: `config.toml` beside it or one
/// directory up (for `checkpoints/epoch_*.ckpt`).
pub fn config_for_checkpoint(ckpt: &Path) -> Result<PathBuf> {
    let parent = ckpt.parent().unwrap_or(Path::new("."));
    [parent.join("config.toml"), parent.join("..").join("config.toml")]
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Config(format!("no config.toml beside {}; pass --config", ckpt.display())))
}

/// Runs analyses on a saved checkpoint into `out_dir`, with its own manifest.
/// The dataset comes from `cfg`; the model config from the checkpoint.
pub fn analyze(checkpoint: &Path, cfg: &ExperimentConfig, toggles: AnalysisToggles, out_dir: &Path, opts: RunOptions) -> Result<RunManifest> {
    let mut cfg = cfg.clone();
    cfg.analysis = toggles;
    cfg.sweep = None;
    cfg.validate()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let (model_cfg, model) = ClipModel::<f32>::from_checkpoint(&ckpt)?;
    model_cfg.validate(&cfg.dataset)?;
    let bundle = build_splits(&cfg.dataset)?;
    prepare_dir(out_dir, opts)?;
    let started = (unix_now(), Instant::now());
    let result = guarded(|| {
        let cfg_path = out_dir.join("config.toml");
        fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        let metrics = checkpoint.parent().map(|p| p.join("metrics.csv")).filter(|p| p.is_file());
        let log = metrics.map(|p| MetricsLog::read_csv(&p)).transpose()?;
        let analyses = write_outputs(&cfg, &model_cfg, &model, &bundle, log.as_ref(), out_dir)?;
        Ok(Outcome { final_metrics: None, analyses })
    });
    finish(out_dir, &cfg, RunKind::Analyze, Some(checkpoint.display().to_string()), started, result)
}
