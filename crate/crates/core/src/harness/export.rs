//! Tidy CSV/JSON bundles per figure family, read from finished runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::manifest::{RunManifest, CODE_HASH, SWEEP_MANIFEST_FILE};
use super::sweep::SweepManifest;
use crate::dataset::{Caption, Vocab};
use crate::error::{Error, Result};
use crate::evaluation::EvalReport;
use crate::mech_analysis::RotationAlignment;

/// Every figure id with a one-line description.
pub const FIGURES: [(&str, &str); 16] = [
    ("fig3_accuracy", "accuracy curves and final accuracies per run"),
    ("fig3_similarity", "image-by-caption cosine matrix with split and caption blocks"),
    ("fig3_attention", "vision attention maps of example pairs and their mirrors"),
    ("fig3_head_bias", "per-head left/right/background attention proportions"),
    ("fig4_decomposition", "per-term attention-logit heatmaps of example images"),
    ("fig4c_scatter", "per-image label and position logit differences per head"),
    ("fig4e_ablation", "accuracies under term ablations"),
    ("fig5_text_attention", "mean and std of text attention over pair captions"),
    ("fig6_rotation", "label embedding cosines before and after rotation"),
    ("figS_dynamics", "loss and accuracy curves with phase boundaries"),
    ("figS_weight_decay", "final accuracies against weight decay"),
    ("figS_row_std", "per-term spread of the class-token logit row"),
    ("figS_rope", "rotary-position diagnostics"),
    ("figS_pe_consistency", "learned-position consistency pairs"),
    ("figS_pruning", "accuracies after head pruning and retraining"),
    ("figS_label_set", "label-set recognition and confusion counts"),
];

pub fn figure_ids() -> Vec<&'static str> {
    FIGURES.iter().map(|f| f.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleFile {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRun {
    pub run_id: String,
    pub dir: String,
    pub params: BTreeMap<String, serde_json::Value>,
}

/// Index written as `bundle.json` next to the exported files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureBundle {
    pub figure: String,
    pub description: String,
    pub code_hash: String,
    pub sources: Vec<SourceRun>,
    pub files: Vec<BundleFile>,
    /// Small figure-level values such as phase boundaries.
    #[serde(default)]
    pub extra: serde_json::Value,
}

struct Source {
    manifest: RunManifest,
    dir: PathBuf,
    params: BTreeMap<String, serde_json::Value>,
}

impl Source {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn require(&self, rel: &str, toggle: &str) -> Result<PathBuf> {
        if self.manifest.has_artifact(rel) {
            Ok(self.path(rel))
        } else {
            Err(Error::MissingAnalysis { what: format!("{rel} in run {}", self.manifest.run_id), toggle: toggle.into() })
        }
    }
}

fn load_sources(manifest_path: &Path) -> Result<Vec<Source>> {
    let dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let is_sweep = manifest_path.file_name().is_some_and(|n| n == SWEEP_MANIFEST_FILE);
    if !is_sweep {
        let manifest = RunManifest::load(manifest_path)?;
        return Ok(vec![Source { manifest, dir, params: BTreeMap::new() }]);
    }
    let sweep = SweepManifest::load(manifest_path)?;
    let mut out = Vec::new();
    for cell in &sweep.cells {
        let p = dir.join(&cell.dir).join(super::manifest::MANIFEST_FILE);
        if p.is_file() {
            out.push(Source { manifest: RunManifest::load(&p)?, dir: dir.join(&cell.dir), params: cell.params.clone() });
        }
    }
    if out.is_empty() {
        return Err(Error::Invalid(format!("{}: no cell produced a manifest", manifest_path.display())));
    }
    Ok(out)
}

struct Writer {
    dir: PathBuf,
    files: Vec<BundleFile>,
}

impl Writer {
    fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let p = self.dir.join(name);
        let mut w = csv::Writer::from_path(&p)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
        self.files.push(BundleFile { name: name.into(), columns: header.to_vec(), rows: rows.len() });
        Ok(())
    }

    /// Concatenates a headed CSV across sources, prefixed by `run_id`.
    fn concat(&mut self, name: &str, sources: &[Source], rel: &str, toggle: &str) -> Result<()> {
        let mut header = None;
        let mut rows = Vec::new();
        for s in sources {
            let (h, body) = read_csv(&s.require(rel, toggle)?)?;
            header.get_or_insert(h);
            rows.extend(body.into_iter().map(|r| prefixed(&s.manifest.run_id, r)));
        }
        let mut full = vec!["run_id".to_string()];
        full.extend(header.unwrap_or_default());
        self.csv(name, &full, &rows)
    }
}

fn prefixed(run_id: &str, row: Vec<String>) -> Vec<String> {
    std::iter::once(run_id.to_string()).chain(row).collect()
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.map(|r| r.iter().map(String::from).collect())).collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}

fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(
            rec.iter()
                .map(|x| x.parse::<f64>().map_err(|e| Error::Invalid(format!("{}: {e}", path.display()))))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(out)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn s<T: ToString>(x: T) -> String {
    x.to_string()
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|x| x.to_string()).collect()
}

fn single<'a>(sources: &'a [Source], figure: &str) -> Result<&'a Source> {
    match sources {
        [one] => Ok(one),
        _ => Err(Error::Invalid(format!("figure `{figure}` reads one run; pass a run manifest, not a sweep"))),
    }
}

/// Which caption block a similarity column belongs to.
fn caption_block(c: &Caption, vocab: &Vocab, n_pair: usize) -> &'static str {
    let labels = c.labels(vocab);
    if labels.len() == 1 {
        "single"
    } else if labels.iter().all(|&l| l as usize <= n_pair) {
        "pair_seen_labels"
    } else {
        "pair_unseen_labels"
    }
}

/// Writes the bundle for `figure` from a run or sweep manifest into `out`
/// (default `figures/<id>` beside the manifest).
pub fn export(manifest_path: &Path, figure: &str, out: Option<&Path>) -> Result<FigureBundle> {
    let Some(&(_, description)) = FIGURES.iter().find(|f| f.0 == figure) else {
        return Err(Error::Config(format!("figure: unknown id `{figure}`; valid ids: {}", figure_ids().join(", "))));
    };
    let sources = load_sources(manifest_path)?;
    let out_dir = match out {
        Some(p) => p.to_path_buf(),
        None => manifest_path.parent().unwrap_or(Path::new(".")).join("figures").join(figure),
    };
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut w = Writer { dir: out_dir.clone(), files: Vec::new() };
    let mut extra = serde_json::Value::Null;
    let acc_cols = ["acc_single_pos", "acc_seen_pair_cfg", "acc_unseen_pair", "acc_label_set"];

    match figure {
        "fig3_accuracy" | "figS_weight_decay" => {
            if figure == "fig3_accuracy" {
                let mut rows = Vec::new();
                for src in &sources {
                    let log = crate::metrics::MetricsLog::read_csv(&src.require("metrics.csv", "train")?)?;
                    for r in &log.rows {
                        for (m, v) in acc_cols.iter().zip([r.acc_single_pos, r.acc_seen_pair_cfg, r.acc_unseen_pair, r.acc_label_set]) {
                            rows.push(vec![src.manifest.run_id.clone(), s(r.epoch), s(m), s(v)]);
                        }
                    }
                }
                w.csv("accuracy.csv", &strings(&["run_id", "epoch", "metric", "value"]), &rows)?;
            }
            let mut rows = Vec::new();
            for src in &sources {
                let c = &src.manifest.config;
                let f = src.manifest.final_metrics.as_ref().ok_or_else(|| Error::MissingAnalysis {
                    what: format!("final metrics of run {}", src.manifest.run_id),
                    toggle: "train".into(),
                })?;
                rows.push(vec![
                    src.manifest.run_id.clone(),
                    s(c.dataset.n_tot),
                    s(c.dataset.n_pair),
                    s(c.dataset.n2),
                    s(c.train.weight_decay),
                    s(c.train.seed),
                    s(f.epoch),
                    s(f.acc_single_pos),
                    s(f.acc_seen_pair_cfg),
                    s(f.acc_unseen_pair),
                    s(f.acc_label_set),
                ]);
            }
            let mut header = strings(&["run_id", "n_tot", "n_pair", "n2", "weight_decay", "seed", "epoch"]);
            header.extend(strings(&acc_cols));
            w.csv("final.csv", &header, &rows)?;
        }
        "figS_dynamics" => {
            w.concat("metrics.csv", &sources, "metrics.csv", "train")?;
            w.concat("loss.csv", &sources, "loss.csv", "train")?;
            let mut rows = Vec::new();
            for src in &sources {
                let p: crate::evaluation::PhaseReport = read_json(&src.require("phases.json", "phases")?)?;
                let opt = |x: Option<usize>| x.map(s).unwrap_or_default();
                rows.push(vec![src.manifest.run_id.clone(), s(p.threshold), s(p.patience), opt(p.phase1_end), opt(p.phase2_end)]);
            }
            w.csv("phases.csv", &strings(&["run_id", "threshold", "patience", "phase1_end", "phase2_end"]), &rows)?;
        }
        "figS_label_set" => {
            let mut curve = Vec::new();
            let mut conf = Vec::new();
            for src in &sources {
                let log = crate::metrics::MetricsLog::read_csv(&src.require("metrics.csv", "train")?)?;
                for r in &log.rows {
                    curve.push(vec![src.manifest.run_id.clone(), s(r.epoch), s(r.acc_unseen_pair), s(r.acc_label_set)]);
                }
                let rep: EvalReport = read_json(&src.require("eval.json", "train")?)?;
                for set in &rep.sets {
                    let c = &set.confusion;
                    let split = serde_json::to_value(set.split)?.as_str().unwrap_or_default().to_string();
                    conf.push(vec![
                        src.manifest.run_id.clone(),
                        split,
                        s(set.accuracy),
                        s(set.top1_any),
                        s(set.label_set),
                        s(c.correct),
                        s(c.same_label_set),
                        s(c.partial_labels),
                        s(c.other),
                    ]);
                }
            }
            w.csv("label_set.csv", &strings(&["run_id", "epoch", "acc_unseen_pair", "acc_label_set"]), &curve)?;
            w.csv(
                "confusion.csv",
                &strings(&["run_id", "split", "accuracy", "top1_any", "label_set", "correct", "same_label_set", "partial_labels", "other"]),
                &conf,
            )?;
        }
        "fig3_similarity" => {
            let src = single(&sources, figure)?;
            let splits = ["single_pos", "seen_pair_config", "unseen_pair"];
            let mut header = None;
            let mut rows = Vec::new();
            for sp in splits {
                let (h, body) = read_csv(&src.require(&format!("similarity_{sp}.csv"), "similarity")?)?;
                header.get_or_insert(h);
                rows.extend(body.into_iter().map(|mut r| {
                    r[0] = format!("{sp}/{}", r[0]);
                    r
                }));
            }
            let header = header.unwrap_or_default();
            w.csv("similarity.csv", &header, &rows)?;
            let data = &src.manifest.config.dataset;
            let vocab = Vocab::new(data.n_tot);
            let legend = vocab.legend();
            let mut blocks = Vec::new();
            for (j, name) in header.iter().skip(3).enumerate() {
                let toks: Vec<u32> = name
                    .split_whitespace()
                    .map(|t| legend.iter().position(|l| l == t).map(|i| i as u32))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| Error::Invalid(format!("caption `{name}` does not parse")))?;
                let block = match <[u32; 4]>::try_from(toks) {
                    Ok(t) => caption_block(&Caption(t), &vocab, data.n_pair),
                    Err(_) => "unknown",
                };
                blocks.push(vec![s(j), name.clone(), s(block)]);
            }
            w.csv("caption_blocks.csv", &strings(&["column", "caption", "block"]), &blocks)?;
        }
        "fig3_attention" => w.concat("attention.csv", &sources, "analysis/attention_examples.csv", "attention")?,
        "fig3_head_bias" => w.concat("head_bias.csv", &sources, "analysis/head_bias_summary.csv", "head_bias")?,
        "fig4c_scatter" => {
            let mut rows = Vec::new();
            for src in &sources {
                let (h, body) = read_csv(&src.require("analysis/head_bias_observations.csv", "head_bias")?)?;
                let col = |n: &str| h.iter().position(|c| c == n).ok_or_else(|| Error::Invalid(format!("observations lack `{n}`")));
                let (i, hd, dl, dp) = (col("image_id")?, col("head")?, col("delta_label")?, col("delta_pe")?);
                for r in body {
                    if r[dl].is_empty() || r[dp].is_empty() {
                        return Err(Error::UnsupportedMode(format!(
                            "run {} has no position/label logit differences (learned positions only)",
                            src.manifest.run_id
                        )));
                    }
                    rows.push(vec![src.manifest.run_id.clone(), r[i].clone(), r[hd].clone(), r[dl].clone(), r[dp].clone()]);
                }
            }
            w.csv("scatter.csv", &strings(&["run_id", "image_id", "head", "delta_label", "delta_pe"]), &rows)?;
        }
        "fig4_decomposition" => {
            let mut rows = Vec::new();
            for src in &sources {
                src.require("analysis/decomposition/examples.json", "decomposition")?;
                let mut files: Vec<&String> = src
                    .manifest
                    .artifacts
                    .iter()
                    .map(|a| &a.path)
                    .filter(|p| p.starts_with("analysis/decomposition/ex") && p.ends_with(".csv"))
                    .collect();
                files.sort();
                for rel in files {
                    // analysis/decomposition/ex{i}_{term}_h{h}.csv
                    let stem = rel.rsplit('/').next().unwrap().trim_end_matches(".csv");
                    let parts: Vec<&str> = stem.split('_').collect();
                    let (ex, term, head) = (&parts[0][2..], parts[1], &parts[2][1..]);
                    for (r, row) in read_matrix(&src.path(rel))?.iter().enumerate() {
                        for (c, v) in row.iter().enumerate() {
                            rows.push(vec![src.manifest.run_id.clone(), s(ex), s(head), s(term), s(r), s(c), s(v)]);
                        }
                    }
                }
            }
            w.csv("decomposition.csv", &strings(&["run_id", "example", "head", "term", "query", "key", "value"]), &rows)?;
            let src = &sources[0];
            extra = read_json(&src.path("analysis/decomposition/examples.json"))?;
        }
        "fig4e_ablation" => w.concat("ablation.csv", &sources, "analysis/ablation.csv", "ablation")?,
        "fig5_text_attention" => w.concat("text_attention.csv", &sources, "analysis/text_attention.csv", "text_attention")?,
        "fig6_rotation" => {
            let mut rows = Vec::new();
            let mut summ = Vec::new();
            for src in &sources {
                let r: RotationAlignment = read_json(&src.require("analysis/rotation.json", "rotation")?)?;
                for (stage, m) in [("pre", &r.pre_cosine), ("post", &r.post_cosine)] {
                    for (i, row) in m.iter().enumerate() {
                        for (j, v) in row.iter().enumerate() {
                            rows.push(vec![src.manifest.run_id.clone(), s(stage), s(r.eval_labels[i]), s(r.eval_labels[j]), s(v)]);
                        }
                    }
                }
                summ.push(vec![src.manifest.run_id.clone(), s(r.pre_diag_mean), s(r.post_diag_mean), s(r.rank), s(r.determinant)]);
            }
            w.csv("rotation.csv", &strings(&["run_id", "stage", "text_label", "image_label", "cosine"]), &rows)?;
            w.csv("rotation_summary.csv", &strings(&["run_id", "pre_diag_mean", "post_diag_mean", "rank", "determinant"]), &summ)?;
        }
        "figS_row_std" => {
            w.concat("row_std.csv", &sources, "analysis/cls_row_std.csv", "decomposition")?;
            // Per (run, head, term) mean and spread over images.
            let mut acc: BTreeMap<(String, usize, String), Vec<f64>> = BTreeMap::new();
            for src in &sources {
                let (_, body) = read_csv(&src.path("analysis/cls_row_std.csv"))?;
                for r in body {
                    let head = r[1].parse().unwrap_or(0);
                    let v: f64 = r[3].parse().unwrap_or(f64::NAN);
                    acc.entry((src.manifest.run_id.clone(), head, r[2].clone())).or_default().push(v);
                }
            }
            let rows: Vec<Vec<String>> = acc
                .into_iter()
                .map(|((run, head, term), v)| {
                    let n = v.len() as f64;
                    let mean = v.iter().sum::<f64>() / n;
                    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                    vec![run, s(head), term, s(mean), s(sd), s(v.len())]
                })
                .collect();
            w.csv("row_std_summary.csv", &strings(&["run_id", "head", "term", "mean", "std", "n_images"]), &rows)?;
        }
        "figS_rope" => {
            for f in ["rope_heads", "rope_pairs", "rope_alpha", "rope_rho", "rope_pi_bias_distance", "rope_singular_values"] {
                w.concat(&format!("{f}.csv"), &sources, &format!("analysis/{f}.csv"), "rope")?;
            }
        }
        "figS_pe_consistency" => {
            w.concat("pe_consistency_pairs.csv", &sources, "analysis/pe_consistency_pairs.csv", "pe_consistency")?;
            let mut rows = Vec::new();
            for src in &sources {
                let v: serde_json::Value = read_json(&src.path("analysis/pe_consistency.json"))?;
                for (h, p) in v["proportion"].as_array().into_iter().flatten().enumerate() {
                    rows.push(vec![src.manifest.run_id.clone(), s(h), p.to_string()]);
                }
            }
            w.csv("pe_consistency.csv", &strings(&["run_id", "head", "proportion"]), &rows)?;
        }
        "figS_pruning" => {
            w.concat("prune_summary.csv", &sources, "analysis/prune/prune_summary.csv", "prune")?;
            let mut rows = Vec::new();
            let mut header = Vec::new();
            for src in &sources {
                let mut curves: Vec<&String> = src
                    .manifest
                    .artifacts
                    .iter()
                    .map(|a| &a.path)
                    .filter(|p| p.starts_with("analysis/prune/h") && p.ends_with("/metrics.csv"))
                    .collect();
                curves.sort();
                for rel in curves {
                    let keep = rel.split('/').nth(2).unwrap_or("").trim_start_matches('h').to_string();
                    let (h, body) = read_csv(&src.path(rel))?;
                    header = h;
                    rows.extend(body.into_iter().map(|r| {
                        let mut full = vec![src.manifest.run_id.clone(), keep.clone()];
                        full.extend(r);
                        full
                    }));
                }
            }
            let mut full = strings(&["run_id", "keep"]);
            full.extend(header);
            w.csv("prune_curves.csv", &full, &rows)?;
        }
        _ => unreachable!("figure ids are matched above"),
    }

    let bundle = FigureBundle {
        figure: figure.into(),
        description: description.into(),
        code_hash: CODE_HASH.into(),
        sources: sources
            .iter()
            .map(|s| SourceRun { run_id: s.manifest.run_id.clone(), dir: s.dir.display().to_string(), params: s.params.clone() })
            .collect(),
        files: w.files,
        extra,
    };
    let p = out_dir.join("bundle.json");
    fs::write(&p, serde_json::to_string_pretty(&json!(bundle))?).map_err(|e| Error::io(&p, e))?;
    Ok(bundle)
}
