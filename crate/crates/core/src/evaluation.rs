//! Image-to-text retrieval metrics, label-set recognition and phase detection.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Caption, Example, SplitBundle, SplitName, Vocab};
use crate::error::{Error, Result};
use crate::metrics::MetricsLog;
use crate::model::{ClipConfig, ClipModel};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// The best-scoring caption is a correct one.
    Top1,
    /// The two correct captions are exactly the two best-scoring ones.
    Top2Both,
}

/// Cosine similarities between every row of `a` and every row of `b`.
pub fn cosine_matrix<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<f64> {
    let norm = |t: &Tensor<T>| -> Tensor<f64> {
        let t = t.cast::<f64>();
        let mut out = t.clone();
        for r in 0..t.rows() {
            let n = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n > 0.0, "cosine undefined for a zero-norm representation");
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        out
    };
    norm(a).matmul_t(false, &norm(b), true)
}

/// Candidate indices by decreasing similarity; equal scores keep the lower
/// index first.
pub fn rank_row(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&i, &j| row[j].partial_cmp(&row[i]).unwrap_or(Ordering::Equal).then(i.cmp(&j)));
    idx
}

fn top2(row: &[f64]) -> (usize, usize) {
    let better = |i: usize, j: usize| row[i] > row[j] || (row[i] == row[j] && i < j);
    let (mut a, mut b) = (usize::MAX, usize::MAX);
    for i in 0..row.len() {
        if a == usize::MAX || better(i, a) {
            b = a;
            a = i;
        } else if b == usize::MAX || better(i, b) {
            b = i;
        }
    }
    (a, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Per image, candidate indices in canonical (sorted) universe order,
    /// ranked by similarity.
    pub rankings: Vec<Vec<usize>>,
    pub correct: Vec<bool>,
    pub accuracy: f64,
}

/// Scores each image (row of `sims`, columns in `universe` order) against its
/// correct captions. The universe is sorted canonically before ranking, so
/// the result does not depend on the column order passed in.
///
/// Panics if a correct caption is missing from the universe or `Top2Both` is
/// asked for an image without exactly two correct captions.
pub fn retrieval_accuracy(
    sims: &Tensor<f64>,
    correct: &[Vec<Caption>],
    universe: &[Caption],
    criterion: Criterion,
) -> RetrievalResult {
    assert!(!universe.is_empty(), "empty caption universe");
    assert_eq!(sims.cols(), universe.len(), "one similarity column per candidate");
    assert_eq!(sims.rows(), correct.len(), "one row per image");
    let mut order: Vec<usize> = (0..universe.len()).collect();
    order.sort_by_key(|&i| universe[i]);
    let canon: Vec<Caption> = order.iter().map(|&i| universe[i]).collect();
    let find = |c: &Caption| canon.binary_search(c).unwrap_or_else(|_| panic!("correct caption {c:?} not in universe"));
    let mut rankings = Vec::with_capacity(sims.rows());
    let mut flags = Vec::with_capacity(sims.rows());
    for (r, caps) in correct.iter().enumerate() {
        let row: Vec<f64> = order.iter().map(|&j| sims.at(r, j)).collect();
        let ranked = rank_row(&row);
        let want: Vec<usize> = caps.iter().map(find).collect();
        let ok = match criterion {
            Criterion::Top1 => want.contains(&ranked[0]),
            Criterion::Top2Both => {
                assert_eq!(want.len(), 2, "top2_both needs two correct captions");
                ranked.len() >= 2 && want.contains(&ranked[0]) && want.contains(&ranked[1])
            }
        };
        flags.push(ok);
        rankings.push(ranked);
    }
    let accuracy = flags.iter().filter(|&&b| b).count() as f64 / flags.len().max(1) as f64;
    RetrievalResult { rankings, correct: flags, accuracy }
}

fn label_set(labels: &[u32]) -> Vec<u32> {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v
}

/// Fraction of images whose best caption is a two-object caption naming
/// exactly the image's labels, relation ignored.
pub fn label_set_recognition(sims: &Tensor<f64>, examples: &[Example], universe: &[Caption], vocab: &Vocab) -> f64 {
    assert_eq!(sims.rows(), examples.len(), "one row per image");
    let mut hits = 0;
    for (r, ex) in examples.iter().enumerate() {
        let want = label_set(&ex.scene.labels);
        let row: Vec<f64> = (0..universe.len()).map(|j| sims.at(r, j)).collect();
        let mut order: Vec<usize> = (0..universe.len()).collect();
        order.sort_by_key(|&i| universe[i]);
        let best_canon = top2(&order.iter().map(|&j| row[j]).collect::<Vec<_>>()).0;
        let best = universe[order[best_canon]];
        if best.is_pair(vocab) && label_set(&best.labels(vocab)) == want {
            hits += 1;
        }
    }
    hits as f64 / examples.len().max(1) as f64
}

/// How each image's best caption relates to the truth.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub correct: usize,
    /// Right objects, wrong relation or order.
    pub same_label_set: usize,
    /// Single-object caption for one of the image's objects.
    pub partial_labels: usize,
    pub other: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub split: SplitName,
    pub n_images: usize,
    pub criterion: Criterion,
    /// Accuracy under `criterion`.
    pub accuracy: f64,
    /// The best caption is any correct caption.
    pub top1_any: f64,
    pub label_set: f64,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sets: Vec<SetReport>,
    pub universe_size: usize,
    pub logit_scale: f64,
}

impl EvalReport {
    pub fn set(&self, which: SplitName) -> &SetReport {
        self.sets.iter().find(|s| s.split == which).expect("evaluated split")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Precomputed representations for one evaluation pass.
pub struct Embedded {
    pub universe: Vec<Caption>,
    pub text: Tensor<f64>,
    /// Per validation split: the split and its `[n, d]` image representations.
    pub images: Vec<(SplitName, Tensor<f64>)>,
}

pub const VALIDATION_SPLITS: [SplitName; 3] = [SplitName::SinglePos, SplitName::SeenPairConfig, SplitName::UnseenPair];

pub fn embed_bundle<T: Scalar>(model: &ClipModel<T>, cfg: &ClipConfig, bundle: &SplitBundle) -> Embedded {
    let universe = bundle.text_universe.clone();
    let text = model.embed_captions(cfg, &universe).cast();
    let images = VALIDATION_SPLITS
        .iter()
        .map(|&s| {
            let imgs: Vec<_> = bundle.split(s).iter().map(|e| &e.image).collect();
            (s, model.embed_images(cfg, &imgs).cast())
        })
        .collect();
    Embedded { universe, text, images }
}

/// Scores one split given its similarity rows.
pub fn score_split(split: SplitName, sims: &Tensor<f64>, examples: &[Example], universe: &[Caption], vocab: &Vocab) -> SetReport {
    let correct: Vec<Vec<Caption>> = examples.iter().map(|e| e.captions.clone()).collect();
    let criterion = if examples.iter().any(|e| e.captions.len() == 2) { Criterion::Top2Both } else { Criterion::Top1 };
    let res = match criterion {
        Criterion::Top1 => retrieval_accuracy(sims, &correct, universe, Criterion::Top1),
        Criterion::Top2Both => {
            // Images with a single caption in a two-caption set fall back to top-1.
            let mut flags = Vec::new();
            let mut rankings = Vec::new();
            for (i, caps) in correct.iter().enumerate() {
                let c = if caps.len() == 2 { Criterion::Top2Both } else { Criterion::Top1 };
                let r = retrieval_accuracy(&sims.slice_rows(i, i + 1), std::slice::from_ref(caps), universe, c);
                flags.push(r.correct[0]);
                rankings.push(r.rankings[0].clone());
            }
            let accuracy = flags.iter().filter(|&&b| b).count() as f64 / flags.len().max(1) as f64;
            RetrievalResult { rankings, correct: flags, accuracy }
        }
    };
    let any = retrieval_accuracy(sims, &correct, universe, Criterion::Top1);
    let mut canon = universe.to_vec();
    canon.sort();
    let mut confusion = Confusion::default();
    for (i, ex) in examples.iter().enumerate() {
        let best = canon[any.rankings[i][0]];
        let want = label_set(&ex.scene.labels);
        let got = label_set(&best.labels(vocab));
        if any.correct[i] {
            confusion.correct += 1;
        } else if best.is_pair(vocab) && got == want {
            confusion.same_label_set += 1;
        } else if !best.is_pair(vocab) && want.contains(&got[0]) {
            confusion.partial_labels += 1;
        } else {
            confusion.other += 1;
        }
    }
    SetReport {
        split,
        n_images: examples.len(),
        criterion,
        accuracy: res.accuracy,
        top1_any: any.accuracy,
        label_set: label_set_recognition(sims, examples, universe, vocab),
        confusion,
    }
}

/// Evaluates all three validation sets against one global caption universe.
pub fn evaluate<T: Scalar>(model: &ClipModel<T>, cfg: &ClipConfig, bundle: &SplitBundle) -> EvalReport {
    let emb = embed_bundle(model, cfg, bundle);
    let vocab = bundle.vocab();
    let sets = emb
        .images
        .iter()
        .map(|(s, imgs)| {
            let sims = cosine_matrix(imgs, &emb.text);
            score_split(*s, &sims, bundle.split(*s), &emb.universe, &vocab)
        })
        .collect();
    EvalReport { sets, universe_size: emb.universe.len(), logit_scale: model.logit_scale() }
}

/// Writes one split's image-by-caption cosine matrix. The first two columns
/// annotate each row with its split and rendered pixels; the header carries
/// the rendered captions.
pub fn write_similarity_csv(
    path: &Path,
    split: SplitName,
    sims: &Tensor<f64>,
    examples: &[Example],
    universe: &[Caption],
    vocab: &Vocab,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["image_id".to_string(), "split".into(), "image".into()];
    header.extend(universe.iter().map(|c| c.render(vocab)));
    w.write_record(&header)?;
    let split_name = serde_json::to_value(split)?.as_str().unwrap_or_default().to_string();
    for (i, ex) in examples.iter().enumerate() {
        let mut rec = vec![i.to_string(), split_name.clone(), ex.image.0.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(" ")];
        rec.extend((0..universe.len()).map(|j| sims.at(i, j).to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub threshold: f64,
    pub patience: usize,
    /// End of phase 1: single-object positional generalization completes.
    pub phase1_end: Option<usize>,
    /// End of phase 2: seen-pair configuration generalization completes
    /// (searched from the end of phase 1 onwards).
    pub phase2_end: Option<usize>,
    /// Phase (1, 2 or 3) of every logged epoch.
    pub phases: Vec<(usize, u8)>,
}

/// Index of the first entry that is at or above `threshold` together with
/// the following `patience - 1` entries (or every remaining entry when fewer
/// are left).
fn sustained(series: &[f64], threshold: f64, patience: usize, from: usize) -> Option<usize> {
    (from..series.len()).find(|&i| {
        let end = (i + patience.max(1)).min(series.len());
        series[i..end].iter().all(|&v| v >= threshold)
    })
}

pub fn detect_phases(log: &MetricsLog, threshold: f64, patience: usize) -> PhaseReport {
    let single: Vec<f64> = log.rows.iter().map(|r| r.acc_single_pos).collect();
    let seen: Vec<f64> = log.rows.iter().map(|r| r.acc_seen_pair_cfg).collect();
    let p1 = sustained(&single, threshold, patience, 0);
    let p2 = sustained(&seen, threshold, patience, p1.unwrap_or(0));
    let epoch = |i: Option<usize>| i.map(|i| log.rows[i].epoch);
    let phases = log
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let phase = match (p1, p2) {
                (_, Some(b)) if i >= b => 3,
                (Some(a), _) if i >= a => 2,
                _ => 1,
            };
            (r.epoch, phase)
        })
        .collect();
    PhaseReport { threshold, patience, phase1_end: epoch(p1), phase2_end: epoch(p2), phases }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricsRow;

    #[test]
    fn rank_breaks_ties_by_index() {
        assert_eq!(rank_row(&[0.5, 0.9, 0.9, -1.0]), vec![1, 2, 0, 3]);
        assert_eq!(top2(&[0.5, 0.9, 0.9, -1.0]), (1, 2));
        assert_eq!(top2(&[1.0]), (0, usize::MAX));
    }

    fn row(e: usize, single: f64, seen: f64) -> MetricsRow {
        MetricsRow {
            epoch: e,
            train_loss: 0.0,
            acc_single_pos: single,
            acc_seen_pair_cfg: seen,
            acc_unseen_pair: 0.0,
            acc_label_set: 0.0,
            logit_scale: 1.0,
        }
    }

    #[test]
    fn constant_series_ends_at_first_log() {
        let log = MetricsLog { rows: (0..5).map(|i| row(i * 50, 1.0, 1.0)).collect() };
        let p = detect_phases(&log, 0.95, 3);
        assert_eq!((p.phase1_end, p.phase2_end), (Some(0), Some(0)));
    }

    #[test]
    fn never_reached_is_none() {
        let log = MetricsLog { rows: (0..5).map(|i| row(i, 0.9, 0.1)).collect() };
        let p = detect_phases(&log, 0.95, 3);
        assert_eq!((p.phase1_end, p.phase2_end), (None, None));
        assert!(p.phases.iter().all(|&(_, ph)| ph == 1));
    }

    #[test]
    fn dips_reset_the_window() {
        let s = [0.2, 0.96, 0.5, 0.97, 0.98, 0.99, 1.0];
        let q = [0.0, 0.0, 0.96, 0.1, 0.1, 0.97, 0.99];
        let log = MetricsLog { rows: s.iter().zip(q).enumerate().map(|(i, (&a, b))| row(i * 10, a, b)).collect() };
        let p = detect_phases(&log, 0.95, 3);
        assert_eq!(p.phase1_end, Some(30));
        assert_eq!(p.phase2_end, Some(50));
        let labels: Vec<u8> = p.phases.iter().map(|x| x.1).collect();
        assert_eq!(labels, vec![1, 1, 1, 2, 2, 3, 3]);
    }
}
