//! Read-only analyses of trained encoders: logit decompositions, head bias,
//! ablations, embedding alignment, rotary-position diagnostics and pruning.

mod ablation;
mod decompose;
mod head_bias;
mod prune;
mod rope;
mod rotation;

use std::fs;
use std::path::Path;

pub use ablation::{ablated_encode, ablation_study, intervention_for, write_ablation_csv, AblationRow, AblationSpec};
pub use decompose::{cls_row_std, decompose_logits, xwx_share, Decomposer, HeadTerms, LogitDecomposition, RowStd, Term};
pub use head_bias::{head_bias, HeadBiasStats, HeadObservation, HeadSummary, Side};
pub use prune::{all_head_subsets, prune_and_retrain, prune_vision_heads};
pub use rope::{
    effective_rank, pe_consistency, rope_report, DistanceStat, PeConsistency, PePair, RopeHead, RopePair,
    RopeTheoryReport, RANK_THRESHOLDS,
};
pub use rotation::{fit_rotation, RotationAlignment};

use crate::error::{Error, Result};
use crate::model::ClipModel;
use crate::numerics::{Scalar, Tensor};

/// Aligns text label embeddings onto image label embeddings of a model.
/// Image token id of label `l` is `l`; text token id is `l - 1`.
pub fn fit_label_rotation<T: Scalar>(model: &ClipModel<T>, fit: &[u32], eval: &[u32]) -> Result<RotationAlignment> {
    fit_rotation(
        &model.vision.tok_emb.cast(),
        &model.text.tok_emb.cast(),
        &|l| l as usize,
        &|l| l as usize - 1,
        fit,
        eval,
    )
}

/// Writes a matrix as headerless CSV.
pub fn write_matrix_csv(path: &Path, m: &Tensor<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|x| x.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One CSV per `(term, head)` heatmap of a decomposition, named
/// `{prefix}_{term}_h{head}.csv`, plus the `xwx` and `total` sums. Returns
/// the written paths.
pub fn write_decomposition(dir: &Path, prefix: &str, d: &LogitDecomposition) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (h, terms) in d.heads.iter().enumerate() {
        let mut mats: Vec<(String, Tensor<f64>)> =
            Term::ALL.iter().map(|t| (t.name().to_string(), terms.get(*t).clone())).collect();
        mats.push(("xwx".into(), terms.xwx()));
        mats.push(("total".into(), terms.total()));
        for (name, m) in mats {
            let p = dir.join(format!("{prefix}_{name}_h{h}.csv"));
            write_matrix_csv(&p, &m)?;
            paths.push(p);
        }
    }
    Ok(paths)
}

/// Serializes any report as pretty JSON.
pub fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes rows as CSV with a header derived from the row type.
pub fn write_rows_csv<S: serde::Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
