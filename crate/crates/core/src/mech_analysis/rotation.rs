//! Orthogonal Procrustes alignment of text label embeddings onto image label
//! embeddings.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::cosine_matrix;
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationAlignment {
    /// `[d, d]` orthogonal map applied on the right of text rows.
    pub rotation: Vec<Vec<f64>>,
    pub determinant: f64,
    pub fit_labels: Vec<u32>,
    pub eval_labels: Vec<u32>,
    /// Rank of the fit cross-covariance.
    pub rank: usize,
    /// Text-by-image cosine over `eval_labels`, before and after rotation.
    pub pre_cosine: Vec<Vec<f64>>,
    pub post_cosine: Vec<Vec<f64>>,
    pub pre_diag_mean: f64,
    pub post_diag_mean: f64,
}

impl RotationAlignment {
    pub fn rotation_tensor(&self) -> Tensor<f64> {
        Tensor::from_rows(&self.rotation)
    }

    /// `max |R^T R - I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let r = self.rotation_tensor();
        let rtr = r.matmul_t(true, &r, false);
        rtr.zip_map(&Tensor::identity(r.rows()), |a, b| a - b).max_abs()
    }
}

fn to_na(t: &Tensor<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn rows_of(t: &Tensor<f64>, labels: &[u32], row_of: &dyn Fn(u32) -> usize) -> Tensor<f64> {
    Tensor::from_rows(&labels.iter().map(|&l| t.row(row_of(l)).to_vec()).collect::<Vec<_>>())
}

fn diag_mean(m: &Tensor<f64>) -> f64 {
    let n = m.rows().min(m.cols());
    (0..n).map(|i| m.at(i, i)).sum::<f64>() / n.max(1) as f64
}

/// Finds the orthogonal `R` minimizing `sum_i |t_i R - e_i|^2` over
/// `fit_labels`. `img_table` and `txt_table` are full embedding tables and
/// `img_row`/`txt_row` map a label to its row. Reflections are allowed; the
/// determinant is reported.
pub fn fit_rotation(
    img_table: &Tensor<f64>,
    txt_table: &Tensor<f64>,
    img_row: &dyn Fn(u32) -> usize,
    txt_row: &dyn Fn(u32) -> usize,
    fit_labels: &[u32],
    eval_labels: &[u32],
) -> Result<RotationAlignment> {
    if img_table.cols() != txt_table.cols() {
        return Err(Error::Invalid(format!(
            "embedding widths differ: image {} vs text {}",
            img_table.cols(),
            txt_table.cols()
        )));
    }
    if fit_labels.iter().any(|l| eval_labels.contains(l)) {
        return Err(Error::Invalid("fit and eval label sets overlap".into()));
    }
    if fit_labels.is_empty() {
        return Err(Error::Invalid("no fit labels".into()));
    }
    let e_fit = rows_of(img_table, fit_labels, img_row);
    let t_fit = rows_of(txt_table, fit_labels, txt_row);
    // argmin |T R - E| over orthogonal R is U V^T for T^T E = U S V^T.
    let m = to_na(&t_fit).transpose() * to_na(&e_fit);
    let d = m.nrows();
    let svd = m.svd(true, true);
    let tol = svd.singular_values.max() * d as f64 * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < d {
        log::warn!("cross-covariance has rank {rank} < {d}; the rotation is not unique");
    }
    let r = svd.u.expect("u requested") * svd.v_t.expect("v_t requested");
    let determinant = r.determinant();
    let rotation: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| r[(i, j)]).collect()).collect();
    let rt = Tensor::from_rows(&rotation);
    let e_eval = rows_of(img_table, eval_labels, img_row);
    let t_eval = rows_of(txt_table, eval_labels, txt_row);
    let pre = cosine_matrix(&t_eval, &e_eval);
    let post = cosine_matrix(&t_eval.matmul(&rt), &e_eval);
    let as_rows = |m: &Tensor<f64>| (0..m.rows()).map(|i| m.row(i).to_vec()).collect::<Vec<_>>();
    Ok(RotationAlignment {
        rotation,
        determinant,
        fit_labels: fit_labels.to_vec(),
        eval_labels: eval_labels.to_vec(),
        rank,
        pre_diag_mean: diag_mean(&pre),
        post_diag_mean: diag_mean(&post),
        pre_cosine: as_rows(&pre),
        post_cosine: as_rows(&post),
    })
}
