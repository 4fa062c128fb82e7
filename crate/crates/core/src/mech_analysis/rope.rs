//! Directional-consistency diagnostics for the class-token query.
//!
//! For an image with `x` at sequence position `a` and `y` at `b`, and the
//! swapped image, the class token keeps preferring the same side iff
//! `(S_x - S_y)(S'_y - S'_x) > 0`. With learned positions the two factors are
//! `T + Pi` and `-T + Pi`; with rotary positions they are `T1 + Pi_bias` and
//! `T2 + Pi_bias`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{Example, SceneKind};
use crate::encoders::{EncoderConfig, EncoderWeights, PosEncoding};
use crate::error::{Error, Result};
use crate::numerics::{rope_apply, Scalar, Tensor};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `(label, left position, right position)` in sequence coordinates.
fn pairs_of(examples: &[Example]) -> Result<Vec<(u32, u32, usize, usize)>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            if e.scene.kind != SceneKind::Pair {
                return Err(Error::Invalid(format!("example {i} is not a two-object image")));
            }
            Ok((e.scene.labels[0], e.scene.labels[1], e.scene.positions[0] + 1, e.scene.positions[1] + 1))
        })
        .collect()
}

struct HeadView {
    w_q: Tensor<f64>,
    w_k: Tensor<f64>,
    b_q: Vec<f64>,
    b_k: Vec<f64>,
}

fn head_view(weights: &EncoderWeights<f64>, cfg: &EncoderConfig, h: usize) -> HeadView {
    let a = &weights.blocks[cfg.block_for_application(0)].attn;
    let dh = cfg.d_head;
    HeadView {
        w_q: EncoderWeights::head_rows(&a.w_q, h, dh),
        w_k: EncoderWeights::head_rows(&a.w_k, h, dh),
        b_q: EncoderWeights::head_bias(&a.b_q, h, dh),
        b_k: EncoderWeights::head_bias(&a.b_k, h, dh),
    }
}

/// `W v` for a `[r, c]` matrix and a length-`c` vector.
fn apply(w: &Tensor<f64>, v: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|i| dot(w.row(i), v)).collect()
}

fn check_first_block(weights: &EncoderWeights<f64>, cfg: &EncoderConfig) -> Result<()> {
    if weights.blocks[cfg.block_for_application(0)].ln1.is_some() {
        return Err(Error::UnsupportedMode("LayerNorm before attention".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PePair {
    pub head: usize,
    pub x: u32,
    pub y: u32,
    pub a: usize,
    pub b: usize,
    /// Token part `C~ W_K (E_x - E_y)`.
    pub t: f64,
    /// Position part `C~ W_K (P_a - P_b)`.
    pub pi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeConsistency {
    /// Per head, share of pairs with `|Pi| > |T|`.
    pub proportion: Vec<f64>,
    pub pairs: Vec<PePair>,
}

/// Token/position split of the class-token logit gap for a learned-position
/// encoder, where `C~ = (E_cls + P_0) W_Q^T + b_Q`.
pub fn pe_consistency<T: Scalar>(weights: &EncoderWeights<T>, cfg: &EncoderConfig, examples: &[Example]) -> Result<PeConsistency> {
    if cfg.pos_encoding != PosEncoding::Learned {
        return Err(Error::UnsupportedMode(format!("{:?} encoder has no positional table", cfg.pos_encoding)));
    }
    let w: EncoderWeights<f64> = weights.cast();
    check_first_block(&w, cfg)?;
    let pos = w.pos_emb.as_ref().expect("learned positional table");
    let pairs = pairs_of(examples)?;
    let cls: Vec<f64> = w.tok_emb.row(cfg.cls_token()).iter().zip(pos.row(0)).map(|(a, b)| a + b).collect();
    let mut out = Vec::new();
    let mut proportion = Vec::new();
    for h in 0..cfg.m_h {
        let hv = head_view(&w, cfg, h);
        let c: Vec<f64> = apply(&hv.w_q, &cls).iter().zip(&hv.b_q).map(|(a, b)| a + b).collect();
        // C~ W_K as a d_model row vector.
        let ck: Vec<f64> = (0..hv.w_k.cols()).map(|j| (0..hv.w_k.rows()).map(|i| c[i] * hv.w_k.at(i, j)).sum()).collect();
        let mut hits = 0;
        for &(x, y, a, b) in &pairs {
            let t = dot(&ck, &sub(w.tok_emb.row(x as usize), w.tok_emb.row(y as usize)));
            let pi = dot(&ck, &sub(pos.row(a), pos.row(b)));
            if pi.abs() > t.abs() {
                hits += 1;
            }
            out.push(PePair { head: h, x, y, a, b, t, pi });
        }
        proportion.push(hits as f64 / pairs.len().max(1) as f64);
    }
    Ok(PeConsistency { proportion, pairs: out })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopePair {
    pub head: usize,
    pub x: u32,
    pub y: u32,
    pub a: usize,
    pub b: usize,
    pub s_x: f64,
    pub s_y: f64,
    pub s_x_swapped: f64,
    pub s_y_swapped: f64,
    pub t1: f64,
    pub t2: f64,
    pub pi_bias: f64,
    /// `T1` and `T2` with keys replaced by `alpha_i v`.
    pub t1_pc1: f64,
    pub t2_pc1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceStat {
    pub distance: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeHead {
    pub head: usize,
    /// Share of pairs with `(T1 + Pi_bias)(T2 + Pi_bias) > 0`.
    pub full: f64,
    /// Share with `T1 T2 > 0`.
    pub no_bias: f64,
    /// Share with `T1 T2 > 0` under the PC1 approximation.
    pub pc1: f64,
    /// Unit PC1 of the centered keys `W_K E_i`, signed so mean alpha > 0.
    pub v: Vec<f64>,
    /// `(label, alpha)` with `alpha = <W_K E_i, v>`.
    pub alpha: Vec<(u32, f64)>,
    pub pca_explained: Vec<f64>,
    /// `(sequence position, rho)` with `rho_a = C~ R_a v`.
    pub rho: Vec<(usize, f64)>,
    pub pi_bias_by_distance: Vec<DistanceStat>,
    /// Smallest k whose top-k squared singular values of `W_K` reach
    /// 90%, 95% and 99% of the total.
    pub effective_rank: [usize; 3],
    pub singular_values: Vec<f64>,
    /// `|cos|` between `v` and the top two singular directions of `W_K` in
    /// key space (sign of a singular vector is arbitrary).
    pub v_singular_cosine: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeTheoryReport {
    pub n_pairs: usize,
    pub labels: Vec<u32>,
    pub heads: Vec<RopeHead>,
    pub pairs: Vec<RopePair>,
}

pub const RANK_THRESHOLDS: [f64; 3] = [0.90, 0.95, 0.99];

/// Smallest `k` with `sum_{i<k} s_i^2 >= thr * sum s_i^2`, for each threshold.
pub fn effective_rank(singular_values: &[f64], thresholds: &[f64]) -> Vec<usize> {
    let mut s2: Vec<f64> = singular_values.iter().map(|s| s * s).collect();
    s2.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = s2.iter().sum();
    thresholds
        .iter()
        .map(|&thr| {
            if total == 0.0 {
                return 0;
            }
            let mut acc = 0.0;
            for (k, v) in s2.iter().enumerate() {
                acc += v;
                // Relative slack keeps an exact rank-k matrix at k despite roundoff.
                if acc >= thr * total * (1.0 - 1e-12) {
                    return k + 1;
                }
            }
            s2.len()
        })
        .collect()
}

fn rotate(v: &[f64], pos: usize, base: f64) -> Vec<f64> {
    rope_apply(&Tensor::new([1, v.len()], v.to_vec()), &[pos], 1, v.len(), base, false).into_data()
}

/// Mean-centered PCA of the rows of `m`: unit directions (as rows) and
/// explained-variance ratios, largest first.
fn pca(m: &Tensor<f64>) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (r, c) = (m.rows(), m.cols());
    let mut centered = DMatrix::from_row_slice(r, c, m.data());
    for j in 0..c {
        let mean = centered.column(j).mean();
        centered.column_mut(j).add_scalar_mut(-mean);
    }
    let svd = centered.svd(false, true);
    let vt = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let dirs = order.iter().map(|&i| vt.row(i).iter().copied().collect()).collect();
    let ratios = order
        .iter()
        .map(|&i| if total > 0.0 { svd.singular_values[i].powi(2) / total } else { 0.0 })
        .collect();
    (dirs, ratios)
}

/// Rotary-position diagnostics of the first block over two-object images.
/// Positions are sequence positions (pixel `p` at `p + 1`); the class token
/// sits at position 0 where the rotation is the identity, so
/// `C~ = E_cls W_Q^T + b_Q`.
pub fn rope_report<T: Scalar>(weights: &EncoderWeights<T>, cfg: &EncoderConfig, examples: &[Example]) -> Result<RopeTheoryReport> {
    if cfg.pos_encoding != PosEncoding::Rope {
        return Err(Error::UnsupportedMode(format!("rope report needs a rotary encoder, got {:?}", cfg.pos_encoding)));
    }
    if !cfg.d_head.is_multiple_of(2) {
        return Err(Error::Invalid("rotary encoding needs an even head dimension".into()));
    }
    let w: EncoderWeights<f64> = weights.cast();
    check_first_block(&w, cfg)?;
    let pairs = pairs_of(examples)?;
    let mut labels: Vec<u32> = pairs.iter().flat_map(|p| [p.0, p.1]).collect();
    labels.sort_unstable();
    labels.dedup();
    let base = cfg.rope_base;
    let n_pos = cfg.max_seq_len;
    let mut heads = Vec::new();
    let mut records = Vec::new();
    for h in 0..cfg.m_h {
        let hv = head_view(&w, cfg, h);
        let c: Vec<f64> =
            apply(&hv.w_q, w.tok_emb.row(cfg.cls_token())).iter().zip(&hv.b_q).map(|(a, b)| a + b).collect();
        let key = |l: u32| apply(&hv.w_k, w.tok_emb.row(l as usize));
        let keys: BTreeMap<u32, Vec<f64>> = labels.iter().map(|&l| (l, key(l))).collect();
        // C~ R_a u for any key-space vector u.
        let score = |u: &[f64], a: usize| dot(&c, &rotate(u, a, base));
        let with_bias = |l: u32| -> Vec<f64> { keys[&l].iter().zip(&hv.b_k).map(|(a, b)| a + b).collect() };

        let key_mat = Tensor::from_rows(&labels.iter().map(|l| keys[l].clone()).collect::<Vec<_>>());
        let (dirs, pca_explained) = pca(&key_mat);
        let mut v = dirs[0].clone();
        let mean_alpha = labels.iter().map(|l| dot(&keys[l], &v)).sum::<f64>() / labels.len() as f64;
        if mean_alpha < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let alpha: BTreeMap<u32, f64> = labels.iter().map(|&l| (l, dot(&keys[&l], &v))).collect();
        let rho: Vec<f64> = (0..n_pos).map(|a| score(&v, a)).collect();

        let (mut full, mut nob, mut pc) = (0, 0, 0);
        for &(x, y, a, b) in &pairs {
            let (kx, ky) = (&keys[&x], &keys[&y]);
            let t1 = score(kx, a) - score(ky, b);
            let t2 = score(ky, a) - score(kx, b);
            let pi_bias = score(&hv.b_k, a) - score(&hv.b_k, b);
            let t1_pc1 = alpha[&x] * rho[a] - alpha[&y] * rho[b];
            let t2_pc1 = alpha[&y] * rho[a] - alpha[&x] * rho[b];
            full += ((t1 + pi_bias) * (t2 + pi_bias) > 0.0) as usize;
            nob += (t1 * t2 > 0.0) as usize;
            pc += (t1_pc1 * t2_pc1 > 0.0) as usize;
            records.push(RopePair {
                head: h,
                x,
                y,
                a,
                b,
                s_x: score(&with_bias(x), a),
                s_y: score(&with_bias(y), b),
                s_x_swapped: score(&with_bias(x), b),
                s_y_swapped: score(&with_bias(y), a),
                t1,
                t2,
                pi_bias,
                t1_pc1,
                t2_pc1,
            });
        }

        let mut by_dist: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for a in 1..n_pos {
            for b in a + 1..n_pos {
                by_dist.entry(b - a).or_default().push(score(&hv.b_k, a) - score(&hv.b_k, b));
            }
        }
        let pi_bias_by_distance = by_dist
            .into_iter()
            .map(|(distance, xs)| {
                let m = xs.iter().sum::<f64>() / xs.len() as f64;
                let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
                DistanceStat { distance, mean: m, std: sd }
            })
            .collect();

        let wk = DMatrix::from_row_slice(hv.w_k.rows(), hv.w_k.cols(), hv.w_k.data());
        let svd = wk.svd(true, false);
        let u = svd.u.expect("u requested");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
        let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
        let er = effective_rank(&singular_values, &RANK_THRESHOLDS);
        let v_singular_cosine =
            order.iter().take(2).map(|&i| dot(&v, &u.column(i).iter().copied().collect::<Vec<_>>()).abs()).collect();

        let n = pairs.len().max(1) as f64;
        heads.push(RopeHead {
            head: h,
            full: full as f64 / n,
            no_bias: nob as f64 / n,
            pc1: pc as f64 / n,
            v,
            alpha: alpha.into_iter().collect(),
            pca_explained,
            rho: (1..n_pos).map(|a| (a, rho[a])).collect(),
            pi_bias_by_distance,
            effective_rank: [er[0], er[1], er[2]],
            singular_values,
            v_singular_cosine,
        });
    }
    Ok(RopeTheoryReport { n_pairs: pairs.len(), labels, heads, pairs: records })
}
