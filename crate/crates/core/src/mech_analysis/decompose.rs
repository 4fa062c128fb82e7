//! Splitting raw attention scores into token, position and bias parts.
//!
//! With `X = E + P`, `Q = X W_Q^T + b_Q` and `K = X W_K^T + b_K`, one head's
//! scores expand as
//!
//! ```text
//! Q K^T = E W_QK E^T + E W_QK P^T + P W_QK E^T + P W_QK P^T     (X W_QK X^T)
//!       + X W_Q^T b_K 1^T                                         (EB)
//!       + 1 b_Q^T W_K E^T + 1 b_Q^T W_K P^T                       (BE, BP)
//!       + b_Q . b_K                                               (BB)
//! ```
//!
//! where `W_QK = W_Q^T W_K`. Scores here are unscaled, matching
//! [`BlockTrace::scores`](crate::encoders::BlockTrace).

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, EncoderWeights, PosEncoding};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Term {
    EE,
    EP,
    PE,
    PP,
    EB,
    BE,
    BP,
    BB,
}

impl Term {
    pub const ALL: [Term; 8] = [Term::EE, Term::EP, Term::PE, Term::PP, Term::EB, Term::BE, Term::BP, Term::BB];

    pub fn name(self) -> &'static str {
        match self {
            Term::EE => "EE",
            Term::EP => "EP",
            Term::PE => "PE",
            Term::PP => "PP",
            Term::EB => "EB",
            Term::BE => "BE",
            Term::BP => "BP",
            Term::BB => "BB",
        }
    }

    pub fn parse(s: &str) -> Option<Term> {
        Term::ALL.into_iter().find(|t| t.name().eq_ignore_ascii_case(s))
    }

    fn index(self) -> usize {
        Term::ALL.iter().position(|&t| t == self).expect("listed term")
    }
}

/// The eight `[n, n]` term matrices of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTerms {
    pub terms: [Tensor<f64>; 8],
}

impl HeadTerms {
    pub fn get(&self, t: Term) -> &Tensor<f64> {
        &self.terms[t.index()]
    }

    /// `X W_QK X^T = EE + EP + PE + PP`.
    pub fn xwx(&self) -> Tensor<f64> {
        let mut s = self.get(Term::EE).clone();
        for t in [Term::EP, Term::PE, Term::PP] {
            s.add_assign(self.get(t));
        }
        s
    }

    /// Sum of all eight terms, i.e. the head's raw `Q K^T`.
    pub fn total(&self) -> Tensor<f64> {
        let mut s = self.xwx();
        for t in [Term::EB, Term::BE, Term::BP, Term::BB] {
            s.add_assign(self.get(t));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitDecomposition {
    pub tokens: Vec<usize>,
    pub heads: Vec<HeadTerms>,
}

/// Per-head matrices shared by every input to the same block.
pub(crate) struct HeadMaps {
    w_q: Tensor<f64>,
    w_k: Tensor<f64>,
    b_q: Vec<f64>,
    b_k: Vec<f64>,
}

/// Precomputed state for decomposing many inputs against one block.
pub struct Decomposer {
    tok_emb: Tensor<f64>,
    pos_emb: Tensor<f64>,
    heads: Vec<HeadMaps>,
}

impl Decomposer {
    /// Prepares the first block of a learned-position encoder. The first
    /// block is the only one whose input is exactly `E + P`; deeper blocks
    /// see mixed residual streams and are out of reach of this split.
    pub fn new<T: Scalar>(weights: &EncoderWeights<T>, cfg: &EncoderConfig) -> Result<Self> {
        if cfg.pos_encoding != PosEncoding::Learned {
            return Err(Error::UnsupportedMode(format!(
                "{:?} encoder has no positional table, so EP/PE/PP are undefined",
                cfg.pos_encoding
            )));
        }
        let blk = &weights.blocks[cfg.block_for_application(0)];
        if blk.ln1.is_some() {
            return Err(Error::UnsupportedMode("LayerNorm before attention breaks the E + P split".into()));
        }
        let a = &blk.attn;
        let dh = cfg.d_head;
        let heads = (0..cfg.m_h)
            .map(|h| HeadMaps {
                w_q: EncoderWeights::head_rows(&a.w_q, h, dh).cast(),
                w_k: EncoderWeights::head_rows(&a.w_k, h, dh).cast(),
                b_q: EncoderWeights::head_bias(&a.b_q, h, dh).iter().map(|x| x.as_f64()).collect(),
                b_k: EncoderWeights::head_bias(&a.b_k, h, dh).iter().map(|x| x.as_f64()).collect(),
            })
            .collect();
        Ok(Decomposer {
            tok_emb: weights.tok_emb.cast(),
            pos_emb: weights.pos_emb.as_ref().expect("learned positional table").cast(),
            heads,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// Token rows `E` and position rows `P` of one input.
    pub fn embeddings(&self, tokens: &[usize]) -> (Tensor<f64>, Tensor<f64>) {
        let n = tokens.len();
        let e = Tensor::from_fn(n, self.tok_emb.cols(), |i, j| self.tok_emb.at(tokens[i], j));
        let p = self.pos_emb.slice_rows(0, n);
        (e, p)
    }

    pub fn decompose(&self, tokens: &[usize]) -> LogitDecomposition {
        let (e, p) = self.embeddings(tokens);
        let x = e.zip_map(&p, |a, b| a + b);
        let n = tokens.len();
        let heads = self
            .heads
            .iter()
            .map(|hm| {
                // Project first: E W_QK P^T = (E W_Q^T)(P W_K^T)^T.
                let (qe, qp) = (e.matmul_t(false, &hm.w_q, true), p.matmul_t(false, &hm.w_q, true));
                let (ke, kp) = (e.matmul_t(false, &hm.w_k, true), p.matmul_t(false, &hm.w_k, true));
                let qx = x.matmul_t(false, &hm.w_q, true);
                let dotv = |m: &Tensor<f64>, v: &[f64]| -> Vec<f64> {
                    (0..m.rows()).map(|i| m.row(i).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
                };
                let eb = dotv(&qx, &hm.b_k);
                let be = dotv(&ke, &hm.b_q);
                let bp = dotv(&kp, &hm.b_q);
                let bb: f64 = hm.b_q.iter().zip(&hm.b_k).map(|(a, b)| a * b).sum();
                HeadTerms {
                    terms: [
                        qe.matmul_t(false, &ke, true),
                        qe.matmul_t(false, &kp, true),
                        qp.matmul_t(false, &ke, true),
                        qp.matmul_t(false, &kp, true),
                        Tensor::from_fn(n, n, |i, _| eb[i]),
                        Tensor::from_fn(n, n, |_, j| be[j]),
                        Tensor::from_fn(n, n, |_, j| bp[j]),
                        Tensor::full([n, n], bb),
                    ],
                }
            })
            .collect();
        LogitDecomposition { tokens: tokens.to_vec(), heads }
    }

    /// `[n, m_h*d_head]` position part of `V`, `P W_V^T`, for the first block.
    pub(crate) fn value_positions<T: Scalar>(weights: &EncoderWeights<T>, cfg: &EncoderConfig, n: usize) -> Tensor<f64> {
        let w_v: Tensor<f64> = weights.blocks[cfg.block_for_application(0)].attn.w_v.cast();
        let p: Tensor<f64> = weights.pos_emb.as_ref().expect("learned positional table").cast();
        p.slice_rows(0, n).matmul_t(false, &w_v, true)
    }
}

/// Decomposes the first block's per-head raw scores for one input sequence.
pub fn decompose_logits<T: Scalar>(
    weights: &EncoderWeights<T>,
    cfg: &EncoderConfig,
    tokens: &[usize],
) -> Result<LogitDecomposition> {
    Ok(Decomposer::new(weights, cfg)?.decompose(tokens))
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Spread of each term along the class-token row of one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowStd {
    pub head: usize,
    /// Population std across all columns, in [`Term::ALL`] order.
    pub terms: Vec<(Term, f64)>,
    pub xwx: f64,
    pub total: f64,
}

impl RowStd {
    pub fn term(&self, t: Term) -> f64 {
        self.terms[t.index()].1
    }
}

/// Population standard deviation across row `row` (the class token for
/// vision encoders) of every term, of `X W_QK X^T` and of the total.
pub fn cls_row_std(decomp: &LogitDecomposition, row: usize) -> Vec<RowStd> {
    decomp
        .heads
        .iter()
        .enumerate()
        .map(|(head, h)| RowStd {
            head,
            terms: Term::ALL.iter().map(|&t| (t, population_std(h.get(t).row(row)))).collect(),
            xwx: population_std(h.xwx().row(row)),
            total: population_std(h.total().row(row)),
        })
        .collect()
}

/// Share of the total row spread carried by `X W_QK X^T`, as the ratio of
/// means over many inputs (one `cls_row_std` result per input).
pub fn xwx_share(per_input: &[Vec<RowStd>], head: usize) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for s in per_input {
        num += s[head].xwx;
        den += s[head].total;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}
