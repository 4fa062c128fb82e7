//! Parameter layout of an encoder, generic over the slot type so the same
//! structure holds stored tensors and their tape variables.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{EncoderConfig, PosEncoding};
use crate::numerics::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LnParams<P> {
    pub gain: P,
    pub bias: P,
}

/// Multi-head attention. Head `h` owns rows `h*d_head..(h+1)*d_head` of the
/// query/key/value projections (each `[m_h*d_head, d_model]`) and the same
/// column range of `w_o` (`[d_model, m_h*d_head]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnParams<P> {
    pub w_q: P,
    pub b_q: P,
    pub w_k: P,
    pub b_k: P,
    pub w_v: P,
    pub b_v: P,
    pub w_o: P,
    pub b_o: P,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams<P> {
    pub w_in: P,
    pub b_in: P,
    pub w_out: P,
    pub b_out: P,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams<P> {
    pub ln1: Option<LnParams<P>>,
    pub attn: AttnParams<P>,
    pub ln2: Option<LnParams<P>>,
    pub mlp: Option<MlpParams<P>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams<P> {
    /// `[vocab_size, d_model]`; for images the last row is the class token.
    pub tok_emb: P,
    /// `[max_seq_len, d_model]`, absent under rope or no positional encoding.
    pub pos_emb: Option<P>,
    pub blocks: Vec<BlockParams<P>>,
    pub ln_final: Option<LnParams<P>>,
}

pub type EncoderWeights<T> = EncoderParams<Tensor<T>>;

impl<P> LnParams<P> {
    fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> LnParams<Q> {
        LnParams { gain: f(&format!("{prefix}.gain"), &self.gain), bias: f(&format!("{prefix}.bias"), &self.bias) }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&format!("{prefix}.gain"), &mut self.gain);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<P> EncoderParams<P> {
    /// Applies `f` to every slot in a fixed order, passing dotted names.
    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> EncoderParams<Q> {
        let f = &mut f;
        EncoderParams {
            tok_emb: f("tok_emb", &self.tok_emb),
            pos_emb: self.pos_emb.as_ref().map(|p| f("pos_emb", p)),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    let pre = format!("blocks.{i}");
                    let a = &b.attn;
                    let name = |s: &str| format!("{pre}.attn.{s}");
                    BlockParams {
                        ln1: b.ln1.as_ref().map(|l| l.map(&format!("{pre}.ln1"), f)),
                        attn: AttnParams {
                            w_q: f(&name("w_q"), &a.w_q),
                            b_q: f(&name("b_q"), &a.b_q),
                            w_k: f(&name("w_k"), &a.w_k),
                            b_k: f(&name("b_k"), &a.b_k),
                            w_v: f(&name("w_v"), &a.w_v),
                            b_v: f(&name("b_v"), &a.b_v),
                            w_o: f(&name("w_o"), &a.w_o),
                            b_o: f(&name("b_o"), &a.b_o),
                        },
                        ln2: b.ln2.as_ref().map(|l| l.map(&format!("{pre}.ln2"), f)),
                        mlp: b.mlp.as_ref().map(|m| MlpParams {
                            w_in: f(&format!("{pre}.mlp.w_in"), &m.w_in),
                            b_in: f(&format!("{pre}.mlp.b_in"), &m.b_in),
                            w_out: f(&format!("{pre}.mlp.w_out"), &m.w_out),
                            b_out: f(&format!("{pre}.mlp.b_out"), &m.b_out),
                        }),
                    }
                })
                .collect(),
            ln_final: self.ln_final.as_ref().map(|l| l.map("ln_final", f)),
        }
    }

    /// Mutable traversal in the same order as [`EncoderParams::map`].
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut P)) {
        let f = &mut f;
        f("tok_emb", &mut self.tok_emb);
        if let Some(p) = &mut self.pos_emb {
            f("pos_emb", p);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let pre = format!("blocks.{i}");
            if let Some(l) = &mut b.ln1 {
                l.visit_mut(&format!("{pre}.ln1"), f);
            }
            let a = &mut b.attn;
            f(&format!("{pre}.attn.w_q"), &mut a.w_q);
            f(&format!("{pre}.attn.b_q"), &mut a.b_q);
            f(&format!("{pre}.attn.w_k"), &mut a.w_k);
            f(&format!("{pre}.attn.b_k"), &mut a.b_k);
            f(&format!("{pre}.attn.w_v"), &mut a.w_v);
            f(&format!("{pre}.attn.b_v"), &mut a.b_v);
            f(&format!("{pre}.attn.w_o"), &mut a.w_o);
            f(&format!("{pre}.attn.b_o"), &mut a.b_o);
            if let Some(l) = &mut b.ln2 {
                l.visit_mut(&format!("{pre}.ln2"), f);
            }
            if let Some(m) = &mut b.mlp {
                f(&format!("{pre}.mlp.w_in"), &mut m.w_in);
                f(&format!("{pre}.mlp.b_in"), &mut m.b_in);
                f(&format!("{pre}.mlp.w_out"), &mut m.w_out);
                f(&format!("{pre}.mlp.b_out"), &mut m.b_out);
            }
        }
        if let Some(l) = &mut self.ln_final {
            l.visit_mut("ln_final", f);
        }
    }

    /// References to every slot in traversal order.
    pub fn slots(&self) -> Vec<&P> {
        let mut out = vec![&self.tok_emb];
        out.extend(&self.pos_emb);
        for b in &self.blocks {
            if let Some(l) = &b.ln1 {
                out.extend([&l.gain, &l.bias]);
            }
            let a = &b.attn;
            out.extend([&a.w_q, &a.b_q, &a.w_k, &a.b_k, &a.w_v, &a.b_v, &a.w_o, &a.b_o]);
            if let Some(l) = &b.ln2 {
                out.extend([&l.gain, &l.bias]);
            }
            if let Some(m) = &b.mlp {
                out.extend([&m.w_in, &m.b_in, &m.w_out, &m.b_out]);
            }
        }
        if let Some(l) = &self.ln_final {
            out.extend([&l.gain, &l.bias]);
        }
        out
    }

    /// Mutable references to every slot in traversal order.
    pub fn slots_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.tok_emb];
        out.extend(&mut self.pos_emb);
        for b in &mut self.blocks {
            if let Some(l) = &mut b.ln1 {
                out.extend([&mut l.gain, &mut l.bias]);
            }
            let a = &mut b.attn;
            out.extend([&mut a.w_q, &mut a.b_q, &mut a.w_k, &mut a.b_k, &mut a.w_v, &mut a.b_v, &mut a.w_o, &mut a.b_o]);
            if let Some(l) = &mut b.ln2 {
                out.extend([&mut l.gain, &mut l.bias]);
            }
            if let Some(m) = &mut b.mlp {
                out.extend([&mut m.w_in, &mut m.b_in, &mut m.w_out, &mut m.b_out]);
            }
        }
        if let Some(l) = &mut self.ln_final {
            out.extend([&mut l.gain, &mut l.bias]);
        }
        out
    }

    /// Slot names in traversal order.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.map(|n, _| out.push(n.to_string()));
        out
    }
}

impl<T: Scalar> EncoderWeights<T> {
    /// Registers every tensor as a trainable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> EncoderParams<Var<'t, T>> {
        self.map(|_, t| tape.param(t.clone()))
    }

    /// Registers every tensor as a constant (inference).
    pub fn bind_constant<'t>(&self, tape: &'t Tape<T>) -> EncoderParams<Var<'t, T>> {
        self.map(|_, t| tape.constant(t.clone()))
    }

    pub fn cast<U: Scalar>(&self) -> EncoderWeights<U> {
        self.map(|_, t| t.cast())
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.map(|_, t| n += t.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.map(|_, t| ok &= t.all_finite());
        ok
    }

    /// Rows of a per-head slice of a `[m_h*d_head, d_model]` projection.
    pub fn head_rows(t: &Tensor<T>, head: usize, d_head: usize) -> Tensor<T> {
        t.slice_rows(head * d_head, (head + 1) * d_head)
    }

    /// Per-head slice of a `[m_h*d_head]` bias.
    pub fn head_bias(t: &Tensor<T>, head: usize, d_head: usize) -> Vec<T> {
        t.data()[head * d_head..(head + 1) * d_head].to_vec()
    }

    /// Keeps only the listed heads in every block, slicing projections,
    /// biases and the matching output columns.
    pub fn prune_heads(&self, cfg: &EncoderConfig, keep: &[usize]) -> EncoderWeights<T> {
        let dh = cfg.d_head;
        let mut out = self.clone();
        for b in &mut out.blocks {
            let a = &b.attn;
            let rows = |t: &Tensor<T>| {
                let parts: Vec<Tensor<T>> = keep.iter().map(|&h| t.slice_rows(h * dh, (h + 1) * dh)).collect();
                let cols = t.cols();
                let data: Vec<T> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
                Tensor::new([keep.len() * dh, cols], data)
            };
            let bias = |t: &Tensor<T>| {
                let data: Vec<T> = keep.iter().flat_map(|&h| t.data()[h * dh..(h + 1) * dh].iter().copied()).collect();
                Tensor::new([keep.len() * dh], data)
            };
            let w_o_t = rows(&a.w_o.transpose()).transpose();
            b.attn = AttnParams {
                w_q: rows(&a.w_q),
                b_q: bias(&a.b_q),
                w_k: rows(&a.w_k),
                b_k: bias(&a.b_k),
                w_v: rows(&a.w_v),
                b_v: bias(&a.b_v),
                w_o: w_o_t,
                b_o: a.b_o.clone(),
            };
        }
        out
    }
}

/// Token and positional tables ~ N(0, 0.02); linear maps ~ U(+-1/sqrt(fan_in));
/// biases zero; LayerNorm gain one.
pub fn init_weights<T: Scalar>(cfg: &EncoderConfig, seed: u64) -> EncoderWeights<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let d = cfg.d_model;
    let w = cfg.attn_width();
    let emb = |rows: usize, rng: &mut ChaCha8Rng| -> Tensor<T> {
        Tensor::new([rows, d], (0..rows * d).map(|_| T::of(normal.sample(rng))).collect())
    };
    let tok_emb = emb(cfg.vocab_size, &mut rng);
    let pos_emb = (cfg.pos_encoding == PosEncoding::Learned).then(|| emb(cfg.max_seq_len, &mut rng));
    let linear = |out: usize, inp: usize, rng: &mut ChaCha8Rng| -> Tensor<T> {
        let bound = 1.0 / (inp as f64).sqrt();
        Tensor::new([out, inp], (0..out * inp).map(|_| T::of(rng.gen_range(-bound..bound))).collect())
    };
    let ln = || LnParams { gain: Tensor::full([d], T::one()), bias: Tensor::zeros([d]) };
    let blocks = (0..cfg.n_param_blocks())
        .map(|_| BlockParams {
            ln1: cfg.use_layernorm.then(ln),
            attn: AttnParams {
                w_q: linear(w, d, &mut rng),
                b_q: Tensor::zeros([w]),
                w_k: linear(w, d, &mut rng),
                b_k: Tensor::zeros([w]),
                w_v: linear(w, d, &mut rng),
                b_v: Tensor::zeros([w]),
                w_o: linear(d, w, &mut rng),
                b_o: Tensor::zeros([d]),
            },
            ln2: (cfg.use_layernorm && cfg.use_mlp).then(ln),
            mlp: cfg.use_mlp.then(|| MlpParams {
                w_in: linear(cfg.d_mlp, d, &mut rng),
                b_in: Tensor::zeros([cfg.d_mlp]),
                w_out: linear(d, cfg.d_mlp, &mut rng),
                b_out: Tensor::zeros([d]),
            }),
        })
        .collect();
    EncoderParams {
        tok_emb,
        pos_emb,
        blocks,
        ln_final: (cfg.use_layernorm && cfg.final_layernorm).then(ln),
    }
}
