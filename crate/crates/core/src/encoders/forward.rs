//! Batched encoder forward pass on a tape, with optional attention tracing
//! and inference-time logit/value interventions.

use rand_chacha::ChaCha8Rng;

use super::config::{EncoderConfig, PosEncoding, Readout};
use super::params::{EncoderParams, EncoderWeights, LnParams};
use crate::numerics::{AttnDims, MaskLayout, Scalar, Tape, Tensor, Var};

/// Attention internals of one block application over a batch.
///
/// Row layouts follow [`AttnDims`]: `q`, `k`, `v` are `[batch*n, m_h*d_head]`,
/// `scores` and `weights` are `[batch*m_h*n, n]` with block `(b, h)` starting
/// at row `(b*m_h + h)*n`.
#[derive(Debug, Clone)]
pub struct BlockTrace<T> {
    /// Residual-stream input to the block, `[batch*n, d_model]`.
    pub input: Tensor<T>,
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// Raw `Q K^T` before scaling, masking and any intervention.
    pub scores: Tensor<T>,
    /// Post-softmax attention (dropout excluded).
    pub weights: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct AttentionTrace<T> {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub d_head: usize,
    /// One entry per block application, in execution order.
    pub blocks: Vec<BlockTrace<T>>,
}

impl<T: Scalar> AttentionTrace<T> {
    fn block_rows(&self, sample: usize, head: usize) -> (usize, usize) {
        let start = (sample * self.heads + head) * self.seq_len;
        (start, start + self.seq_len)
    }

    /// `[n, n]` attention weights of one head for one sample.
    pub fn attention(&self, block: usize, sample: usize, head: usize) -> Tensor<T> {
        let (s, e) = self.block_rows(sample, head);
        self.blocks[block].weights.slice_rows(s, e)
    }

    /// `[n, n]` raw `Q K^T` of one head for one sample.
    pub fn scores(&self, block: usize, sample: usize, head: usize) -> Tensor<T> {
        let (s, e) = self.block_rows(sample, head);
        self.blocks[block].scores.slice_rows(s, e)
    }

    /// Pre-softmax logits `Q K^T / sqrt(d_head)`.
    pub fn logits(&self, block: usize, sample: usize, head: usize) -> Tensor<T> {
        self.scores(block, sample, head).scale(T::one() / T::of(self.d_head as f64).sqrt())
    }

    pub fn input(&self, block: usize, sample: usize) -> Tensor<T> {
        let n = self.seq_len;
        self.blocks[block].input.slice_rows(sample * n, (sample + 1) * n)
    }
}

/// Subtractive edits applied at one block application during inference.
#[derive(Debug, Clone, Default)]
pub struct Intervention<T> {
    pub block_application: usize,
    /// Subtracted from raw `Q K^T`, laid out like [`BlockTrace::scores`].
    pub score_offsets: Option<Tensor<T>>,
    /// Subtracted from `V`, laid out like [`BlockTrace::v`].
    pub value_offsets: Option<Tensor<T>>,
}

/// How to run [`forward`].
pub struct ForwardOptions<'a, T> {
    pub train: bool,
    pub rng: Option<&'a mut ChaCha8Rng>,
    /// Compute only the readout row in the last block. Changes nothing about
    /// the result; it skips work whose output is discarded.
    pub readout_only: bool,
    pub trace: bool,
    pub intervention: Option<&'a Intervention<T>>,
}

impl<T> ForwardOptions<'_, T> {
    pub fn inference() -> Self {
        ForwardOptions { train: false, rng: None, readout_only: false, trace: false, intervention: None }
    }

    pub fn traced() -> Self {
        ForwardOptions { trace: true, ..Self::inference() }
    }
}

pub struct ForwardOutput<'t, T: Scalar> {
    /// `[batch, d_model]` readout rows.
    pub readout: Var<'t, T>,
    pub trace: Option<AttentionTrace<T>>,
}

fn layer_norm<'t, T: Scalar>(x: Var<'t, T>, ln: &LnParams<Var<'t, T>>) -> Var<'t, T> {
    x.layer_norm().mul_row(ln.gain).add_row(ln.bias)
}

fn linear<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    x.matmul_t(false, w, true).add_row(b)
}

/// Image token ids: class token followed by the pixel values.
pub fn vision_tokens(cfg: &EncoderConfig, pixels: &[u32]) -> Vec<usize> {
    std::iter::once(cfg.cls_token()).chain(pixels.iter().map(|&p| p as usize)).collect()
}

/// Runs the encoder on a batch of equal-length token sequences.
pub fn forward<'t, T: Scalar>(
    params: &EncoderParams<Var<'t, T>>,
    cfg: &EncoderConfig,
    batch: &[Vec<usize>],
    mut opts: ForwardOptions<'_, T>,
) -> ForwardOutput<'t, T> {
    assert!(!batch.is_empty(), "empty batch");
    let n = batch[0].len();
    assert!(batch.iter().all(|s| s.len() == n), "sequences in a batch must share a length");
    assert!(n >= 1 && n <= cfg.max_seq_len, "sequence length {n} exceeds max_seq_len {}", cfg.max_seq_len);
    let b = batch.len();
    let ids: Vec<usize> = batch.iter().flatten().copied().collect();
    for &t in &ids {
        assert!(t < cfg.vocab_size, "unknown token id {t} (vocab {})", cfg.vocab_size);
    }
    let readout_pos = match cfg.readout {
        Readout::ClsFirst => 0,
        Readout::EotLast => n - 1,
    };
    let readout_rows: Vec<usize> = (0..b).map(|i| i * n + readout_pos).collect();

    let mut x = params.tok_emb.embedding_lookup(&ids);
    if cfg.pos_encoding == PosEncoding::Learned {
        let pos = params.pos_emb.expect("learned positional table");
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        x = x.add(pos.embedding_lookup(&pos_ids));
    }
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
    let scale = T::one() / T::of(cfg.d_head as f64).sqrt();
    let mut trace = opts.trace.then(|| AttentionTrace {
        batch: b,
        seq_len: n,
        heads: cfg.m_h,
        d_head: cfg.d_head,
        blocks: Vec::new(),
    });

    let apps = cfg.n_applications();
    let mut reduced = false;
    for app in 0..apps {
        let blk = &params.blocks[cfg.block_for_application(app)];
        let last = app + 1 == apps;
        let only_readout = last && opts.readout_only && !opts.trace;
        let (n_query, q_positions, q_offset) =
            if only_readout { (1, vec![readout_pos; b], readout_pos) } else { (n, positions.clone(), 0) };
        let dims = AttnDims { batch: b, n_query, n_key: n, heads: cfg.m_h, d_head: cfg.d_head };

        let h = match &blk.ln1 {
            Some(ln) => layer_norm(x, ln),
            None => x,
        };
        let hq = if only_readout { h.gather_rows(&readout_rows) } else { h };
        let a = &blk.attn;
        let mut q = linear(hq, a.w_q, a.b_q);
        let mut k = linear(h, a.w_k, a.b_k);
        let v = linear(h, a.w_v, a.b_v);
        if cfg.pos_encoding == PosEncoding::Rope {
            q = q.rope(&q_positions, cfg.m_h, cfg.d_head, cfg.rope_base);
            k = k.rope(&positions, cfg.m_h, cfg.d_head, cfg.rope_base);
        }
        let raw = q.attn_scores(k, dims);
        let edit = opts.intervention.filter(|iv| iv.block_application == app);
        let mut scores = raw;
        if let Some(off) = edit.and_then(|iv| iv.score_offsets.as_ref()) {
            scores = scores.sub(scores.tape().constant(off.clone()));
        }
        let mut logits = scores.scale(scale);
        if cfg.causal {
            logits = logits.causal_mask(MaskLayout { n_query, n_key: n, query_offset: q_offset });
        }
        let weights = logits.row_softmax();
        let mut v_used = v;
        if let Some(off) = edit.and_then(|iv| iv.value_offsets.as_ref()) {
            v_used = v.sub(v.tape().constant(off.clone()));
        }
        if let Some(tr) = trace.as_mut() {
            tr.blocks.push(BlockTrace {
                input: (*x.value()).clone(),
                q: (*q.value()).clone(),
                k: (*k.value()).clone(),
                v: (*v.value()).clone(),
                scores: (*raw.value()).clone(),
                weights: (*weights.value()).clone(),
            });
        }
        let p = cfg.dropout;
        let train = opts.train;
        let mut drop = |v: Var<'t, T>| match opts.rng.as_deref_mut() {
            Some(rng) => v.dropout(p, train, rng),
            None => {
                assert!(!train || p == 0.0, "training with dropout needs an rng");
                v
            }
        };
        let attn_p = drop(weights);
        let mixed = attn_p.attn_mix(v_used, dims);
        let out = drop(linear(mixed, a.w_o, a.b_o));
        let resid = if only_readout { x.gather_rows(&readout_rows) } else { x };
        x = resid.add(out);
        if let Some(mlp) = &blk.mlp {
            let h2 = match &blk.ln2 {
                Some(ln) => layer_norm(x, ln),
                None => x,
            };
            let m = linear(linear(h2, mlp.w_in, mlp.b_in).gelu(), mlp.w_out, mlp.b_out);
            x = x.add(drop(m));
        }
        reduced = only_readout;
    }
    let mut readout = if reduced { x } else { x.gather_rows(&readout_rows) };
    if let Some(ln) = &params.ln_final {
        readout = layer_norm(readout, ln);
    }
    ForwardOutput { readout, trace }
}

/// Inference over a batch with constant weights: `[batch, d_model]` readouts
/// plus an optional trace.
pub fn encode_batch<T: Scalar>(
    weights: &EncoderWeights<T>,
    cfg: &EncoderConfig,
    batch: &[Vec<usize>],
    trace: bool,
    intervention: Option<&Intervention<T>>,
) -> (Tensor<T>, Option<AttentionTrace<T>>) {
    let tape = Tape::new();
    let bound = weights.bind_constant(&tape);
    let opts = ForwardOptions { trace, intervention, ..ForwardOptions::inference() };
    let out = forward(&bound, cfg, batch, opts);
    ((*out.readout.value()).clone(), out.trace)
}

/// Single-sequence inference: representation vector and attention trace.
pub fn encode<T: Scalar>(
    weights: &EncoderWeights<T>,
    cfg: &EncoderConfig,
    tokens: &[usize],
) -> (Vec<T>, AttentionTrace<T>) {
    let (rep, trace) = encode_batch(weights, cfg, &[tokens.to_vec()], true, None);
    (rep.into_data(), trace.expect("trace requested"))
}
