use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relclip::encoders::{
    encode, encode_batch, forward, init_weights, vision_tokens, EncoderConfig, EncoderWeights, ForwardOptions,
    Intervention, PosEncoding,
};
use relclip::numerics::{gradcheck, softmax_in_place, Tape, Tensor};

fn small(n_tot: usize, d_image: usize) -> EncoderConfig {
    EncoderConfig { m_h: 2, d_head: 4, d_model: 6, d_mlp: 8, dropout: 0.0, ..EncoderConfig::vision(n_tot, d_image) }
}

// Plain-loop reference implementation, written without the tape.
mod naive {
    use super::*;

    pub type M = Vec<Vec<f64>>;

    pub fn t(w: &Tensor<f64>) -> M {
        (0..w.rows()).map(|r| w.row(r).to_vec()).collect()
    }

    fn lin(x: &M, w: &Tensor<f64>, b: &Tensor<f64>) -> M {
        let w = t(w);
        x.iter()
            .map(|row| w.iter().enumerate().map(|(o, wr)| b.data()[o] + wr.iter().zip(row).map(|(a, c)| a * c).sum::<f64>()).collect())
            .collect()
    }

    fn ln(x: &M, g: &Tensor<f64>, b: &Tensor<f64>) -> M {
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mu = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
                r.iter().enumerate().map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g.data()[i] + b.data()[i]).collect()
            })
            .collect()
    }

    fn gelu(v: f64) -> f64 {
        0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
    }

    pub fn encode(w: &EncoderWeights<f64>, cfg: &EncoderConfig, tokens: &[usize]) -> Vec<f64> {
        let n = tokens.len();
        let mut x: M = tokens.iter().map(|&id| w.tok_emb.row(id).to_vec()).collect();
        if let Some(p) = &w.pos_emb {
            for (i, r) in x.iter_mut().enumerate() {
                for (a, b) in r.iter_mut().zip(p.row(i)) {
                    *a += b;
                }
            }
        }
        for app in 0..cfg.n_applications() {
            let blk = &w.blocks[cfg.block_for_application(app)];
            let h = match &blk.ln1 {
                Some(l) => ln(&x, &l.gain, &l.bias),
                None => x.clone(),
            };
            let a = &blk.attn;
            let (q, k, v) = (lin(&h, &a.w_q, &a.b_q), lin(&h, &a.w_k, &a.b_k), lin(&h, &a.w_v, &a.b_v));
            let dh = cfg.d_head;
            let mut mixed = vec![vec![0.0; cfg.m_h * dh]; n];
            for head in 0..cfg.m_h {
                let cols = head * dh..(head + 1) * dh;
                for i in 0..n {
                    let mut s: Vec<f64> = (0..n)
                        .map(|j| {
                            if cfg.causal && j > i {
                                f64::NEG_INFINITY
                            } else {
                                cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                            }
                        })
                        .collect();
                    softmax_in_place(&mut s);
                    for c in cols.clone() {
                        mixed[i][c] = (0..n).map(|j| s[j] * v[j][c]).sum();
                    }
                }
            }
            let o = lin(&mixed, &a.w_o, &a.b_o);
            for (r, d) in x.iter_mut().zip(&o) {
                for (a, b) in r.iter_mut().zip(d) {
                    *a += b;
                }
            }
            if let Some(m) = &blk.mlp {
                let h2 = match &blk.ln2 {
                    Some(l) => ln(&x, &l.gain, &l.bias),
                    None => x.clone(),
                };
                let hid: M = lin(&h2, &m.w_in, &m.b_in).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
                let out = lin(&hid, &m.w_out, &m.b_out);
                for (r, d) in x.iter_mut().zip(&out) {
                    for (a, b) in r.iter_mut().zip(d) {
                        *a += b;
                    }
                }
            }
        }
        let pos = match cfg.readout {
            relclip::encoders::Readout::ClsFirst => 0,
            relclip::encoders::Readout::EotLast => n - 1,
        };
        let mut r = vec![x[pos].clone()];
        if let Some(l) = &w.ln_final {
            r = ln(&r, &l.gain, &l.bias);
        }
        r.remove(0)
    }
}

/// Larger embeddings so attention departs from uniform at init.
fn sharpened(mut w: EncoderWeights<f64>) -> EncoderWeights<f64> {
    w.tok_emb = w.tok_emb.scale(50.0);
    if let Some(p) = &mut w.pos_emb {
        *p = p.scale(50.0);
    }
    w
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn three_token_encoder_matches_hand_composition() {
    let cfg = small(3, 2);
    let w = init_weights::<f64>(&cfg, 7);
    let tokens = vision_tokens(&cfg, &[2, 0]);
    assert_eq!(tokens, vec![4, 2, 0]);
    let (rep, _) = encode(&w, &cfg, &tokens);
    assert!(max_diff(&rep, &naive::encode(&w, &cfg, &tokens)) < 1e-12);
}

#[test]
fn full_blocks_and_text_encoder_match_reference() {
    for (cfg, tokens) in [
        (small(4, 5).full(2, 2), vec![5, 0, 3, 0, 1, 0]),
        (EncoderConfig { tied_repetition: false, ..small(4, 5).full(1, 3) }, vec![5, 1, 0, 0, 2, 0]),
        (EncoderConfig { d_model: 6, m_h: 2, d_head: 4, ..EncoderConfig::text(4) }, vec![0, 4, 5, 8]),
        (EncoderConfig { d_model: 6, m_h: 2, d_head: 4, ..EncoderConfig::text(4).full(1, 2) }, vec![2, 4, 5, 8]),
    ] {
        let w = init_weights::<f64>(&cfg, 3);
        let (rep, _) = encode(&w, &cfg, &tokens);
        assert!(max_diff(&rep, &naive::encode(&w, &cfg, &tokens)) < 1e-12, "{cfg:?}");
    }
}

#[test]
fn readout_only_matches_full_pass() {
    for cfg in [small(5, 6), small(5, 6).full(2, 2), EncoderConfig { d_model: 6, m_h: 2, d_head: 4, ..EncoderConfig::text(5) }] {
        let w = init_weights::<f64>(&cfg, 11);
        let n = cfg.max_seq_len;
        let batch: Vec<Vec<usize>> = (0..3).map(|b| (0..n).map(|i| (i * 3 + b) % (cfg.vocab_size - 1)).collect()).collect();
        let full = encode_batch(&w, &cfg, &batch, false, None).0;
        let tape = Tape::new();
        let bound = w.bind_constant(&tape);
        let opts = ForwardOptions { readout_only: true, ..ForwardOptions::inference() };
        let fast = forward(&bound, &cfg, &batch, opts).readout.value();
        assert!(max_diff(full.data(), fast.data()) < 1e-12);
    }
}

#[test]
fn text_attention_is_lower_triangular() {
    let cfg = EncoderConfig::text(10);
    let w = init_weights::<f64>(&cfg, 1);
    let (_, tr) = encode(&w, &cfg, &[3, 10, 11, 14]);
    for h in 0..cfg.m_h {
        let a = tr.attention(0, 0, h);
        for i in 0..4 {
            for j in i + 1..4 {
                assert_eq!(a.at(i, j), 0.0);
            }
        }
    }
}

#[test]
fn trace_weights_are_softmax_of_scaled_scores() {
    let cfg = EncoderConfig::vision(10, 10);
    let w = init_weights::<f64>(&cfg, 2);
    let tokens = vision_tokens(&cfg, &[0, 3, 0, 0, 7, 0, 0, 0, 0, 0]);
    let (_, tr) = encode(&w, &cfg, &tokens);
    for h in 0..cfg.m_h {
        let logits = tr.logits(0, 0, h);
        let a = tr.attention(0, 0, h);
        for i in 0..tokens.len() {
            let mut row = logits.row(i).to_vec();
            softmax_in_place(&mut row);
            assert!(max_diff(&row, a.row(i)) < 1e-12);
        }
    }
}

#[test]
fn without_positions_pixel_order_is_irrelevant() {
    let cfg = EncoderConfig { pos_encoding: PosEncoding::None, ..EncoderConfig::vision(10, 10) };
    let w = sharpened(init_weights::<f64>(&cfg, 4));
    assert!(w.pos_emb.is_none());
    let a = encode(&w, &cfg, &vision_tokens(&cfg, &[0, 3, 0, 0, 7, 0, 0, 0, 0, 0])).0;
    let b = encode(&w, &cfg, &vision_tokens(&cfg, &[7, 0, 0, 0, 0, 0, 0, 3, 0, 0])).0;
    assert!(max_diff(&a, &b) < 1e-12);
    let cfg = EncoderConfig::vision(10, 10);
    let w = sharpened(init_weights::<f64>(&cfg, 4));
    let a = encode(&w, &cfg, &vision_tokens(&cfg, &[0, 3, 0, 0, 7, 0, 0, 0, 0, 0])).0;
    let b = encode(&w, &cfg, &vision_tokens(&cfg, &[0, 7, 0, 0, 3, 0, 0, 0, 0, 0])).0;
    assert!(max_diff(&a, &b) > 1e-6);
}

#[test]
fn rope_encoder_has_no_position_table() {
    let cfg = EncoderConfig { pos_encoding: PosEncoding::Rope, ..EncoderConfig::vision(10, 10) };
    let w = sharpened(init_weights::<f64>(&cfg, 4));
    assert!(w.pos_emb.is_none());
    let a = encode(&w, &cfg, &vision_tokens(&cfg, &[0, 3, 0, 0, 7, 0, 0, 0, 0, 0])).0;
    let b = encode(&w, &cfg, &vision_tokens(&cfg, &[0, 7, 0, 0, 3, 0, 0, 0, 0, 0])).0;
    assert!(max_diff(&a, &b) > 1e-6);
}

#[test]
fn reduced_vision_encoder_shapes() {
    let cfg = EncoderConfig::vision(10, 10);
    let w = init_weights::<f32>(&cfg, 0);
    assert_eq!(w.blocks.len(), 1);
    assert_eq!(w.blocks[0].attn.w_q.shape(), &[128, 128]);
    assert_eq!(EncoderWeights::head_rows(&w.blocks[0].attn.w_q, 2, 32).shape(), &[32, 128]);
    assert_eq!(w.tok_emb.shape(), &[12, 128]);
    assert!(w.blocks[0].mlp.is_none() && w.blocks[0].ln1.is_none() && w.ln_final.is_none());
    let (rep, _) = encode(&w, &cfg, &vision_tokens(&cfg, &[0; 10]));
    assert_eq!(rep.len(), 128);
}

#[test]
fn embedding_init_has_expected_spread() {
    let cfg = EncoderConfig { vocab_size: 800, ..EncoderConfig::vision(10, 10) };
    let w = init_weights::<f64>(&cfg, 9);
    let d = w.tok_emb.data();
    assert!(d.len() >= 100_000);
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
    assert!((std - 0.02).abs() < 0.002, "{std}");
}

#[test]
fn init_is_deterministic_in_seed() {
    let cfg = EncoderConfig::vision(10, 10);
    assert_eq!(init_weights::<f32>(&cfg, 5), init_weights::<f32>(&cfg, 5));
    assert_ne!(init_weights::<f32>(&cfg, 5), init_weights::<f32>(&cfg, 6));
}

#[test]
fn zero_intervention_is_bit_identical() {
    let cfg = EncoderConfig::vision(10, 10);
    let w = init_weights::<f64>(&cfg, 2);
    let batch = vec![vision_tokens(&cfg, &[0, 3, 0, 0, 7, 0, 0, 0, 0, 0])];
    let (base, tr) = encode_batch(&w, &cfg, &batch, true, None);
    let tr = tr.unwrap();
    let none = Intervention { block_application: 0, score_offsets: None, value_offsets: None };
    assert_eq!(encode_batch(&w, &cfg, &batch, false, Some(&none)).0, base);
    let zeros = Intervention {
        block_application: 0,
        score_offsets: Some(Tensor::zeros(tr.blocks[0].scores.shape().to_vec())),
        value_offsets: Some(Tensor::zeros(tr.blocks[0].v.shape().to_vec())),
    };
    assert_eq!(encode_batch(&w, &cfg, &batch, false, Some(&zeros)).0, base);
    // Removing every score equalises attention over the sequence.
    let all = Intervention { score_offsets: Some(tr.blocks[0].scores.clone()), ..none };
    let (_, t2) = encode_batch(&w, &cfg, &batch, true, Some(&all));
    let a = t2.unwrap().attention(0, 0, 1);
    assert!(a.data().iter().all(|&p| (p - 1.0 / 11.0).abs() < 1e-12));
}

#[test]
fn training_dropout_changes_output_and_inference_does_not() {
    let cfg = EncoderConfig::vision(10, 10);
    let w = init_weights::<f32>(&cfg, 2);
    let batch = vec![vision_tokens(&cfg, &[0, 3, 0, 0, 7, 0, 0, 0, 0, 0])];
    let tape = Tape::new();
    let bound = w.bind(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let opts = ForwardOptions { train: true, rng: Some(&mut rng), ..ForwardOptions::inference() };
    let trained = forward(&bound, &cfg, &batch, opts).readout.value();
    let eval = encode_batch(&w, &cfg, &batch, false, None).0;
    assert_ne!(*trained, eval);
    assert_eq!(eval, encode_batch(&w, &cfg, &batch, false, None).0);
}

#[test]
fn encoder_gradients_match_finite_differences() {
    for cfg in [small(3, 3), small(3, 3).full(1, 2), EncoderConfig { pos_encoding: PosEncoding::Rope, ..small(3, 3) }] {
        let w = init_weights::<f64>(&cfg, 13);
        let mut inputs = Vec::new();
        w.map(|_, t| inputs.push(t.clone()));
        let batch = vec![vec![4, 1, 0, 2], vec![4, 0, 3, 0]];
        let res = gradcheck::check(&inputs, 1e-5, 1, |_tape, vars| {
            let mut i = 0;
            let bound = w.map(|_, _| {
                i += 1;
                vars[i - 1]
            });
            forward(&bound, &cfg, &batch, ForwardOptions::inference()).readout
        });
        assert!(res.max_rel_error() < 1e-4, "{:?}", res.rel_errors);
    }
}

#[test]
fn pruning_keeps_selected_heads() {
    let cfg = EncoderConfig::vision(10, 10);
    let w = init_weights::<f64>(&cfg, 3);
    let pruned = w.prune_heads(&cfg, &[1, 3]);
    let pcfg = EncoderConfig { m_h: 2, ..cfg.clone() };
    let a = &pruned.blocks[0].attn;
    assert_eq!(a.w_q.shape(), &[64, 128]);
    assert_eq!(a.w_o.shape(), &[128, 64]);
    assert_eq!(a.w_k.slice_rows(32, 64), w.blocks[0].attn.w_k.slice_rows(96, 128));
    assert_eq!(a.w_o.slice_cols(0, 32), w.blocks[0].attn.w_o.slice_cols(32, 64));
    // Same output as zeroing the value and output paths of dropped heads.
    let mut masked = w.clone();
    for h in [0, 2] {
        let o = &mut masked.blocks[0].attn.w_o;
        for r in 0..128 {
            for c in h * 32..(h + 1) * 32 {
                o.set(r, c, 0.0);
            }
        }
    }
    let toks = vision_tokens(&cfg, &[0, 3, 0, 0, 7, 0, 0, 0, 0, 0]);
    assert!(max_diff(&encode(&pruned, &pcfg, &toks).0, &encode(&masked, &cfg, &toks).0) < 1e-12);
}
