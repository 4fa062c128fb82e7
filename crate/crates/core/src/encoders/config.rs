use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PosEncoding {
    #[default]
    Learned,
    Rope,
    None,
}

/// Which output row is the sequence representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Class token prepended at position 0.
    ClsFirst,
    /// End-of-text token at the final position.
    EotLast,
}

/// Architecture of one Transformer encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Distinct blocks per repetition.
    pub m_b: usize,
    /// Number of passes over the `m_b` blocks.
    pub m_rep: usize,
    pub m_h: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub d_model: usize,
    pub dropout: f64,
    pub causal: bool,
    pub use_layernorm: bool,
    pub use_mlp: bool,
    #[serde(default)]
    pub pos_encoding: PosEncoding,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub readout: Readout,
    /// Reuse the same `m_b` blocks on every repetition.
    #[serde(default = "yes")]
    pub tied_repetition: bool,
    /// LayerNorm on the readout row; only meaningful with `use_layernorm`.
    #[serde(default = "yes")]
    pub final_layernorm: bool,
}

fn default_rope_base() -> f64 {
    10000.0
}

fn yes() -> bool {
    true
}

impl EncoderConfig {
    /// Bidirectional image encoder over `[CLS] ++ pixels`. Pixel values
    /// `0..=n_tot` are token ids, and the class token is id `n_tot + 1`.
    pub fn vision(n_tot: usize, d_image: usize) -> Self {
        EncoderConfig {
            m_b: 1,
            m_rep: 1,
            m_h: 4,
            d_head: 32,
            d_mlp: 512,
            d_model: 128,
            dropout: 0.1,
            causal: false,
            use_layernorm: false,
            use_mlp: false,
            pos_encoding: PosEncoding::Learned,
            rope_base: 10000.0,
            vocab_size: n_tot + 2,
            max_seq_len: d_image + 1,
            readout: Readout::ClsFirst,
            tied_repetition: true,
            final_layernorm: true,
        }
    }

    /// Causal caption encoder over four-token captions.
    pub fn text(n_tot: usize) -> Self {
        EncoderConfig {
            causal: true,
            vocab_size: n_tot + 5,
            max_seq_len: 4,
            readout: Readout::EotLast,
            ..Self::vision(n_tot, 3)
        }
    }

    /// Full block (LayerNorm + MLP) variant with `m_b` blocks repeated `m_rep` times.
    pub fn full(mut self, m_b: usize, m_rep: usize) -> Self {
        self.m_b = m_b;
        self.m_rep = m_rep;
        self.use_layernorm = true;
        self.use_mlp = true;
        self
    }

    pub fn attn_width(&self) -> usize {
        self.m_h * self.d_head
    }

    /// Number of distinct parameter blocks.
    pub fn n_param_blocks(&self) -> usize {
        if self.tied_repetition {
            self.m_b
        } else {
            self.m_b * self.m_rep
        }
    }

    /// Parameter block used by the `i`-th block application.
    pub fn block_for_application(&self, i: usize) -> usize {
        if self.tied_repetition {
            i % self.m_b
        } else {
            i
        }
    }

    pub fn n_applications(&self) -> usize {
        self.m_b * self.m_rep
    }

    pub fn cls_token(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn validate(&self, which: &str) -> Result<()> {
        let bad = |k: &str, why: &str| Err(Error::Config(format!("{which}.{k}: {why}")));
        if self.m_b == 0 || self.m_rep == 0 {
            return bad("m_b", "m_b and m_rep must be at least 1");
        }
        if self.m_h == 0 || self.d_head == 0 || self.d_model == 0 {
            return bad("m_h", "m_h, d_head and d_model must be positive");
        }
        if self.use_mlp && self.d_mlp == 0 {
            return bad("d_mlp", "must be positive when use_mlp = true");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        if self.pos_encoding == PosEncoding::Rope && !self.d_head.is_multiple_of(2) {
            return bad("d_head", "must be even with rope positional encoding");
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad("vocab_size", "vocab_size and max_seq_len must be positive");
        }
        Ok(())
    }
}
