//! Which object each head's class token attends to, and why.

use serde::{Deserialize, Serialize};

use super::decompose::{Decomposer, Term};
use crate::dataset::{Example, SceneKind};
use crate::encoders::{encode_batch, vision_tokens, EncoderConfig, EncoderWeights, PosEncoding};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
    Background,
}

/// One head on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadObservation {
    pub image: usize,
    pub head: usize,
    pub attended: Side,
    /// `EE[cls, right] - EE[cls, left]`; absent without a positional table.
    pub delta_label: Option<f64>,
    /// `EP[cls, right] - EP[cls, left]`.
    pub delta_pe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSummary {
    pub head: usize,
    pub n_left: usize,
    pub n_right: usize,
    pub n_background: usize,
    pub p_left: f64,
    pub p_right: f64,
    pub p_background: f64,
    /// The more frequently attended object side (ties go left).
    pub majority: Side,
    /// Share of images where `|delta_label| < |delta_pe|` and the sign of
    /// `delta_pe` points to `majority` (positive means right).
    pub relational_rate: Option<f64>,
    /// Share of images where `|delta_label| >= |delta_pe|`.
    pub label_specific_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadBiasStats {
    pub n_images: usize,
    pub heads: Vec<HeadSummary>,
    pub observations: Vec<HeadObservation>,
}

/// Tallies, for every head, where the class-token attention of the first
/// block peaks over pixel columns (the class column is excluded), and the
/// token and position parts of the left/right logit gap.
pub fn head_bias<T: Scalar>(weights: &EncoderWeights<T>, cfg: &EncoderConfig, images: &[Example]) -> Result<HeadBiasStats> {
    for (i, ex) in images.iter().enumerate() {
        if ex.scene.kind != SceneKind::Pair || ex.image.objects().len() != 2 {
            return Err(Error::Invalid(format!("image {i} does not hold exactly two objects")));
        }
    }
    let w64: EncoderWeights<f64> = weights.cast();
    let decomposer = match cfg.pos_encoding {
        PosEncoding::Learned => Some(Decomposer::new(&w64, cfg)?),
        _ => None,
    };
    let mut observations = Vec::with_capacity(images.len() * cfg.m_h);
    const CHUNK: usize = 128;
    for (c, chunk) in images.chunks(CHUNK).enumerate() {
        let seqs: Vec<Vec<usize>> = chunk.iter().map(|e| vision_tokens(cfg, &e.image.0)).collect();
        let (_, trace) = encode_batch(&w64, cfg, &seqs, true, None);
        let trace = trace.expect("trace requested");
        for (s, ex) in chunk.iter().enumerate() {
            let image = c * CHUNK + s;
            // Pixel p sits at sequence position p + 1.
            let (left, right) = (ex.scene.positions[0] + 1, ex.scene.positions[1] + 1);
            let decomp = decomposer.as_ref().map(|d| d.decompose(&seqs[s]));
            for head in 0..cfg.m_h {
                let att = trace.attention(0, s, head);
                let row = att.row(0);
                let best = (1..row.len()).fold(1, |b, j| if row[j] > row[b] { j } else { b });
                let attended = if best == left {
                    Side::Left
                } else if best == right {
                    Side::Right
                } else {
                    Side::Background
                };
                let gap = |t: Term| {
                    decomp.as_ref().map(|d| {
                        let m: &Tensor<f64> = d.heads[head].get(t);
                        m.at(0, right) - m.at(0, left)
                    })
                };
                observations.push(HeadObservation {
                    image,
                    head,
                    attended,
                    delta_label: gap(Term::EE),
                    delta_pe: gap(Term::EP),
                });
            }
        }
    }
    let heads = (0..cfg.m_h).map(|h| summarize(h, &observations, images.len())).collect();
    Ok(HeadBiasStats { n_images: images.len(), heads, observations })
}

fn summarize(head: usize, obs: &[HeadObservation], n: usize) -> HeadSummary {
    let mine: Vec<&HeadObservation> = obs.iter().filter(|o| o.head == head).collect();
    let count = |s: Side| mine.iter().filter(|o| o.attended == s).count();
    let (l, r) = (count(Side::Left), count(Side::Right));
    let b = mine.len() - l - r;
    let nf = n.max(1) as f64;
    let majority = if r > l { Side::Right } else { Side::Left };
    let has_deltas = mine.first().map(|o| o.delta_pe.is_some()).unwrap_or(false);
    let (relational_rate, label_specific_rate) = if has_deltas {
        let mut rel = 0;
        let mut lab = 0;
        for o in &mine {
            let (dl, dp) = (o.delta_label.unwrap(), o.delta_pe.unwrap());
            let toward = if dp > 0.0 { Side::Right } else { Side::Left };
            if dl.abs() < dp.abs() && toward == majority {
                rel += 1;
            }
            if dl.abs() >= dp.abs() {
                lab += 1;
            }
        }
        (Some(rel as f64 / nf), Some(lab as f64 / nf))
    } else {
        (None, None)
    };
    HeadSummary {
        head,
        n_left: l,
        n_right: r,
        n_background: b,
        p_left: l as f64 / nf,
        p_right: r as f64 / nf,
        p_background: b as f64 / nf,
        majority,
        relational_rate,
        label_specific_rate,
    }
}
