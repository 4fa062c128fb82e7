//! Inference with selected logit terms or the positional value part removed.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::decompose::{Decomposer, Term};
use crate::dataset::{SplitBundle, SplitName};
use crate::encoders::{encode_batch, vision_tokens, EncoderConfig, EncoderWeights, Intervention};
use crate::error::{Error, Result};
use crate::evaluation::{cosine_matrix, score_split, VALIDATION_SPLITS};
use crate::model::{ClipConfig, ClipModel};
use crate::numerics::{Scalar, Tensor};

/// Terms subtracted from the first block's scores of every head, and
/// optionally the position part `P W_V^T` of its values.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub terms: Vec<Term>,
    pub zero_vp: bool,
}

impl AblationSpec {
    pub fn baseline() -> Self {
        Self::default()
    }

    pub fn is_baseline(&self) -> bool {
        self.terms.is_empty() && !self.zero_vp
    }

    /// Parses `"EP+PE+VP"`-style lists; `"baseline"` and `""` are empty.
    pub fn parse(s: &str) -> Result<Self> {
        let mut spec = AblationSpec::default();
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            if part.eq_ignore_ascii_case("baseline") {
                continue;
            }
            if part.eq_ignore_ascii_case("VP") {
                spec.zero_vp = true;
            } else if let Some(t) = Term::parse(part) {
                if !spec.terms.contains(&t) {
                    spec.terms.push(t);
                }
            } else {
                return Err(Error::Config(format!("ablation: unknown term `{part}`")));
            }
        }
        spec.terms.sort();
        Ok(spec)
    }
}

impl fmt::Display for AblationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_baseline() {
            return f.write_str("baseline");
        }
        let mut parts: Vec<&str> = self.terms.iter().map(|t| t.name()).collect();
        if self.zero_vp {
            parts.push("VP");
        }
        f.write_str(&parts.join("+"))
    }
}

/// Builds the score and value offsets that realize `spec` for a batch.
pub fn intervention_for<T: Scalar>(
    weights: &EncoderWeights<T>,
    cfg: &EncoderConfig,
    batch: &[Vec<usize>],
    spec: &AblationSpec,
) -> Result<Intervention<T>> {
    let dec = Decomposer::new(weights, cfg)?;
    let n = batch[0].len();
    let score_offsets = (!spec.terms.is_empty()).then(|| {
        let mut data = Vec::with_capacity(batch.len() * cfg.m_h * n * n);
        for seq in batch {
            let d = dec.decompose(seq);
            for h in &d.heads {
                let mut sum = Tensor::<f64>::zeros([n, n]);
                for &t in &spec.terms {
                    sum.add_assign(h.get(t));
                }
                data.extend(sum.data().iter().map(|&x| T::of(x)));
            }
        }
        Tensor::new([batch.len() * cfg.m_h * n, n], data)
    });
    let value_offsets = spec.zero_vp.then(|| {
        let vp = Decomposer::value_positions(weights, cfg, n);
        let data: Vec<T> = batch.iter().flat_map(|_| vp.data().iter().map(|&x| T::of(x))).collect();
        Tensor::new([batch.len() * n, vp.cols()], data)
    });
    Ok(Intervention { block_application: 0, score_offsets, value_offsets })
}

/// `[batch, d_model]` readouts with `spec` applied at the first block. The
/// empty spec runs the plain forward pass.
pub fn ablated_encode<T: Scalar>(
    weights: &EncoderWeights<T>,
    cfg: &EncoderConfig,
    batch: &[Vec<usize>],
    spec: &AblationSpec,
) -> Result<Tensor<T>> {
    if spec.is_baseline() {
        return Ok(encode_batch(weights, cfg, batch, false, None).0);
    }
    let iv = intervention_for(weights, cfg, batch, spec)?;
    Ok(encode_batch(weights, cfg, batch, false, Some(&iv)).0)
}

/// One line of the tidy ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub spec: String,
    pub metric: String,
    pub value: f64,
}

fn metric_name(s: SplitName) -> &'static str {
    match s {
        SplitName::SinglePos => "acc_single_pos",
        SplitName::SeenPairConfig => "acc_seen_pair_cfg",
        SplitName::UnseenPair => "acc_unseen_pair",
        SplitName::Train => "acc_train",
    }
}

/// Validation accuracies of the vision-ablated model for each spec. Metrics
/// are the three split accuracies, `acc_unseen_top1` and `acc_label_set`
/// (both on unseen pairs).
pub fn ablation_study<T: Scalar>(
    model: &ClipModel<T>,
    cfg: &ClipConfig,
    bundle: &SplitBundle,
    specs: &[AblationSpec],
) -> Result<Vec<AblationRow>> {
    let vocab = bundle.vocab();
    let universe = &bundle.text_universe;
    let text: Tensor<f64> = model.embed_captions(cfg, universe).cast();
    let mut rows = Vec::new();
    for spec in specs {
        let name = spec.to_string();
        for split in VALIDATION_SPLITS {
            let exs = bundle.split(split);
            let seqs: Vec<Vec<usize>> = exs.iter().map(|e| vision_tokens(&cfg.vision, &e.image.0)).collect();
            let mut data = Vec::new();
            let mut cols = 0;
            for chunk in seqs.chunks(256) {
                let out = ablated_encode(&model.vision, &cfg.vision, chunk, spec)?;
                cols = out.cols();
                data.extend(out.data().iter().map(|x| x.as_f64()));
            }
            let imgs = Tensor::new([seqs.len(), cols], data);
            let rep = score_split(split, &cosine_matrix(&imgs, &text), exs, universe, &vocab);
            rows.push(AblationRow { spec: name.clone(), metric: metric_name(split).into(), value: rep.accuracy });
            if split == SplitName::UnseenPair {
                rows.push(AblationRow { spec: name.clone(), metric: "acc_unseen_top1".into(), value: rep.top1_any });
                rows.push(AblationRow { spec: name.clone(), metric: "acc_label_set".into(), value: rep.label_set });
            }
        }
    }
    Ok(rows)
}

/// Writes `spec,metric,value` rows.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
