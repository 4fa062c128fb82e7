//! The two-tower contrastive model: vision encoder, text encoder, a linear
//! text projection into the vision width, and a learnable logit scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::dataset::{Caption, DatasetConfig, ImageSeq};
use crate::encoders::{encode_batch, init_weights, vision_tokens, EncoderConfig, EncoderParams, EncoderWeights};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::seed::derive_seed;

/// Upper bound on the logit scale.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    pub vision: EncoderConfig,
    pub text: EncoderConfig,
}

impl ClipConfig {
    /// Reduced single-layer encoders sized for `data`.
    pub fn reduced(data: &DatasetConfig) -> Self {
        ClipConfig { vision: EncoderConfig::vision(data.n_tot, data.d_image), text: EncoderConfig::text(data.n_tot) }
    }

    pub fn validate(&self, data: &DatasetConfig) -> Result<()> {
        self.vision.validate("vision")?;
        self.text.validate("text")?;
        if self.vision.vocab_size != data.n_tot + 2 {
            return Err(Error::Config(format!(
                "vision.vocab_size: expected n_tot + 2 = {}, got {}",
                data.n_tot + 2,
                self.vision.vocab_size
            )));
        }
        if self.vision.max_seq_len < data.d_image + 1 {
            return Err(Error::Config(format!("vision.max_seq_len: needs at least d_image + 1 = {}", data.d_image + 1)));
        }
        if self.text.vocab_size != data.n_tot + 5 {
            return Err(Error::Config(format!(
                "text.vocab_size: expected n_tot + 5 = {}, got {}",
                data.n_tot + 5,
                self.text.vocab_size
            )));
        }
        if self.text.max_seq_len < 4 {
            return Err(Error::Config("text.max_seq_len: captions have 4 tokens".into()));
        }
        if !self.text.causal {
            return Err(Error::Config("text.causal: the caption encoder must be causal".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipModel<T> {
    pub vision: EncoderWeights<T>,
    pub text: EncoderWeights<T>,
    /// `[d_text, d_vision]`, applied as `text_rep · proj`.
    pub proj: Tensor<T>,
    /// Natural log of the logit scale, shape `[1]`.
    pub log_scale: Tensor<T>,
}

/// A model bound to a tape.
pub struct BoundClip<'t, T: Scalar> {
    pub vision: EncoderParams<Var<'t, T>>,
    pub text: EncoderParams<Var<'t, T>>,
    pub proj: Var<'t, T>,
    pub log_scale: Var<'t, T>,
}

impl<'t, T: Scalar> BoundClip<'t, T> {
    /// Logit scale `exp(min(log_scale, ln 100))`.
    pub fn scale(&self) -> Var<'t, T> {
        self.log_scale.clamp_max(T::of(MAX_LOGIT_SCALE.ln())).exp()
    }

    /// Variables in [`ClipModel::names`] order.
    pub fn vars(&self) -> Vec<Var<'t, T>> {
        let mut out: Vec<Var<'t, T>> = self.vision.slots().into_iter().copied().collect();
        out.extend(self.text.slots().into_iter().copied());
        out.push(self.proj);
        out.push(self.log_scale);
        out
    }
}

impl<T: Scalar> ClipModel<T> {
    pub fn init(cfg: &ClipConfig, seed: u64) -> Self {
        let vision = init_weights(&cfg.vision, derive_seed(seed, "init.vision"));
        let text = init_weights(&cfg.text, derive_seed(seed, "init.text"));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init.proj"));
        let (dt, dv) = (cfg.text.d_model, cfg.vision.d_model);
        let bound = 1.0 / (dt as f64).sqrt();
        let proj = Tensor::new([dt, dv], (0..dt * dv).map(|_| T::of(rng.gen_range(-bound..bound))).collect());
        ClipModel { vision, text, proj, log_scale: Tensor::new([1], vec![T::of((1.0f64 / 0.07).ln())]) }
    }

    pub fn logit_scale(&self) -> f64 {
        self.log_scale.data()[0].as_f64().min(MAX_LOGIT_SCALE.ln()).exp()
    }

    /// Dotted parameter names in a fixed order.
    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = self.vision.names().into_iter().map(|n| format!("vision.{n}")).collect();
        out.extend(self.text.names().into_iter().map(|n| format!("text.{n}")));
        out.push("proj".into());
        out.push("log_scale".into());
        out
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        self.vision.visit_mut(|n, t| f(&format!("vision.{n}"), t));
        self.text.visit_mut(|n, t| f(&format!("text.{n}"), t));
        f("proj", &mut self.proj);
        f("log_scale", &mut self.log_scale);
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = self.vision.slots();
        out.extend(self.text.slots());
        out.push(&self.proj);
        out.push(&self.log_scale);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.vision.slots_mut();
        out.extend(self.text.slots_mut());
        out.push(&mut self.proj);
        out.push(&mut self.log_scale);
        out
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundClip<'t, T> {
        BoundClip {
            vision: self.vision.bind(tape),
            text: self.text.bind(tape),
            proj: tape.param(self.proj.clone()),
            log_scale: tape.param(self.log_scale.clone()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ClipModel<U> {
        ClipModel {
            vision: self.vision.cast(),
            text: self.text.cast(),
            proj: self.proj.cast(),
            log_scale: self.log_scale.cast(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// `[n, d_vision]` image representations in inference mode.
    pub fn embed_images(&self, cfg: &ClipConfig, images: &[&ImageSeq]) -> Tensor<T> {
        let seqs: Vec<Vec<usize>> = images.iter().map(|im| vision_tokens(&cfg.vision, &im.0)).collect();
        self.embed_chunked(&seqs, |chunk| encode_batch(&self.vision, &cfg.vision, chunk, false, None).0)
    }

    /// `[n, d_vision]` projected caption representations in inference mode.
    pub fn embed_captions(&self, cfg: &ClipConfig, captions: &[Caption]) -> Tensor<T> {
        let seqs: Vec<Vec<usize>> = captions.iter().map(|c| c.0.iter().map(|&t| t as usize).collect()).collect();
        self.embed_chunked(&seqs, |chunk| encode_batch(&self.text, &cfg.text, chunk, false, None).0.matmul(&self.proj))
    }

    fn embed_chunked(&self, seqs: &[Vec<usize>], f: impl Fn(&[Vec<usize>]) -> Tensor<T>) -> Tensor<T> {
        const CHUNK: usize = 256;
        let mut data = Vec::new();
        let mut cols = 0;
        for chunk in seqs.chunks(CHUNK) {
            let out = f(chunk);
            cols = out.cols();
            data.extend_from_slice(out.data());
        }
        Tensor::new([seqs.len(), cols], data)
    }
}

impl ClipModel<f32> {
    pub fn to_checkpoint(&self, cfg: &ClipConfig, meta: CheckpointMeta) -> Checkpoint {
        let arrays = self.names().into_iter().zip(self.tensors()).map(|(n, t)| (n, t.clone())).collect();
        Checkpoint { config: serde_json::to_value(cfg).expect("config serializes"), metadata: meta, arrays }
    }

    /// Rebuilds the model and its config from a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(ClipConfig, Self)> {
        let cfg: ClipConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Invalid(format!("checkpoint config: {e}")))?;
        let mut model = ClipModel::<f32>::init(&cfg, 0);
        let mut missing = None;
        model.visit_mut(|name, t| match ckpt.get(name) {
            Some(src) if src.shape() == t.shape() => *t = src.clone(),
            _ => missing = missing.take().or(Some(name.to_string())),
        });
        if let Some(name) = missing {
            return Err(Error::Invalid(format!("checkpoint lacks a matching array `{name}`")));
        }
        if ckpt.arrays.len() != model.names().len() {
            return Err(Error::Invalid("checkpoint has arrays the config does not describe".into()));
        }
        Ok((cfg, model))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_and_tensors_align() {
        let data = DatasetConfig::standard(10, 5);
        let cfg = ClipConfig::reduced(&data);
        let m = ClipModel::<f32>::init(&cfg, 1);
        let names = m.names();
        let tensors = m.tensors();
        assert_eq!(names.len(), tensors.len());
        assert_eq!(names.last().unwrap(), "log_scale");
        let mut visited = Vec::new();
        m.clone().visit_mut(|n, t| visited.push((n.to_string(), t.shape().to_vec())));
        assert_eq!(visited.iter().map(|v| v.0.clone()).collect::<Vec<_>>(), names);
        for ((_, shape), t) in visited.iter().zip(&tensors) {
            assert_eq!(shape.as_slice(), t.shape());
        }
        assert!((m.logit_scale() - 1.0 / 0.07).abs() < 1e-3);
        assert_eq!(m.proj.shape(), &[128, 128]);
    }

    #[test]
    fn checkpoint_round_trip_preserves_weights() {
        let data = DatasetConfig::standard(10, 5);
        let cfg = ClipConfig::reduced(&data);
        let m = ClipModel::<f32>::init(&cfg, 3);
        let ckpt = m.to_checkpoint(&cfg, CheckpointMeta { seed: 3, epoch: 0, note: String::new() });
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, std::path::Path::new("m")).unwrap();
        let (cfg2, m2) = ClipModel::from_checkpoint(&back).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(m2, m);
    }

    #[test]
    fn config_validation_names_keys() {
        let data = DatasetConfig::standard(10, 5);
        let mut cfg = ClipConfig::reduced(&data);
        cfg.text.vocab_size += 1;
        let e = cfg.validate(&data).unwrap_err();
        assert!(e.is_config() && e.to_string().contains("text.vocab_size"));
    }
}
