//! Contrastive training of the two encoders and the text projection.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointMeta;
use crate::dataset::{CaptionMode, Example, SplitBundle, SplitName};
use crate::encoders::{forward, vision_tokens, ForwardOptions};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::metrics::{MetricsLog, MetricsRow, MetricsWriter};
use crate::model::{ClipConfig, ClipModel, MAX_LOGIT_SCALE};
use crate::numerics::{OptimizerConfig, OptimizerKind, OptimizerState, ParamSlot, Scalar, Tape, Tensor, Var};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LogitScale {
    /// Learned in log space from `1/0.07`, capped at 100.
    #[default]
    LearnableClipInit,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// Defaults to 50 for left-only captions and 100 otherwise.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Overrides both encoders' dropout when set.
    #[serde(default)]
    pub dropout: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub logit_scale: LogitScale,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// In left-and-right mode, feed both captions of a two-object image as
    /// separate rows instead of sampling one per epoch.
    #[serde(default)]
    pub duplicate_caption_rows: bool,
    /// Extra epochs at which to write a checkpoint; the final epoch always is.
    #[serde(default)]
    pub checkpoint_epochs: Vec<usize>,
}

fn d_lr() -> f64 {
    1e-4
}
fn d_wd() -> f64 {
    0.2
}
fn d_epochs() -> usize {
    10_000
}
fn d_eval_every() -> usize {
    50
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: d_lr(),
            weight_decay: d_wd(),
            epochs: d_epochs(),
            batch_size: None,
            dropout: None,
            seed: 0,
            eval_every: d_eval_every(),
            logit_scale: LogitScale::default(),
            optimizer: OptimizerKind::default(),
            duplicate_caption_rows: false,
            checkpoint_epochs: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn batch_size_for(&self, mode: CaptionMode) -> usize {
        self.batch_size.unwrap_or(match mode {
            CaptionMode::LeftOnly => 50,
            CaptionMode::LeftAndRight => 100,
        })
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig { kind: self.optimizer, lr: self.lr, weight_decay: self.weight_decay, ..OptimizerConfig::default() }
    }

    pub fn validate(&self, bundle: &SplitBundle) -> Result<()> {
        let bad = |k: &str, why: String| Err(Error::Config(format!("train.{k}: {why}")));
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        let bs = self.batch_size_for(bundle.config.caption_mode);
        if bs == 0 || bs > bundle.train.len() {
            return bad("batch_size", format!("{bs} must lie in 1..={} (training images)", bundle.train.len()));
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be finite and non-negative".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be finite and non-negative".into());
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return bad("dropout", "must lie in [0, 1)".into());
            }
        }
        if let LogitScale::Fixed(s) = self.logit_scale {
            if !(s > 0.0 && s <= MAX_LOGIT_SCALE) {
                return bad("logit_scale", format!("fixed value must lie in (0, {MAX_LOGIT_SCALE}]"));
            }
        }
        Ok(())
    }

    /// Model config with the dropout override applied.
    pub fn effective_model(&self, cfg: &ClipConfig) -> ClipConfig {
        let mut out = cfg.clone();
        if let Some(p) = self.dropout {
            out.vision.dropout = p;
            out.text.dropout = p;
        }
        out
    }
}

/// Symmetric contrastive loss `(CE(S) + CE(S^T)) / 2` with
/// `S_ij = scale * cos(image_i, text_j)`; row `i` of each input is a matched pair.
pub fn clip_loss<'t, T: Scalar>(images: Var<'t, T>, texts: Var<'t, T>, scale: Var<'t, T>) -> Var<'t, T> {
    let b = images.value().rows();
    assert_eq!(b, texts.value().rows(), "image and text batches differ in size");
    let s = images.l2_normalize_rows().matmul_t(false, texts.l2_normalize_rows(), true).mul_scalar(scale);
    let targets: Vec<usize> = (0..b).collect();
    s.cross_entropy_rows(&targets).add(s.transpose().cross_entropy_rows(&targets)).scale(T::of(0.5))
}

pub struct TrainState {
    pub config: ClipConfig,
    pub model: ClipModel<f32>,
    pub optimizer: OptimizerState,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    /// Mean loss over the most recent epoch.
    pub running_loss: f64,
}

/// Exempt from weight decay: LayerNorm parameters and the logit scale.
pub fn decays(name: &str) -> bool {
    name != "log_scale" && !name.split('.').any(|p| p.starts_with("ln"))
}

impl TrainState {
    pub fn new(cfg: &ClipConfig, tc: &TrainConfig) -> Self {
        let config = tc.effective_model(cfg);
        let mut model = ClipModel::<f32>::init(&config, derive_seed(tc.seed, "init"));
        if let LogitScale::Fixed(s) = tc.logit_scale {
            model.log_scale = Tensor::new([1], vec![s.ln() as f32]);
        }
        Self::from_model(config, model, tc)
    }

    /// Fresh optimizer and training RNG around existing weights.
    pub fn from_model(config: ClipConfig, model: ClipModel<f32>, tc: &TrainConfig) -> Self {
        let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        TrainState {
            config,
            optimizer: OptimizerState::new::<f32>(tc.optimizer_config(), sizes),
            model,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, "train")),
            running_loss: f64::NAN,
        }
    }

    fn checkpoint(&self, seed: u64, note: &str) -> crate::checkpoint::Checkpoint {
        self.model.to_checkpoint(&self.config, CheckpointMeta { seed, epoch: self.epoch, note: note.into() })
    }
}

/// One row of a training batch.
#[derive(Debug, Clone, Copy)]
struct Item {
    example: usize,
    caption: usize,
}

fn epoch_items(train: &[Example], tc: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Item> {
    let mut items: Vec<Item> = if tc.duplicate_caption_rows {
        train
            .iter()
            .enumerate()
            .flat_map(|(i, e)| (0..e.captions.len()).map(move |c| Item { example: i, caption: c }))
            .collect()
    } else {
        (0..train.len()).map(|i| Item { example: i, caption: 0 }).collect()
    };
    items.shuffle(rng);
    if !tc.duplicate_caption_rows {
        for it in &mut items {
            let n = train[it.example].captions.len();
            if n > 1 {
                it.caption = rng.gen_range(0..n);
            }
        }
    }
    items
}

fn batch_loss<'t>(
    tape: &'t Tape<f32>,
    state: &mut TrainState,
    train: &[Example],
    batch: &[Item],
    tc: &TrainConfig,
    training: bool,
) -> (Var<'t, f32>, Vec<Var<'t, f32>>) {
    let cfg = &state.config;
    let bound = state.model.bind(tape);
    let images: Vec<Vec<usize>> = batch.iter().map(|it| vision_tokens(&cfg.vision, &train[it.example].image.0)).collect();
    let captions: Vec<Vec<usize>> =
        batch.iter().map(|it| train[it.example].captions[it.caption].0.iter().map(|&t| t as usize).collect()).collect();
    fn opts(train: bool, rng: &mut ChaCha8Rng) -> ForwardOptions<'_, f32> {
        ForwardOptions { train, rng: Some(rng), readout_only: true, trace: false, intervention: None }
    }
    let img = forward(&bound.vision, &cfg.vision, &images, opts(training, &mut state.rng)).readout;
    let txt = forward(&bound.text, &cfg.text, &captions, opts(training, &mut state.rng)).readout.matmul(bound.proj);
    let scale = match tc.logit_scale {
        LogitScale::LearnableClipInit => bound.scale(),
        LogitScale::Fixed(s) => tape.constant(Tensor::new([1], vec![s as f32])),
    };
    (clip_loss(img, txt, scale), bound.vars())
}

/// Mean loss over the training set in inference mode, in unshuffled batches.
pub fn dataset_loss(state: &mut TrainState, bundle: &SplitBundle, tc: &TrainConfig) -> f64 {
    let bs = tc.batch_size_for(bundle.config.caption_mode);
    let items: Vec<Item> = (0..bundle.train.len()).map(|i| Item { example: i, caption: 0 }).collect();
    let mut total = 0.0;
    for batch in items.chunks(bs) {
        let tape = Tape::new();
        let (loss, _) = batch_loss(&tape, state, &bundle.train, batch, tc, false);
        total += loss.value().item() as f64 * batch.len() as f64;
    }
    total / items.len() as f64
}

/// Runs one epoch of shuffled mini-batch updates and returns the mean batch loss.
pub fn train_epoch(state: &mut TrainState, bundle: &SplitBundle, tc: &TrainConfig) -> Result<f64> {
    let bs = tc.batch_size_for(bundle.config.caption_mode);
    let items = epoch_items(&bundle.train, tc, &mut state.rng);
    let mut total = 0.0;
    for batch in items.chunks(bs) {
        let tape = Tape::new();
        let (loss, vars) = batch_loss(&tape, state, &bundle.train, batch, tc, true);
        let l = loss.value().item();
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {}", state.epoch + 1)));
        }
        tape.backward(loss);
        let grads: Vec<Tensor<f32>> = vars.iter().map(|v| tape.grad_or_zeros(*v)).collect();
        let names = state.model.names();
        let mut slots: Vec<ParamSlot<'_, f32>> = state
            .model
            .tensors_mut()
            .into_iter()
            .zip(&grads)
            .zip(&names)
            .map(|((value, grad), name)| ParamSlot { name, value, grad, decay: decays(name) })
            .collect();
        state.optimizer.step(&mut slots)?;
        total += l as f64 * batch.len() as f64;
    }
    state.epoch += 1;
    state.running_loss = total / items.len() as f64;
    Ok(state.running_loss)
}

fn metrics_row(state: &TrainState, bundle: &SplitBundle, loss: f64) -> MetricsRow {
    let report = evaluate(&state.model, &state.config, bundle);
    MetricsRow {
        epoch: state.epoch,
        train_loss: loss,
        acc_single_pos: report.set(SplitName::SinglePos).accuracy,
        acc_seen_pair_cfg: report.set(SplitName::SeenPairConfig).accuracy,
        acc_unseen_pair: report.set(SplitName::UnseenPair).accuracy,
        acc_label_set: report.set(SplitName::UnseenPair).label_set,
        logit_scale: state.model.logit_scale(),
    }
}

/// Trains a fresh model. With `out_dir`, streams `metrics.csv` and
/// `loss.csv` there and writes checkpoints under `checkpoints/` plus
/// `final.ckpt`.
pub fn train(bundle: &SplitBundle, cfg: &ClipConfig, tc: &TrainConfig, out_dir: Option<&Path>) -> Result<(TrainState, MetricsLog)> {
    cfg.validate(&bundle.config)?;
    tc.validate(bundle)?;
    let state = TrainState::new(cfg, tc);
    continue_training(state, bundle, tc, tc.epochs, out_dir)
}

/// Trains `epochs` more epochs from `state`, logging at the start, every
/// `eval_every` epochs and at the end.
pub fn continue_training(
    mut state: TrainState,
    bundle: &SplitBundle,
    tc: &TrainConfig,
    epochs: usize,
    out_dir: Option<&Path>,
) -> Result<(TrainState, MetricsLog)> {
    tc.validate(bundle)?;
    let mut writer = None;
    let mut loss_file = None;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        writer = Some(MetricsWriter::create(&dir.join("metrics.csv"))?);
        let p = dir.join("loss.csv");
        let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        writeln!(f, "epoch,train_loss").map_err(|e| Error::io(&p, e))?;
        loss_file = Some((p, f));
    }
    let mut log = MetricsLog::default();
    let first = dataset_loss(&mut state, bundle, tc);
    let row = metrics_row(&state, bundle, first);
    log.rows.push(row.clone());
    if let Some(w) = writer.as_mut() {
        w.push(&row)?;
    }
    let start = state.epoch;
    for _ in 0..epochs {
        let loss = match train_epoch(&mut state, bundle, tc) {
            Ok(l) => l,
            Err(e) => {
                if let Some(dir) = out_dir {
                    state.checkpoint(tc.seed, "nan_abort").save(&dir.join("nan_abort.ckpt"))?;
                }
                return Err(e);
            }
        };
        let done = state.epoch - start;
        if let Some((p, f)) = loss_file.as_mut() {
            writeln!(f, "{},{}", state.epoch, loss).map_err(|e| Error::io(&*p, e))?;
        }
        log::debug!("epoch {} loss {loss:.5}", state.epoch);
        if done.is_multiple_of(tc.eval_every) || done == epochs {
            let row = metrics_row(&state, bundle, loss);
            log::info!(
                "epoch {} loss {:.4} single {:.3} seen {:.3} unseen {:.3}",
                row.epoch,
                row.train_loss,
                row.acc_single_pos,
                row.acc_seen_pair_cfg,
                row.acc_unseen_pair
            );
            if let Some(w) = writer.as_mut() {
                w.push(&row)?;
            }
            log.rows.push(row);
        }
        if let Some(dir) = out_dir {
            if tc.checkpoint_epochs.contains(&state.epoch) {
                state.checkpoint(tc.seed, "").save(&dir.join(format!("checkpoints/epoch_{:06}.ckpt", state.epoch)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        state.checkpoint(tc.seed, "final").save(&dir.join("final.ckpt"))?;
    }
    if let Some(w) = writer {
        w.finish()?;
    }
    Ok((state, log))
}
