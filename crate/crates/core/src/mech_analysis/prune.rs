use std::path::Path;

use crate::dataset::SplitBundle;
use crate::error::{Error, Result};
use crate::metrics::MetricsLog;
use crate::model::{ClipConfig, ClipModel};
use crate::training::{continue_training, TrainConfig, TrainState};

/// Vision model restricted to `keep` heads in every block.
pub fn prune_vision_heads(model: &ClipModel<f32>, cfg: &ClipConfig, keep: &[usize]) -> Result<(ClipConfig, ClipModel<f32>)> {
    if keep.is_empty() {
        return Err(Error::Config("prune.keep_heads: must keep at least one head".into()));
    }
    let m_h = cfg.vision.m_h;
    if let Some(&h) = keep.iter().find(|&&h| h >= m_h) {
        return Err(Error::Config(format!("prune.keep_heads: head {h} out of range 0..{m_h}")));
    }
    let mut sorted = keep.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != keep.len() {
        return Err(Error::Config("prune.keep_heads: duplicate head".into()));
    }
    let mut new_cfg = cfg.clone();
    new_cfg.vision.m_h = keep.len();
    let mut pruned = model.clone();
    pruned.vision = model.vision.prune_heads(&cfg.vision, keep);
    Ok((new_cfg, pruned))
}

/// Prunes vision heads and keeps training with a fresh optimizer.
pub fn prune_and_retrain(
    model: &ClipModel<f32>,
    cfg: &ClipConfig,
    bundle: &SplitBundle,
    tc: &TrainConfig,
    keep: &[usize],
    extra_epochs: usize,
    out_dir: Option<&Path>,
) -> Result<(TrainState, MetricsLog)> {
    let (new_cfg, pruned) = prune_vision_heads(model, cfg, keep)?;
    let state = TrainState::from_model(tc.effective_model(&new_cfg), pruned, tc);
    continue_training(state, bundle, tc, extra_epochs, out_dir)
}

/// Every non-empty head subset, smallest first.
pub fn all_head_subsets(m_h: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> =
        (1u32..(1 << m_h)).map(|mask| (0..m_h).filter(|&h| mask & (1 << h) != 0).collect()).collect();
    out.sort_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));
    out
}
