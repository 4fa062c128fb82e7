//! TOML experiment recipes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetConfig;
use crate::encoders::{EncoderConfig, PosEncoding};
use crate::error::{Error, Result};
use crate::mech_analysis::AblationSpec;
use crate::model::ClipConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    /// One attention-only block per encoder.
    #[default]
    Reduced,
    /// Two blocks repeated twice, with LayerNorm and MLP.
    Full,
}

/// Optional field-by-field edits to an encoder config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderOverride {
    pub m_b: Option<usize>,
    pub m_rep: Option<usize>,
    pub m_h: Option<usize>,
    pub d_head: Option<usize>,
    pub d_model: Option<usize>,
    pub d_mlp: Option<usize>,
    pub dropout: Option<f64>,
    pub use_layernorm: Option<bool>,
    pub use_mlp: Option<bool>,
    pub pos_encoding: Option<PosEncoding>,
    pub rope_base: Option<f64>,
    pub tied_repetition: Option<bool>,
    pub final_layernorm: Option<bool>,
}

impl EncoderOverride {
    fn apply(&self, c: &mut EncoderConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { c.$f = v; })*};
        }
        set!(m_b, m_rep, m_h, d_head, d_model, d_mlp, dropout, use_layernorm, use_mlp, pos_encoding, rope_base, tied_repetition, final_layernorm);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub preset: ModelPreset,
    /// Applied to both encoders before the per-encoder edits.
    #[serde(default)]
    pub shared: EncoderOverride,
    #[serde(default)]
    pub vision: EncoderOverride,
    #[serde(default)]
    pub text: EncoderOverride,
}

impl ModelSpec {
    pub fn build(&self, data: &DatasetConfig) -> ClipConfig {
        let mut cfg = ClipConfig::reduced(data);
        if self.preset == ModelPreset::Full {
            cfg.vision = cfg.vision.full(2, 2);
            cfg.text = cfg.text.full(2, 2);
        }
        self.shared.apply(&mut cfg.vision);
        self.shared.apply(&mut cfg.text);
        self.vision.apply(&mut cfg.vision);
        self.text.apply(&mut cfg.text);
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSpec {
    /// Head subsets to keep; empty means every non-empty subset.
    #[serde(default)]
    pub keep: Vec<Vec<usize>>,
    #[serde(default = "d_prune_epochs")]
    pub extra_epochs: usize,
}

fn d_prune_epochs() -> usize {
    10_000
}

impl Default for PruneSpec {
    fn default() -> Self {
        PruneSpec { keep: Vec::new(), extra_epochs: d_prune_epochs() }
    }
}

fn yes() -> bool {
    true
}

fn d_phase_threshold() -> f64 {
    0.95
}

fn d_phase_patience() -> usize {
    3
}

fn d_examples() -> usize {
    2
}

/// Which analyses a run performs after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisToggles {
    #[serde(default = "yes")]
    pub dataset_export: bool,
    /// Image-by-caption cosine matrices for the validation splits.
    #[serde(default = "yes")]
    pub similarity: bool,
    #[serde(default = "yes")]
    pub phases: bool,
    #[serde(default = "d_phase_threshold")]
    pub phase_threshold: f64,
    /// Consecutive logged evaluations that must stay at or above the threshold.
    #[serde(default = "d_phase_patience")]
    pub phase_patience: usize,
    /// Attention maps of the first unseen pairs and their mirror images.
    #[serde(default)]
    pub attention: bool,
    /// How many unseen pairs `attention` and `decomposition` draw.
    #[serde(default = "d_examples")]
    pub examples: usize,
    /// Term heatmaps for the example images and class-row spreads over
    /// every unseen pair.
    #[serde(default)]
    pub decomposition: bool,
    #[serde(default)]
    pub head_bias: bool,
    /// Ablation specs such as `"EP"` or `"EP+PE+PP+BP+VP"`; empty disables.
    #[serde(default)]
    pub ablations: Vec<String>,
    #[serde(default)]
    pub rotation: bool,
    /// Labels used to fit the rotation; defaults to the pair-training labels.
    #[serde(default)]
    pub rotation_fit_labels: Option<Vec<u32>>,
    #[serde(default)]
    pub rope: bool,
    #[serde(default)]
    pub pe_consistency: bool,
    #[serde(default)]
    pub text_attention: bool,
    #[serde(default)]
    pub prune: Option<PruneSpec>,
}

impl Default for AnalysisToggles {
    fn default() -> Self {
        AnalysisToggles {
            dataset_export: true,
            similarity: true,
            phases: true,
            phase_threshold: d_phase_threshold(),
            phase_patience: d_phase_patience(),
            attention: false,
            examples: d_examples(),
            decomposition: false,
            head_bias: false,
            ablations: Vec::new(),
            rotation: false,
            rotation_fit_labels: None,
            rope: false,
            pe_consistency: false,
            text_attention: false,
            prune: None,
        }
    }
}

/// Ablation specs used when a toggle list asks for `ablation` without naming any.
pub const DEFAULT_ABLATIONS: [&str; 7] = ["baseline", "EP", "PE", "PP", "BP", "VP", "EP+PE+PP+BP+VP"];

/// Names accepted by [`AnalysisToggles::from_names`].
pub const TOGGLE_NAMES: [&str; 11] = [
    "similarity",
    "phases",
    "attention",
    "decomposition",
    "head_bias",
    "ablation",
    "rotation",
    "rope",
    "pe_consistency",
    "text_attention",
    "prune",
];

impl AnalysisToggles {
    /// Everything off except what is named. `ablation` enables the default
    /// spec list and `prune` every head subset.
    pub fn from_names(names: &[&str]) -> Result<Self> {
        let mut t = AnalysisToggles {
            dataset_export: false,
            similarity: false,
            phases: false,
            ..AnalysisToggles::default()
        };
        for &n in names {
            match n.trim() {
                "similarity" => t.similarity = true,
                "phases" => t.phases = true,
                "attention" => t.attention = true,
                "decomposition" => t.decomposition = true,
                "head_bias" => t.head_bias = true,
                "ablation" => t.ablations = DEFAULT_ABLATIONS.iter().map(|s| s.to_string()).collect(),
                "rotation" => t.rotation = true,
                "rope" => t.rope = true,
                "pe_consistency" => t.pe_consistency = true,
                "text_attention" => t.text_attention = true,
                "prune" => t.prune = Some(PruneSpec::default()),
                "" => {}
                other => {
                    return Err(Error::Config(format!(
                        "toggles: unknown `{other}`; valid: {}",
                        TOGGLE_NAMES.join(", ")
                    )))
                }
            }
        }
        Ok(t)
    }

    pub fn ablation_specs(&self) -> Result<Vec<AblationSpec>> {
        self.ablations.iter().map(|s| AblationSpec::parse(s)).collect()
    }
}

/// Cartesian grid over dotted config keys.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// `"train.weight_decay" = [0.0, 0.2]`. A table value merges into the
    /// table at that key, so linked fields can move together.
    #[serde(default)]
    pub grid: BTreeMap<String, Vec<toml::Value>>,
    /// Replicate seeds; each sets `train.seed`. Empty keeps the config's seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "one")]
    pub workers: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    /// Relative paths resolve against the output root.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub analysis: AnalysisToggles,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

fn toml_error(origin: &str, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{origin}: {e}"))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| toml_error("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| toml_error(&path.display().to_string(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ClipConfig {
        self.model.build(&self.dataset)
    }

    /// Cross-module checks beyond each section's own.
    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::Config("run_id: must be a non-empty name without path separators".into()));
        }
        self.dataset.validate()?;
        let model = self.model_config();
        model.validate(&self.dataset)?;
        let a = &self.analysis;
        a.ablation_specs()?;
        let learned = model.vision.pos_encoding == PosEncoding::Learned;
        let attention_only = !model.vision.use_layernorm;
        if (a.decomposition || a.pe_consistency || !a.ablations.is_empty()) && !(learned && attention_only) {
            return Err(Error::Config(
                "analysis: decomposition, pe_consistency and ablations need a learned-position vision encoder without LayerNorm".into(),
            ));
        }
        if a.rope && (model.vision.pos_encoding != PosEncoding::Rope || !attention_only) {
            return Err(Error::Config("analysis.rope: needs a rotary vision encoder without LayerNorm".into()));
        }
        if a.rotation && model.vision.d_model != model.text.d_model {
            return Err(Error::Config(format!(
                "analysis.rotation: vision d_model {} differs from text d_model {}",
                model.vision.d_model, model.text.d_model
            )));
        }
        if let Some(fit) = &a.rotation_fit_labels {
            if fit.iter().any(|&l| l < 1 || l as usize > self.dataset.n_tot) {
                return Err(Error::Config("analysis.rotation_fit_labels: labels must lie in 1..=n_tot".into()));
            }
        }
        if let Some(p) = &a.prune {
            if p.keep.iter().any(|k| k.is_empty()) {
                return Err(Error::Config("analysis.prune.keep: every subset must keep at least one head".into()));
            }
            if p.keep.iter().flatten().any(|&h| h >= model.vision.m_h) {
                return Err(Error::Config(format!("analysis.prune.keep: heads must lie in 0..{}", model.vision.m_h)));
            }
        }
        if let Some(s) = &self.sweep {
            if s.workers == 0 {
                return Err(Error::Config("sweep.workers: must be at least 1".into()));
            }
            if let Some((k, _)) = s.grid.iter().find(|(_, v)| v.is_empty()) {
                return Err(Error::Config(format!("sweep.grid.{k}: needs at least one value")));
            }
        }
        // Surface training-section errors before any work starts.
        let probe = crate::dataset::build_splits(&self.dataset)?;
        self.train.validate(&probe)?;
        Ok(())
    }

    /// Output directory under `root`.
    pub fn output_dir(&self, root: &Path) -> PathBuf {
        match &self.out_dir {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => root.join(p),
            None => root.join(&self.run_id),
        }
    }
}

/// Sets a dotted key inside a TOML document, creating tables as needed.
/// Table values merge into an existing table.
pub fn set_path(doc: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = doc;
    for p in &parts[..parts.len() - 1] {
        let table = cur.as_table_mut().ok_or_else(|| Error::Config(format!("sweep.grid.{key}: `{p}` is not a table")))?;
        cur = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let last = parts[parts.len() - 1];
    let table = cur.as_table_mut().ok_or_else(|| Error::Config(format!("sweep.grid.{key}: parent is not a table")))?;
    match (table.get_mut(last), value) {
        (Some(toml::Value::Table(existing)), toml::Value::Table(new)) => {
            for (k, v) in new {
                existing.insert(k, v);
            }
        }
        (_, v) => {
            table.insert(last.to_string(), v);
        }
    }
    Ok(())
}
