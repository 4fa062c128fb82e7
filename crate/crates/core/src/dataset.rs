//! Synthetic 1D scenes, their captions, and the train/validation splits.
//!
//! An image is a row of `d_image` pixels holding `0` for background and a
//! category id `1..=n_tot` where an object sits. Captions are always four
//! tokens long: `[label, IS, IN_IMAGE, EOT]` for one object and
//! `[left, LEFT_OF, right, EOT]` (optionally also `[right, RIGHT_OF, left, EOT]`)
//! for two.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CaptionMode {
    #[default]
    LeftOnly,
    LeftAndRight,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "default_d_image")]
    pub d_image: usize,
    pub n_tot: usize,
    pub n_pair: usize,
    #[serde(default = "default_count")]
    pub n1: usize,
    pub n2: usize,
    #[serde(default = "default_count")]
    pub n_val: usize,
    #[serde(default)]
    pub caption_mode: CaptionMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_d_image() -> usize {
    10
}

fn default_count() -> usize {
    5
}

impl DatasetConfig {
    /// The main setting: 20 categories, 15 used for two-object training.
    pub fn standard(n_tot: usize, n2: usize) -> Self {
        DatasetConfig {
            d_image: 10,
            n_tot,
            n_pair: n_tot.saturating_sub(5),
            n1: 5,
            n2,
            n_val: 5,
            caption_mode: CaptionMode::LeftOnly,
            seed: 0,
        }
    }

    /// Held-out categories `n_pair + 1 ..= n_tot`.
    pub fn n_val_labels(&self) -> usize {
        self.n_tot - self.n_pair
    }

    pub fn position_pairs(&self) -> usize {
        self.d_image * (self.d_image.saturating_sub(1)) / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: String| Err(Error::Config(format!("dataset.{k}: {why}")));
        if self.d_image < 2 {
            return bad("d_image", format!("must be at least 2, got {}", self.d_image));
        }
        if self.n_tot < 1 {
            return bad("n_tot", "must be at least 1".into());
        }
        if self.n_pair > self.n_tot {
            return bad("n_pair", format!("{} exceeds n_tot = {}", self.n_pair, self.n_tot));
        }
        if self.n1 < 1 || self.n_val < 1 {
            return bad("n1", "n1 and n_val must be at least 1".into());
        }
        if self.n2 < 1 {
            return bad("n2", "must be at least 1".into());
        }
        if self.n1 + self.n_val > self.d_image {
            return bad(
                "n1",
                format!(
                    "n1 + n_val = {} exceeds the {} available positions for disjoint single-object splits",
                    self.n1 + self.n_val,
                    self.d_image
                ),
            );
        }
        if self.n2 + self.n_val > self.position_pairs() {
            return bad(
                "n2",
                format!(
                    "n2 + n_val = {} exceeds the {} available position pairs for disjoint configurations",
                    self.n2 + self.n_val,
                    self.position_pairs()
                ),
            );
        }
        Ok(())
    }
}

/// Token ids: labels `1..=n_tot` map to `0..n_tot`, followed by the five
/// relation/structure tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub n_tot: usize,
}

impl Vocab {
    pub fn new(n_tot: usize) -> Self {
        Vocab { n_tot }
    }
    pub fn label(&self, label: u32) -> u32 {
        label - 1
    }
    pub fn is(&self) -> u32 {
        self.n_tot as u32
    }
    pub fn in_image(&self) -> u32 {
        self.n_tot as u32 + 1
    }
    pub fn left_of(&self) -> u32 {
        self.n_tot as u32 + 2
    }
    pub fn right_of(&self) -> u32 {
        self.n_tot as u32 + 3
    }
    pub fn eot(&self) -> u32 {
        self.n_tot as u32 + 4
    }
    pub fn size(&self) -> usize {
        self.n_tot + 5
    }

    /// Human-readable token names in id order.
    pub fn legend(&self) -> Vec<String> {
        let mut out: Vec<String> = (1..=self.n_tot).map(|l| l.to_string()).collect();
        out.extend(["IS", "IN_IMAGE", "LEFT_OF", "RIGHT_OF", "EOT"].map(String::from));
        out
    }

    /// Label category (1-based) of a token, if it is a label token.
    pub fn label_of(&self, token: u32) -> Option<u32> {
        ((token as usize) < self.n_tot).then_some(token + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Single,
    Pair,
}

/// Symbolic scene. For pairs, `labels[0]` sits at the smaller position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub labels: Vec<u32>,
    pub positions: Vec<usize>,
}

impl SceneSpec {
    pub fn single(label: u32, position: usize) -> Self {
        SceneSpec { kind: SceneKind::Single, labels: vec![label], positions: vec![position] }
    }

    /// Pair with `left` at `p_left` and `right` at `p_right` (`p_left < p_right`).
    pub fn pair(left: u32, right: u32, p_left: usize, p_right: usize) -> Self {
        SceneSpec { kind: SceneKind::Pair, labels: vec![left, right], positions: vec![p_left, p_right] }
    }

    pub fn validate(&self, cfg: &DatasetConfig) -> Result<()> {
        let n = match self.kind {
            SceneKind::Single => 1,
            SceneKind::Pair => 2,
        };
        if self.labels.len() != n || self.positions.len() != n {
            return Err(Error::Invalid(format!("{:?} scene needs {n} labels and positions", self.kind)));
        }
        for &l in &self.labels {
            if l < 1 || l as usize > cfg.n_tot {
                return Err(Error::Invalid(format!("label {l} outside 1..={}", cfg.n_tot)));
            }
        }
        for &p in &self.positions {
            if p >= cfg.d_image {
                return Err(Error::Invalid(format!("position {p} outside 0..{}", cfg.d_image)));
            }
        }
        if n == 2 {
            if self.labels[0] == self.labels[1] {
                return Err(Error::Invalid("pair scene needs distinct labels".into()));
            }
            if self.positions[0] >= self.positions[1] {
                return Err(Error::Invalid("pair positions must be strictly ascending".into()));
            }
        }
        Ok(())
    }
}

/// Rendered pixel row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageSeq(pub Vec<u32>);

impl ImageSeq {
    /// Object `(position, label)` pairs, left to right.
    pub fn objects(&self) -> Vec<(usize, u32)> {
        self.0.iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, &v)| (i, v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Caption(pub [u32; 4]);

impl Caption {
    /// Label categories mentioned, in caption order.
    pub fn labels(&self, vocab: &Vocab) -> Vec<u32> {
        self.0.iter().filter_map(|&t| vocab.label_of(t)).collect()
    }

    pub fn is_pair(&self, vocab: &Vocab) -> bool {
        self.0[1] == vocab.left_of() || self.0[1] == vocab.right_of()
    }

    pub fn render(&self, vocab: &Vocab) -> String {
        let legend = vocab.legend();
        self.0.iter().map(|&t| legend[t as usize].as_str()).collect::<Vec<_>>().join(" ")
    }
}

pub fn render_image(scene: &SceneSpec, cfg: &DatasetConfig) -> Result<ImageSeq> {
    scene.validate(cfg)?;
    let mut px = vec![0u32; cfg.d_image];
    for (&l, &p) in scene.labels.iter().zip(&scene.positions) {
        px[p] = l;
    }
    Ok(ImageSeq(px))
}

pub fn captions_for(scene: &SceneSpec, mode: CaptionMode, vocab: &Vocab) -> Vec<Caption> {
    match scene.kind {
        SceneKind::Single => {
            vec![Caption([vocab.label(scene.labels[0]), vocab.is(), vocab.in_image(), vocab.eot()])]
        }
        SceneKind::Pair => {
            let (l, r) = (vocab.label(scene.labels[0]), vocab.label(scene.labels[1]));
            let left = Caption([l, vocab.left_of(), r, vocab.eot()]);
            match mode {
                CaptionMode::LeftOnly => vec![left],
                CaptionMode::LeftAndRight => vec![left, Caption([r, vocab.right_of(), l, vocab.eot()])],
            }
        }
    }
}

/// One image with every caption describing it (one or two).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub scene: SceneSpec,
    pub image: ImageSeq,
    pub captions: Vec<Caption>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBundle {
    pub config: DatasetConfig,
    pub train: Vec<Example>,
    pub val_single_pos: Vec<Example>,
    pub val_seen_pair_config: Vec<Example>,
    pub val_unseen_pair: Vec<Example>,
    pub text_universe: Vec<Caption>,
}

/// Identifies the four sets of a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    SinglePos,
    SeenPairConfig,
    UnseenPair,
}

impl SplitBundle {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.config.n_tot)
    }

    pub fn split(&self, which: SplitName) -> &[Example] {
        match which {
            SplitName::Train => &self.train,
            SplitName::SinglePos => &self.val_single_pos,
            SplitName::SeenPairConfig => &self.val_seen_pair_config,
            SplitName::UnseenPair => &self.val_unseen_pair,
        }
    }
}

fn make_example(scene: SceneSpec, cfg: &DatasetConfig, vocab: &Vocab) -> Result<Example> {
    let image = render_image(&scene, cfg)?;
    let captions = captions_for(&scene, cfg.caption_mode, vocab);
    Ok(Example { scene, image, captions })
}

fn all_position_pairs(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|a| (a + 1..d).map(move |b| (a, b))).collect()
}

pub fn build_splits(cfg: &DatasetConfig) -> Result<SplitBundle> {
    cfg.validate()?;
    let vocab = Vocab::new(cfg.n_tot);
    let mut rng_single = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dataset/single"));
    let mut rng_pair = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dataset/pair"));
    let mut rng_unseen = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dataset/unseen"));

    let mut train = Vec::new();
    let mut val_single_pos = Vec::new();
    let positions: Vec<usize> = (0..cfg.d_image).collect();
    for label in 1..=cfg.n_tot as u32 {
        let chosen: Vec<usize> = positions.choose_multiple(&mut rng_single, cfg.n1 + cfg.n_val).copied().collect();
        for (i, &p) in chosen.iter().enumerate() {
            let ex = make_example(SceneSpec::single(label, p), cfg, &vocab)?;
            if i < cfg.n1 {
                train.push(ex);
            } else {
                val_single_pos.push(ex);
            }
        }
    }

    let pairs = all_position_pairs(cfg.d_image);
    let mut val_seen_pair_config = Vec::new();
    for x in 1..=cfg.n_pair as u32 {
        for y in 1..=cfg.n_pair as u32 {
            if x == y {
                continue;
            }
            let chosen: Vec<(usize, usize)> =
                pairs.choose_multiple(&mut rng_pair, cfg.n2 + cfg.n_val).copied().collect();
            for (i, &(a, b)) in chosen.iter().enumerate() {
                let ex = make_example(SceneSpec::pair(x, y, a, b), cfg, &vocab)?;
                if i < cfg.n2 {
                    train.push(ex);
                } else {
                    val_seen_pair_config.push(ex);
                }
            }
        }
    }

    let mut val_unseen_pair = Vec::new();
    for x in cfg.n_pair as u32 + 1..=cfg.n_tot as u32 {
        for y in cfg.n_pair as u32 + 1..=cfg.n_tot as u32 {
            if x == y {
                continue;
            }
            for &(a, b) in pairs.choose_multiple(&mut rng_unseen, cfg.n_val) {
                val_unseen_pair.push(make_example(SceneSpec::pair(x, y, a, b), cfg, &vocab)?);
            }
        }
    }

    let mut bundle = SplitBundle {
        config: cfg.clone(),
        train,
        val_single_pos,
        val_seen_pair_config,
        val_unseen_pair,
        text_universe: Vec::new(),
    };
    bundle.text_universe = text_universe(&bundle);
    Ok(bundle)
}

/// Sorted, deduplicated captions over the training and validation sets.
pub fn text_universe(bundle: &SplitBundle) -> Vec<Caption> {
    let set: BTreeSet<Caption> = [&bundle.train, &bundle.val_single_pos, &bundle.val_seen_pair_config, &bundle.val_unseen_pair]
        .into_iter()
        .flat_map(|s| s.iter().flat_map(|e| e.captions.iter().copied()))
        .collect();
    set.into_iter().collect()
}

#[derive(Serialize)]
struct ExportRow<'a> {
    pixels: &'a [u32],
    caption_token_ids: [u32; 4],
    #[serde(skip_serializing_if = "Option::is_none")]
    caption2_token_ids: Option<[u32; 4]>,
}

#[derive(Serialize)]
struct Export<'a> {
    config: &'a DatasetConfig,
    token_legend: Vec<String>,
    train: Vec<ExportRow<'a>>,
    val_single_pos: Vec<ExportRow<'a>>,
    val_seen_pair_config: Vec<ExportRow<'a>>,
    val_unseen_pair: Vec<ExportRow<'a>>,
    text_universe: Vec<[u32; 4]>,
}

/// JSON document with the config, token legend and every split.
pub fn export_json(bundle: &SplitBundle) -> Result<String> {
    fn rows(set: &[Example]) -> Vec<ExportRow<'_>> {
        set.iter()
            .map(|e| ExportRow {
                pixels: &e.image.0,
                caption_token_ids: e.captions[0].0,
                caption2_token_ids: e.captions.get(1).map(|c| c.0),
            })
            .collect()
    }
    let doc = Export {
        config: &bundle.config,
        token_legend: bundle.vocab().legend(),
        train: rows(&bundle.train),
        val_single_pos: rows(&bundle.val_single_pos),
        val_seen_pair_config: rows(&bundle.val_seen_pair_config),
        val_unseen_pair: rows(&bundle.val_unseen_pair),
        text_universe: bundle.text_universe.iter().map(|c| c.0).collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}
