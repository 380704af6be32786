//! Run configuration: one TOML document with a `format`/`version` header and
//! a table per pipeline stage. Overrides are dotted `key=value` pairs applied
//! on top of the file before it is decoded.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::persist::{read_text, write_locked};
use crate::distill::{DistillConfig, Strategy};
use crate::error::{Error, Result};
use crate::importance::{ScoreOptions, DEFAULT_CHUNK};
use crate::model::ArchSpec;
use crate::surgeon::HeadStrategy;
use crate::tensor::Precision;

pub const CONFIG_FORMAT: &str = "vitprune-run";
pub const CONFIG_VERSION: u32 = 1;

/// Proxy size for the desk-scale default setup; large models want more samples.
pub const HERMETIC_PROXY_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub score: ScoreConfig,
    pub prune: PruneConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub run: RunOptions,
    pub io: IoConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format: CONFIG_FORMAT.into(),
            version: CONFIG_VERSION,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            score: ScoreConfig::default(),
            prune: PruneConfig::default(),
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            run: RunOptions::default(),
            io: IoConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

/// Baseline training from labels alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_frac: f64,
    pub augment_pad: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let d = DistillConfig::default();
        TrainConfig {
            epochs: 10,
            lr: 1e-3,
            weight_decay: d.weight_decay,
            batch_size: d.batch_size,
            seed: d.seed,
            warmup_frac: d.warmup_frac,
            augment_pad: d.augment_pad,
        }
    }
}

impl TrainConfig {
    pub fn as_distill(&self, precision: Precision) -> DistillConfig {
        DistillConfig {
            strategy: Strategy::None,
            alpha: 0.0,
            beta: 0.0,
            epochs: self.epochs,
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed: self.seed,
            warmup_frac: self.warmup_frac,
            augment_pad: self.augment_pad,
            feature_adapter: false,
            precision,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchPreset {
    /// Plain ViT built from the size fields below.
    Vit,
    DeitTiny,
    DeitSmall,
    DeitBase,
    PvtV2B0,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchPreset,
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub init_seed: u64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: ArchPreset::Vit,
            image_size: 16,
            patch_size: 4,
            in_channels: 3,
            num_classes: 4,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            init_seed: 0,
            init_std: crate::model::INIT_STD,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> Result<ArchSpec> {
        let spec = match self.arch {
            ArchPreset::Vit => ArchSpec::vit(
                self.image_size,
                self.patch_size,
                self.in_channels,
                self.num_classes,
                self.embed_dim,
                self.depth,
                self.heads,
                self.mlp_ratio,
            ),
            ArchPreset::DeitTiny => ArchSpec::deit_tiny(),
            ArchPreset::DeitSmall => ArchSpec::deit_small(),
            ArchPreset::DeitBase => ArchSpec::deit_base(),
            ArchPreset::PvtV2B0 => ArchSpec::pvt_v2_b0(self.image_size, self.num_classes),
        };
        spec.check()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth,
    Cifar10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthLabels {
    Random,
    /// Argmax of a freshly initialized model with centered classifier bias.
    Labeler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Extracted CIFAR-10 binary directory.
    pub path: Option<PathBuf>,
    /// CIFAR class subset, relabeled in the listed order. Empty keeps all ten.
    pub classes: Vec<usize>,
    /// 0 keeps every available sample.
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
    pub labels: SynthLabels,
    pub labeler_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synth,
            path: None,
            classes: Vec::new(),
            n_train: 512,
            n_eval: 256,
            seed: 0,
            labels: SynthLabels::Labeler,
            labeler_seed: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub proxy_size: usize,
    pub proxy_seed: u64,
    pub cache: bool,
    pub chunk: usize,
    pub blocks: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            proxy_size: HERMETIC_PROXY_SIZE,
            proxy_seed: 0,
            cache: true,
            chunk: DEFAULT_CHUNK,
            blocks: true,
        }
    }
}

impl ScoreConfig {
    pub fn options(&self, precision: Precision) -> ScoreOptions {
        ScoreOptions {
            cache: self.cache,
            chunk: self.chunk,
            precision,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Fraction of every channel group to drop. Ignored when explicit targets are set.
    pub ratio: f64,
    pub embed_dim: Option<usize>,
    pub attn_dim: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub head_strategy: HeadStrategy,
    /// Depth that `prune-blocks` stops at.
    pub target_depth: usize,
    /// Re-score after every block removal; otherwise remove all at once.
    pub progressive: bool,
    /// Fine-tuning epochs between progressive steps, using the `distill` settings.
    pub step_epochs: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            ratio: 0.5,
            embed_dim: None,
            attn_dim: None,
            heads: None,
            ffn_dim: None,
            head_strategy: HeadStrategy::MergeThenPrune,
            target_depth: 2,
            progressive: true,
            step_epochs: 0,
        }
    }
}

impl PruneConfig {
    pub fn has_targets(&self) -> bool {
        self.embed_dim.is_some() || self.attn_dim.is_some() || self.heads.is_some() || self.ffn_dim.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    /// 0 lets the thread pool pick.
    pub threads: usize,
    pub precision: Precision,
    pub out_dir: PathBuf,
    /// Accept scores or recipes computed for a different model.
    pub allow_stale: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            threads: 0,
            precision: Precision::F64,
            out_dir: PathBuf::from("out"),
            allow_stale: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub model: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub recipe: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Pruned and distilled student against an equal-size student trained from scratch.
    Scratch,
    /// Head-pruning strategies 1, 2 and 3.
    Heads,
    /// Every distillation objective on the same pruned student.
    Distill,
    /// Progressive against one-shot block removal.
    Blocks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub which: Ablation,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            which: Ablation::Scratch,
            seeds: vec![0],
        }
    }
}

fn split_override(s: &str) -> Result<(Vec<&str>, &str)> {
    let (key, value) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    Ok((path, value.trim()))
}

/// A bare value parses as a TOML literal when it is one and as a string otherwise.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

pub fn apply_override(doc: &mut toml::Table, s: &str) -> Result<()> {
    let (path, raw) = split_override(s)?;
    let (last, parents) = path.split_last().expect("non-empty");
    let mut table = doc;
    for (i, p) in parents.iter().enumerate() {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a table", path[..=i].join("."))))?;
    }
    table.insert(last.to_string(), parse_value(raw));
    Ok(())
}

/// Every dotted key present in `doc`, tables included.
fn keys(prefix: &str, doc: &toml::Table, out: &mut Vec<String>) {
    for (k, v) in doc {
        let full = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if let toml::Value::Table(t) = v {
            keys(&full, t, out);
        }
        out.push(full);
    }
}

/// Decodes a table, naming the full dotted path of any key the schema lacks.
fn decode(doc: toml::Table) -> Result<RunConfig> {
    let mut present = Vec::new();
    keys("", &doc, &mut present);
    toml::Value::Table(doc).try_into::<RunConfig>().map_err(|e| {
        let msg = e.to_string();
        match msg.split("unknown field `").nth(1).and_then(|r| r.split('`').next()) {
            Some(field) => {
                let full = present
                    .iter()
                    .find(|k| k.as_str() == field || k.ends_with(&format!(".{field}")))
                    .cloned()
                    .unwrap_or_else(|| field.to_string());
                Error::UnknownKey(full)
            }
            None => Error::Config(msg.lines().next().unwrap_or("").to_string()),
        }
    })
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg = decode(doc)?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Reads `path` if given, otherwise starts from the defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let text = match path {
            Some(p) => read_text(p)?,
            None => String::new(),
        };
        RunConfig::from_toml(&text, overrides)
    }

    pub fn check(&self) -> Result<()> {
        if self.format != CONFIG_FORMAT {
            return Err(Error::Config(format!("format must be `{CONFIG_FORMAT}`, got `{}`", self.format)));
        }
        if self.version > CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is newer than supported {CONFIG_VERSION}",
                self.version
            )));
        }
        if !(0.0..1.0).contains(&self.prune.ratio) {
            return Err(Error::Config("prune.ratio must lie in [0,1)".into()));
        }
        if self.score.chunk == 0 || self.score.proxy_size == 0 {
            return Err(Error::Config("score.chunk and score.proxy_size must be ≥ 1".into()));
        }
        self.train.as_distill(self.run.precision).check()?;
        self.distill.check()?;
        self.model.spec()?;
        Ok(())
    }

    /// The same run with every seed shifted by `offset`.
    pub fn reseeded(&self, offset: u64) -> RunConfig {
        let mut c = self.clone();
        c.model.init_seed = c.model.init_seed.wrapping_add(offset);
        c.data.seed = c.data.seed.wrapping_add(offset);
        c.data.labeler_seed = c.data.labeler_seed.wrapping_add(offset);
        c.score.proxy_seed = c.score.proxy_seed.wrapping_add(offset);
        c.train.seed = c.train.seed.wrapping_add(offset);
        c.distill.seed = c.distill.seed.wrapping_add(offset);
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_locked(path, self.to_toml().as_bytes())
    }
}
