//! Pipeline steps shared by the CLI verbs and the canned experiments.

use crate::data::cifar::load_cifar10_dir;
use crate::data::config::{DataSource, PruneConfig, RunConfig, SynthLabels};
use crate::data::{center_classifier_bias, synth_dataset, Dataset, Split, SynthShape};
use crate::distill::{finetune, DistillConfig};
use crate::error::{Error, Result};
use crate::importance::{score_model, ImportanceTable, ProxySet};
use crate::model::{init_model_with_std, ArchSpec, Model, Variant};
use crate::surgeon::{prune_channels, prune_to_targets, PruneRecipe, Targets};

/// Synthetic probe used to center the labeler's classifier bias.
const LABELER_PROBE: usize = 1024;

fn synth_shape(spec: &ArchSpec) -> SynthShape {
    SynthShape {
        channels: spec.in_channels,
        size: spec.image_size,
    }
}

/// The labeling model for teacher-labeled synthetic data.
pub fn labeler(cfg: &RunConfig) -> Result<Model> {
    let spec = cfg.model.spec()?;
    let mut m = init_model_with_std(&spec, cfg.data.labeler_seed, cfg.model.init_std)?;
    let probe = synth_dataset(
        LABELER_PROBE,
        synth_shape(&spec),
        spec.num_classes,
        cfg.data.labeler_seed ^ 0x5eed,
        None,
        Split::Train,
    )?;
    center_classifier_bias(&mut m, &probe.images)?;
    Ok(m)
}

fn truncate(ds: Dataset, n: usize) -> Dataset {
    if n == 0 || n >= ds.len() {
        return ds;
    }
    ds.subset(&(0..n).collect::<Vec<_>>())
}

/// Training and evaluation splits described by `cfg.data`.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let spec = cfg.model.spec()?;
    let d = &cfg.data;
    let (train, eval) = match d.source {
        DataSource::Synth => {
            if d.n_train == 0 || d.n_eval == 0 {
                return Err(Error::Config("synthetic data needs data.n_train and data.n_eval ≥ 1".into()));
            }
            let lab = match d.labels {
                SynthLabels::Labeler => Some(labeler(cfg)?),
                SynthLabels::Random => None,
            };
            let shape = synth_shape(&spec);
            let k = spec.num_classes;
            (
                synth_dataset(d.n_train, shape, k, d.seed, lab.as_ref(), Split::Train)?,
                synth_dataset(d.n_eval, shape, k, d.seed ^ 0xe7a1_0000_0000, lab.as_ref(), Split::Eval)?,
            )
        }
        DataSource::Cifar10 => {
            let dir = d
                .path
                .as_deref()
                .ok_or_else(|| Error::Config("data.path is required for cifar10".into()))?;
            let mut train = load_cifar10_dir(dir, Split::Train)?;
            let mut eval = load_cifar10_dir(dir, Split::Eval)?;
            if !d.classes.is_empty() {
                train = train.filter_classes(&d.classes);
                eval = eval.filter_classes(&d.classes);
            }
            (truncate(train, d.n_train), truncate(eval, d.n_eval))
        }
    };
    let shape = &train.images.shape()[1..];
    if shape != [spec.in_channels, spec.image_size, spec.image_size] || train.num_classes != spec.num_classes {
        return Err(Error::Config(format!(
            "data {shape:?} with {} classes does not fit the model ({}×{}×{}, {} classes)",
            train.num_classes, spec.in_channels, spec.image_size, spec.image_size, spec.num_classes
        )));
    }
    Ok((train, eval))
}

pub fn init_from_config(cfg: &RunConfig) -> Result<Model> {
    init_model_with_std(&cfg.model.spec()?, cfg.model.init_seed, cfg.model.init_std)
}

pub fn proxy_set(cfg: &RunConfig, train: &Dataset) -> Result<ProxySet> {
    ProxySet::sample(&train.images, cfg.score.proxy_size, cfg.score.proxy_seed, "train")
}

pub fn score(cfg: &RunConfig, model: &Model, train: &Dataset) -> Result<ImportanceTable> {
    let proxy = proxy_set(cfg, train)?;
    let opts = cfg.score.options(cfg.run.precision);
    if cfg.score.blocks {
        score_model(model, &proxy, opts)
    } else {
        let scorer = crate::importance::Scorer::new(model, &proxy, opts)?;
        Ok(ImportanceTable {
            model_fingerprint: model.fingerprint(),
            proxy_seed: proxy.seed,
            proxy_size: proxy.len(),
            channels: scorer.all_channels()?,
            blocks: Vec::new(),
        })
    }
}

/// Explicit survivor counts when any are configured, the uniform ratio otherwise.
pub fn prune(model: &Model, table: &ImportanceTable, p: &PruneConfig) -> Result<(Model, PruneRecipe)> {
    if !p.has_targets() {
        return prune_channels(model, table, p.ratio);
    }
    if model.spec.variant != Variant::Vanilla {
        return Err(Error::Config("explicit prune targets apply to vanilla models only".into()));
    }
    let first = model
        .spec
        .block_ids()
        .into_iter()
        .find_map(|id| model.spec.block(id).and_then(|b| b.attn.zip(b.ffn)))
        .ok_or_else(|| Error::Config("model has no complete block to read dimensions from".into()))?;
    let t = Targets {
        embed_dim: p.embed_dim.unwrap_or(model.spec.final_dim()),
        attn_dim: p.attn_dim.unwrap_or(first.0.dim),
        heads: p.heads.unwrap_or(first.0.num_heads),
        ffn_dim: p.ffn_dim.unwrap_or(first.1.hidden_dim),
        strategy: p.head_strategy,
    };
    prune_to_targets(model, table, &t)
}

/// Fine-tunes with `dc`, discarding the per-epoch log.
pub fn train(
    student: Model,
    teacher: Option<&Model>,
    train: &Dataset,
    eval: &Dataset,
    dc: &DistillConfig,
) -> Result<Model> {
    Ok(finetune(student, teacher, train, Some(eval), dc, |_| Ok(()))?.0)
}
