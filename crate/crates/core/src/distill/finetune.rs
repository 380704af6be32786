use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{distill_loss, Strategy, StudentVars, TeacherOutputs};
use super::optim::AdamW;
use super::schedule::{cosine_lr, warmup_steps, DEFAULT_WARMUP_FRACTION};
use crate::data::{accuracy, augment, rng_for, Dataset};
use crate::error::{Error, Result};
use crate::model::{build_forward, ForwardOptions, Model, StartPoint, WeightStore};
use crate::tape::Tape;
use crate::tensor::{Precision, Tensor};

/// Samples per independent forward/backward pass inside a step.
pub const MICRO_CHUNK: usize = 32;

/// Teacher outputs over the whole training set are cached up front when
/// augmentation is off and they fit in this many values.
const TEACHER_CACHE_LIMIT: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub strategy: Strategy,
    pub alpha: f64,
    /// Patch-token weight, used by `soft_patch` only.
    pub beta: f64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_frac: f64,
    /// Random flip plus crop with this much zero padding; 0 disables augmentation.
    pub augment_pad: usize,
    /// Learn a linear map from student to teacher features for `penultimate_mse`.
    pub feature_adapter: bool,
    pub precision: Precision,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            strategy: Strategy::Soft,
            alpha: 1.0,
            beta: 1.0,
            epochs: 10,
            lr: 5e-4,
            weight_decay: 0.05,
            batch_size: 64,
            seed: 0,
            warmup_frac: DEFAULT_WARMUP_FRACTION,
            augment_pad: 0,
            feature_adapter: false,
            precision: Precision::F64,
        }
    }
}

impl DistillConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and ≥ 0");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and ≥ 0");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be ≥ 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0,1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub eval_top1: Option<f64>,
}

struct TeacherBatch {
    logits: Tensor,
    feature: Option<Tensor>,
    tokens: Option<Tensor>,
}

impl TeacherBatch {
    fn compute(teacher: &Model, images: &Tensor, strategy: Strategy) -> Result<Self> {
        let mut parts = Vec::new();
        let n = images.shape()[0];
        let mut start = 0;
        while start < n {
            let end = (start + MICRO_CHUNK).min(n);
            parts.push(teacher.forward(&images.slice_rows(start, end))?);
            start = end;
        }
        let cat = |f: &dyn Fn(&crate::model::Outputs) -> Tensor| {
            Tensor::stack_rows(&parts.iter().map(f).collect::<Vec<_>>())
        };
        Ok(TeacherBatch {
            logits: cat(&|o| o.logits.clone())?,
            feature: match strategy {
                Strategy::PenultimateMse => Some(cat(&|o| o.feature.clone())?),
                _ => None,
            },
            tokens: match strategy {
                Strategy::SoftPatch => Some(cat(&|o| o.patch_tokens.clone())?),
                _ => None,
            },
        })
    }

    fn rows(&self, idx: &[usize]) -> TeacherBatch {
        TeacherBatch {
            logits: self.logits.gather_rows(idx),
            feature: self.feature.as_ref().map(|t| t.gather_rows(idx)),
            tokens: self.tokens.as_ref().map(|t| t.gather_rows(idx)),
        }
    }

    fn view(&self) -> TeacherOutputs<'_> {
        TeacherOutputs {
            logits: &self.logits,
            feature: self.feature.as_ref(),
            patch_tokens: self.tokens.as_ref(),
        }
    }
}

/// Auxiliary trainable maps that live only for the duration of fine-tuning.
fn init_heads(student: &Model, teacher: Option<&Model>, cfg: &DistillConfig) -> Result<WeightStore> {
    let mut heads = WeightStore::new();
    let Some(t) = teacher else { return Ok(heads) };
    if t.spec.num_classes != student.spec.num_classes {
        return Err(Error::ClassCount {
            student: student.spec.num_classes,
            teacher: t.spec.num_classes,
        });
    }
    let (ds, dt) = (student.spec.final_dim(), t.spec.final_dim());
    // Identity where the widths overlap, so training starts from the raw tokens.
    let eye = |out: usize, inp: usize| {
        let mut w = Tensor::zeros(&[out, inp]);
        for i in 0..out.min(inp) {
            w.set(&[i, i], 1.0);
        }
        w
    };
    match cfg.strategy {
        Strategy::SoftPatch => {
            let last = |m: &Model| m.spec.num_patches(m.spec.stages.len() - 1);
            let (ns, nt) = (last(student), last(t));
            if ns != nt {
                return Err(Error::TokenCount { student: ns, teacher: nt });
            }
            heads.insert("fc_token.weight", eye(dt, ds));
            heads.insert("fc_token.bias", Tensor::zeros(&[dt]));
        }
        Strategy::PenultimateMse if cfg.feature_adapter => {
            heads.insert("adapter.weight", eye(dt, ds));
            heads.insert("adapter.bias", Tensor::zeros(&[dt]));
        }
        Strategy::PenultimateMse if ds != dt => {
            return Err(Error::FeatureWidth { student: ds, teacher: dt });
        }
        _ => {}
    }
    Ok(heads)
}

/// Loss and gradients of one micro-chunk, the loss already weighted by its share of the batch.
fn chunk_grads(
    student: &Model,
    heads: &WeightStore,
    images: &Tensor,
    labels: &[usize],
    teacher: Option<&TeacherBatch>,
    cfg: &DistillConfig,
    weight: f64,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::with_precision(cfg.precision);
    let img = tape.constant_ref(images);
    let out = build_forward(
        &mut tape,
        &student.spec,
        &student.weights,
        StartPoint::Image(img),
        &ForwardOptions::default(),
        true,
    )?;
    let mut head_vars = BTreeMap::new();
    for (name, t) in heads.iter() {
        head_vars.insert(name.clone(), tape.param(t));
    }
    let projected_tokens = match (head_vars.get("fc_token.weight"), head_vars.get("fc_token.bias")) {
        (Some(&w), Some(&b)) => Some(tape.linear(out.patch_tokens, w, Some(b))?),
        _ => None,
    };
    let adapted_feature = match (head_vars.get("adapter.weight"), head_vars.get("adapter.bias")) {
        (Some(&w), Some(&b)) => Some(tape.linear(out.feature, w, Some(b))?),
        _ => None,
    };
    let vars = StudentVars {
        logits: out.logits,
        feature: out.feature,
        projected_tokens,
        adapted_feature,
    };
    let view = teacher.map(|t| t.view());
    let loss = distill_loss(&mut tape, cfg.strategy, &vars, view.as_ref(), labels, cfg.alpha, cfg.beta)?;
    let loss = tape.scale(loss, weight);
    let value = tape.value(loss).item();
    let mut g = tape.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, v) in out.params.iter().chain(head_vars.iter()) {
        grads.insert(name.clone(), g.take(*v));
    }
    Ok((value, grads))
}

fn accumulate(into: &mut BTreeMap<String, Tensor>, from: BTreeMap<String, Tensor>) {
    for (name, g) in from {
        match into.get_mut(&name) {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                into.insert(name, g);
            }
        }
    }
}

/// Fine-tunes `student` on `train`, optionally against a frozen `teacher`.
///
/// Each epoch reshuffles with a seeded generator. A step splits its batch into
/// fixed chunks of [`MICRO_CHUNK`] samples that run in parallel; their
/// gradients are summed in chunk order, so results do not depend on the
/// thread count. `on_epoch` sees every log record as it is produced.
pub fn finetune(
    student: Model,
    teacher: Option<&Model>,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &DistillConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<(Model, Vec<EpochLog>)> {
    cfg.check()?;
    if cfg.epochs == 0 {
        return Ok((student, Vec::new()));
    }
    if train.is_empty() {
        return Err(Error::Dataset("cannot fine-tune on an empty dataset".into()));
    }
    student.spec.check()?;
    let teacher = if cfg.strategy == Strategy::None { None } else { teacher };
    if teacher.is_none() && cfg.strategy != Strategy::None && (cfg.alpha != 0.0 || cfg.beta != 0.0) {
        return Err(Error::Config(format!("strategy {:?} requires a teacher", cfg.strategy)));
    }
    let mut heads = init_heads(&student, teacher, cfg)?;
    let mut student = student;

    let n = train.len();
    let per_sample = teacher.map_or(0, |t| {
        let toks = if cfg.strategy == Strategy::SoftPatch { t.spec.num_patches(t.spec.stages.len() - 1) * t.spec.final_dim() } else { 0 };
        t.spec.num_classes + t.spec.final_dim() + toks
    });
    let cached = match teacher {
        Some(t) if cfg.augment_pad == 0 && n * per_sample <= TEACHER_CACHE_LIMIT => {
            Some(TeacherBatch::compute(t, &train.images, cfg.strategy)?)
        }
        _ => None,
    };

    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let warmup = warmup_steps(total, cfg.warmup_frac);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = rng_for(cfg.seed, 1);
    let mut augment_rng = rng_for(cfg.seed, 2);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (mut images, labels) = train.batch(batch);
            if cfg.augment_pad > 0 {
                images = augment(&images, cfg.augment_pad, &mut augment_rng);
            }
            let tbatch = match (&cached, teacher) {
                (Some(c), _) => Some(c.rows(batch)),
                (None, Some(t)) => Some(TeacherBatch::compute(t, &images, cfg.strategy)?),
                (None, None) => None,
            };
            let b = batch.len();
            let ranges: Vec<(usize, usize)> =
                (0..b).step_by(MICRO_CHUNK).map(|s| (s, (s + MICRO_CHUNK).min(b))).collect();
            let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = ranges
                .par_iter()
                .map(|&(s, e)| {
                    let idx: Vec<usize> = (s..e).collect();
                    let tb = tbatch.as_ref().map(|t| t.rows(&idx));
                    chunk_grads(
                        &student,
                        &heads,
                        &images.slice_rows(s, e),
                        &labels[s..e],
                        tb.as_ref(),
                        cfg,
                        (e - s) as f64 / b as f64,
                    )
                })
                .collect();
            let mut loss = 0.0;
            let mut grads = BTreeMap::new();
            for r in results {
                let (l, g) = r?;
                loss += l;
                accumulate(&mut grads, g);
            }
            let diverged = |loss: f64, student: Model| Error::Diverged {
                epoch,
                step,
                loss,
                state: Box::new(student),
            };
            if !loss.is_finite() {
                return Err(diverged(loss, student));
            }
            lr = cosine_lr(step, total, cfg.lr, warmup);
            let params = student
                .weights
                .iter_mut()
                .chain(heads.iter_mut())
                .map(|(k, v)| (k.as_str(), v));
            if let Err(e) = opt.step(params, &grads, lr) {
                return Err(match e {
                    Error::NonFiniteGradient(_) => diverged(loss, student),
                    e => e,
                });
            }
            epoch_loss += loss * b as f64;
            step += 1;
        }
        let eval_top1 = match eval {
            Some(ds) => Some(accuracy(&student, ds, 64)?),
            None => None,
        };
        let rec = EpochLog {
            epoch,
            lr,
            train_loss: epoch_loss / n as f64,
            eval_top1,
        };
        on_epoch(&rec)?;
        logs.push(rec);
    }
    Ok((student, logs))
}
