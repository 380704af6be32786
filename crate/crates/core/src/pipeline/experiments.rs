//! Canned multi-run comparisons on a teacher trained from the run config.

use serde::Serialize;

use super::stages::{init_from_config, load_datasets, proxy_set, prune, score, train};
use crate::data::config::{Ablation, RunConfig};
use crate::data::{accuracy, Dataset};
use crate::distill::{DistillConfig, Strategy};
use crate::error::Result;
use crate::importance::score_blocks;
use crate::model::{init_model_with_std, Model};
use crate::surgeon::{cost_report, oneshot_block_prune, progressive_block_prune, Edit, HeadStrategy, PruneRecipe};

const EVAL_CHUNK: usize = 64;

/// Data and a trained teacher for one seed.
pub struct Hermetic {
    pub cfg: RunConfig,
    pub train: Dataset,
    pub eval: Dataset,
    pub teacher: Model,
    pub teacher_train_top1: f64,
}

pub fn hermetic(cfg: &RunConfig) -> Result<Hermetic> {
    let (train_ds, eval_ds) = load_datasets(cfg)?;
    let init = init_from_config(cfg)?;
    let teacher = train(init, None, &train_ds, &eval_ds, &cfg.train.as_distill(cfg.run.precision))?;
    let teacher_train_top1 = accuracy(&teacher, &train_ds, EVAL_CHUNK)?;
    Ok(Hermetic {
        cfg: cfg.clone(),
        train: train_ds,
        eval: eval_ds,
        teacher,
        teacher_train_top1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub experiment: String,
    pub variant: String,
    pub seed: u64,
    pub params: usize,
    pub macs: usize,
    pub depth: usize,
    pub train_top1: f64,
    pub eval_top1: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<Row>,
}

impl Comparison {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("experiment\tvariant\tseed\tparams\tmacs\tdepth\ttrain_top1\teval_top1\tdetail\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}\n",
                r.experiment, r.variant, r.seed, r.params, r.macs, r.depth, r.train_top1, r.eval_top1, r.detail
            ));
        }
        s
    }

    /// Mean eval accuracy of every row named `variant`.
    pub fn mean_eval(&self, variant: &str) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.variant == variant).map(|r| r.eval_top1).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Eval accuracy of `variant` for `seed`.
    pub fn eval_of(&self, variant: &str, seed: u64) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant && r.seed == seed).map(|r| r.eval_top1)
    }
}

fn row(h: &Hermetic, experiment: &str, variant: &str, seed: u64, m: &Model, detail: String) -> Result<Row> {
    let cost = cost_report(&m.spec);
    Ok(Row {
        experiment: experiment.into(),
        variant: variant.into(),
        seed,
        params: cost.params,
        macs: cost.macs,
        depth: m.spec.num_blocks(),
        train_top1: accuracy(m, &h.train, EVAL_CHUNK)?,
        eval_top1: accuracy(m, &h.eval, EVAL_CHUNK)?,
        detail,
    })
}

/// Block edits verbatim; channel edits are summarized by the resulting widths.
fn edits_text(r: &PruneRecipe, m: &Model) -> String {
    let blocks: Vec<String> = r
        .edits
        .iter()
        .filter(|e| matches!(e, Edit::DropBlock(_) | Edit::DropHybrid(_)))
        .map(|e| e.to_string())
        .collect();
    if !blocks.is_empty() {
        return blocks.join(";");
    }
    let first = m.spec.block_ids().into_iter().find_map(|id| m.spec.block(id).copied());
    match first {
        Some(b) => format!(
            "D={} attn={} h={} ffn={}",
            m.spec.final_dim(),
            b.attn.map_or(0, |a| a.dim),
            b.attn.map_or(0, |a| a.num_heads),
            b.ffn.map_or(0, |f| f.hidden_dim)
        ),
        None => String::new(),
    }
}

fn distill_from(h: &Hermetic, student: Model, dc: &DistillConfig) -> Result<Model> {
    train(student, Some(&h.teacher), &h.train, &h.eval, dc)
}

fn channel_table(h: &Hermetic) -> Result<crate::importance::ImportanceTable> {
    let mut cfg = h.cfg.clone();
    cfg.score.blocks = false;
    score(&cfg, &h.teacher, &h.train)
}

/// Pruned and distilled student against the same architecture trained from
/// scratch with the same epoch budget.
pub fn scratch_comparison(h: &Hermetic, seed: u64) -> Result<Vec<Row>> {
    let cfg = &h.cfg;
    let table = channel_table(h)?;
    let (pruned, recipe) = prune(&h.teacher, &table, &cfg.prune)?;
    let student = distill_from(h, pruned.clone(), &cfg.distill)?;
    let scratch_init = init_model_with_std(&pruned.spec, cfg.model.init_seed ^ 0x5c7a_7c40, cfg.model.init_std)?;
    let scratch_cfg = DistillConfig {
        strategy: Strategy::None,
        ..cfg.distill.clone()
    };
    let scratch = train(scratch_init, None, &h.train, &h.eval, &scratch_cfg)?;
    Ok(vec![
        row(h, "scratch", "teacher", seed, &h.teacher, String::new())?,
        row(h, "scratch", "pruned", seed, &pruned, edits_text(&recipe, &pruned))?,
        row(h, "scratch", "pruned+distilled", seed, &student, String::new())?,
        row(h, "scratch", "scratch", seed, &scratch, String::new())?,
    ])
}

/// The three head-pruning strategies on the same scores and fine-tuning budget.
pub fn head_comparison(h: &Hermetic, seed: u64) -> Result<Vec<Row>> {
    let table = channel_table(h)?;
    let mut rows = Vec::new();
    for s in [HeadStrategy::MergeThenPrune, HeadStrategy::Global, HeadStrategy::PerHead] {
        let mut p = h.cfg.prune.clone();
        p.head_strategy = s;
        let (pruned, recipe) = prune(&h.teacher, &table, &p)?;
        let student = distill_from(h, pruned, &h.cfg.distill)?;
        rows.push(row(h, "heads", &format!("strategy-{}", s.number()), seed, &student, edits_text(&recipe, &student))?);
    }
    Ok(rows)
}

/// Every distillation objective applied to one pruned student.
pub fn distill_comparison(h: &Hermetic, seed: u64) -> Result<Vec<Row>> {
    let table = channel_table(h)?;
    let (pruned, _) = prune(&h.teacher, &table, &h.cfg.prune)?;
    let mut rows = Vec::new();
    for s in [
        Strategy::None,
        Strategy::Soft,
        Strategy::Hard,
        Strategy::SoftPatch,
        Strategy::PenultimateMse,
    ] {
        let dc = DistillConfig {
            strategy: s,
            feature_adapter: h.cfg.distill.feature_adapter
                || (s == Strategy::PenultimateMse && pruned.spec.final_dim() != h.teacher.spec.final_dim()),
            ..h.cfg.distill.clone()
        };
        let student = distill_from(h, pruned.clone(), &dc)?;
        let name = serde_json::to_value(s).expect("strategy serializes");
        rows.push(row(h, "distill", name.as_str().unwrap_or("?"), seed, &student, String::new())?);
    }
    Ok(rows)
}

/// Progressive block removal with re-scoring against removing the lowest
/// disjoint candidates of a single scoring round. Both get the same total
/// number of fine-tuning epochs.
pub fn block_comparison(h: &Hermetic, seed: u64) -> Result<Vec<Row>> {
    let cfg = &h.cfg;
    let proxy = proxy_set(cfg, &h.train)?;
    let opts = cfg.score.options(cfg.run.precision);
    let target = cfg.prune.target_depth;
    let count = h.teacher.spec.num_blocks().saturating_sub(target);
    let step_cfg = DistillConfig {
        epochs: cfg.prune.step_epochs,
        ..cfg.distill.clone()
    };
    let (prog, prog_recipe, _) = progressive_block_prune(&h.teacher, &proxy, target, opts, |step, m| {
        if step + 1 < count && step_cfg.epochs > 0 {
            distill_from(h, m, &step_cfg)
        } else {
            Ok(m)
        }
    })?;
    let prog = distill_from(h, prog, &cfg.distill)?;

    let table = score_blocks(&h.teacher, &proxy, opts)?;
    let (one, one_recipe) = oneshot_block_prune(&h.teacher, &table.blocks, count)?;
    let one_cfg = DistillConfig {
        epochs: cfg.distill.epochs + cfg.prune.step_epochs * count.saturating_sub(1),
        ..cfg.distill.clone()
    };
    let one = distill_from(h, one, &one_cfg)?;
    Ok(vec![
        row(h, "blocks", "progressive", seed, &prog, edits_text(&prog_recipe, &prog))?,
        row(h, "blocks", "one-shot", seed, &one, edits_text(&one_recipe, &one))?,
    ])
}

pub fn run_experiment(which: Ablation, h: &Hermetic, seed: u64) -> Result<Vec<Row>> {
    match which {
        Ablation::Scratch => scratch_comparison(h, seed),
        Ablation::Heads => head_comparison(h, seed),
        Ablation::Distill => distill_comparison(h, seed),
        Ablation::Blocks => block_comparison(h, seed),
    }
}

/// Runs `cfg.ablate.which` once per seed in `cfg.ablate.seeds`.
pub fn run_ablation(cfg: &RunConfig) -> Result<Comparison> {
    let mut out = Comparison::default();
    for &seed in &cfg.ablate.seeds {
        let h = hermetic(&cfg.reseeded(seed))?;
        out.rows.extend(run_experiment(cfg.ablate.which, &h, seed)?);
    }
    Ok(out)
}
