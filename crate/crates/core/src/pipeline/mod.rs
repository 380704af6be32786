//! Verb dispatch, run manifests and manifest replay.

pub mod experiments;
pub mod stages;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::checkpoint::{decode_checkpoint, load_checkpoint, save_checkpoint, Metadata};
use crate::data::config::RunConfig;
use crate::data::persist::{load_table, read_text, save_recipe, save_table, table_to_tsv, write_locked};
use crate::data::{accuracy, Dataset};
use crate::distill::Strategy;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::surgeon::{cost_report, progressive_block_prune, oneshot_block_prune};

pub const MANIFEST_FORMAT: &str = "vitprune-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verb {
    Init,
    Train,
    Score,
    Prune,
    PruneBlocks,
    Distill,
    Eval,
    Stats,
    Ablate,
}

impl Verb {
    pub const ALL: [Verb; 9] = [
        Verb::Init,
        Verb::Train,
        Verb::Score,
        Verb::Prune,
        Verb::PruneBlocks,
        Verb::Distill,
        Verb::Eval,
        Verb::Stats,
        Verb::Ablate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Verb::Init => "init",
            Verb::Train => "train",
            Verb::Score => "score",
            Verb::Prune => "prune",
            Verb::PruneBlocks => "prune-blocks",
            Verb::Distill => "distill",
            Verb::Eval => "eval",
            Verb::Stats => "stats",
            Verb::Ablate => "ablate",
        }
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Verb {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Verb::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown verb `{s}`")))
    }
}

/// One invocation: a verb plus its fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub verb: Verb,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_fingerprint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub verb: Verb,
    /// Resolved configuration as TOML.
    pub config: String,
    pub threads: usize,
    pub seeds: Seeds,
    pub inputs: Vec<FileRecord>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub labeler: u64,
    pub proxy: u64,
    pub train: u64,
    pub distill: u64,
}

impl Seeds {
    fn of(c: &RunConfig) -> Seeds {
        Seeds {
            init: c.model.init_seed,
            data: c.data.seed,
            labeler: c.data.labeler_seed,
            proxy: c.score.proxy_seed,
            train: c.train.seed,
            distill: c.distill.seed,
        }
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let m: Manifest =
            serde_json::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::format(path, "not a run manifest"));
        }
        if m.version > MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: m.version,
                supported: MANIFEST_VERSION,
            });
        }
        Ok(m)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn record(path: &Path, shown: String) -> Result<FileRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let model_fingerprint = if bytes.starts_with(crate::data::checkpoint::CHECKPOINT_MAGIC) {
        decode_checkpoint(&bytes, path).ok().map(|(m, _)| m.fingerprint())
    } else {
        None
    };
    Ok(FileRecord {
        path: shown,
        sha256: sha256_hex(&bytes),
        model_fingerprint,
    })
}

/// What a run produced, relative to the output directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub outputs: Vec<String>,
    /// Human-readable summary lines for the terminal.
    pub summary: Vec<String>,
}

struct Ctx<'c> {
    cfg: &'c RunConfig,
    out: PathBuf,
    inputs: Vec<PathBuf>,
    report: RunReport,
}

impl Ctx<'_> {
    fn input_model(&mut self, p: Option<&PathBuf>, key: &str) -> Result<Model> {
        let path = p.ok_or_else(|| Error::Config(format!("{key} is required for this verb")))?;
        self.inputs.push(path.clone());
        Ok(load_checkpoint(path)?.0)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_locked(&self.out.join(name), bytes)?;
        self.report.outputs.push(name.to_string());
        Ok(())
    }

    fn save_model(&mut self, name: &str, m: &Model, meta: &[(&str, String)]) -> Result<()> {
        let meta: Metadata = meta.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        save_checkpoint(m, &meta, &self.out.join(name))?;
        self.report.outputs.push(name.to_string());
        self.report.summary.push(format!("{name}\t{}", m.fingerprint()));
        Ok(())
    }

    fn datasets(&self) -> Result<(Dataset, Dataset)> {
        stages::load_datasets(self.cfg)
    }

    fn log_lines(&mut self, name: &str, logs: &[crate::distill::EpochLog]) -> Result<()> {
        let mut text = String::new();
        for l in logs {
            text.push_str(&serde_json::to_string(l).expect("log serializes"));
            text.push('\n');
        }
        self.write(name, text.as_bytes())
    }

    /// Saves the last good weights of a diverged run before passing the error on.
    fn dump_diverged(&mut self, e: Error) -> Error {
        if let Error::Diverged { state, .. } = &e {
            let _ = save_checkpoint(state, &Metadata::new(), &self.out.join("diverged.ckpt"));
        }
        e
    }
}

fn eval_row(split: &str, m: &Model, ds: &Dataset) -> Result<String> {
    Ok(format!("{split}\t{}\t{:.6}\n", ds.len(), accuracy(m, ds, 64)?))
}

fn execute(verb: Verb, ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let io = &cfg.io;
    match verb {
        Verb::Init => {
            let m = stages::init_from_config(cfg)?;
            ctx.save_model("model.ckpt", &m, &[("verb", "init".into())])?;
        }
        Verb::Train => {
            let m = match &io.model {
                Some(_) => ctx.input_model(io.model.as_ref(), "io.model")?,
                None => stages::init_from_config(cfg)?,
            };
            let (train, eval) = ctx.datasets()?;
            let dc = cfg.train.as_distill(cfg.run.precision);
            let (m, logs) = crate::distill::finetune(m, None, &train, Some(&eval), &dc, |_| Ok(()))
                .map_err(|e| ctx.dump_diverged(e))?;
            ctx.log_lines("train_log.jsonl", &logs)?;
            ctx.save_model("model.ckpt", &m, &[("verb", "train".into())])?;
        }
        Verb::Score => {
            let m = ctx.input_model(io.model.as_ref(), "io.model")?;
            let (train, _) = ctx.datasets()?;
            let t = stages::score(cfg, &m, &train)?;
            save_table(&t, &ctx.out.join("scores.txt"))?;
            ctx.report.outputs.push("scores.txt".into());
            ctx.write("scores.tsv", table_to_tsv(&t).as_bytes())?;
        }
        Verb::Prune => {
            let m = ctx.input_model(io.model.as_ref(), "io.model")?;
            let table = match &io.scores {
                Some(p) => {
                    ctx.inputs.push(p.clone());
                    let mut t = load_table(p, Some(&m), cfg.run.allow_stale)?;
                    // Accepted as is; the surgeon still checks group sizes.
                    t.model_fingerprint = m.fingerprint();
                    t
                }
                None => {
                    let (train, _) = ctx.datasets()?;
                    let mut c = cfg.clone();
                    c.score.blocks = false;
                    stages::score(&c, &m, &train)?
                }
            };
            let (pruned, recipe) = stages::prune(&m, &table, &cfg.prune)?;
            save_recipe(&recipe, &ctx.out.join("recipe.txt"))?;
            ctx.report.outputs.push("recipe.txt".into());
            ctx.save_model("pruned.ckpt", &pruned, &[("verb", "prune".into()), ("source", m.fingerprint())])?;
            ctx.write("cost.tsv", cost_report(&pruned.spec).to_tsv().as_bytes())?;
        }
        Verb::PruneBlocks => {
            let m = ctx.input_model(io.model.as_ref(), "io.model")?;
            let (train, eval) = ctx.datasets()?;
            let proxy = stages::proxy_set(cfg, &train)?;
            let opts = cfg.score.options(cfg.run.precision);
            let target = cfg.prune.target_depth;
            let mut steps_tsv = String::from("step\tchosen\tscore\n");
            let (pruned, recipe) = if cfg.prune.progressive {
                let teacher = m.clone();
                let step_cfg = crate::distill::DistillConfig {
                    epochs: cfg.prune.step_epochs,
                    ..cfg.distill.clone()
                };
                let (p, r, steps) = progressive_block_prune(&m, &proxy, target, opts, |_, cur| {
                    if step_cfg.epochs == 0 {
                        return Ok(cur);
                    }
                    let t = (step_cfg.strategy != Strategy::None).then_some(&teacher);
                    stages::train(cur, t, &train, &eval, &step_cfg)
                })?;
                for (i, s) in steps.iter().enumerate() {
                    steps_tsv.push_str(&format!("{i}\t{}\t{:e}\n", s.chosen, s.score));
                }
                (p, r)
            } else {
                let table = crate::importance::score_blocks(&m, &proxy, opts)?;
                let count = m.spec.num_blocks().saturating_sub(target);
                let (p, r) = oneshot_block_prune(&m, &table.blocks, count)?;
                for (i, e) in r.edits.iter().enumerate() {
                    steps_tsv.push_str(&format!("{i}\t{e}\t-\n"));
                }
                (p, r)
            };
            save_recipe(&recipe, &ctx.out.join("recipe.txt"))?;
            ctx.report.outputs.push("recipe.txt".into());
            ctx.write("steps.tsv", steps_tsv.as_bytes())?;
            ctx.save_model(
                "pruned.ckpt",
                &pruned,
                &[("verb", "prune-blocks".into()), ("source", m.fingerprint())],
            )?;
            ctx.write("cost.tsv", cost_report(&pruned.spec).to_tsv().as_bytes())?;
        }
        Verb::Distill => {
            let student = ctx.input_model(io.model.as_ref(), "io.model")?;
            let teacher = if cfg.distill.strategy == Strategy::None {
                None
            } else {
                Some(ctx.input_model(io.teacher.as_ref(), "io.teacher")?)
            };
            let (train, eval) = ctx.datasets()?;
            let (m, logs) =
                crate::distill::finetune(student, teacher.as_ref(), &train, Some(&eval), &cfg.distill, |_| Ok(()))
                    .map_err(|e| ctx.dump_diverged(e))?;
            ctx.log_lines("distill_log.jsonl", &logs)?;
            ctx.save_model("distilled.ckpt", &m, &[("verb", "distill".into())])?;
        }
        Verb::Eval => {
            let m = ctx.input_model(io.model.as_ref(), "io.model")?;
            let (train, eval) = ctx.datasets()?;
            let text = format!(
                "split\tsamples\ttop1\n{}{}",
                eval_row("train", &m, &train)?,
                eval_row("eval", &m, &eval)?
            );
            ctx.report.summary.push(text.clone());
            ctx.write("eval.tsv", text.as_bytes())?;
        }
        Verb::Stats => {
            let spec = match &io.model {
                Some(_) => ctx.input_model(io.model.as_ref(), "io.model")?.spec,
                None => cfg.model.spec()?,
            };
            let report = cost_report(&spec);
            ctx.report
                .summary
                .push(format!("params\t{}\nmacs\t{}", report.params, report.macs));
            ctx.write("cost.tsv", report.to_tsv().as_bytes())?;
        }
        Verb::Ablate => {
            let cmp = experiments::run_ablation(cfg)?;
            let tsv = cmp.to_tsv();
            ctx.report.summary.push(tsv.clone());
            ctx.write("ablation.tsv", tsv.as_bytes())?;
        }
    }
    Ok(())
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if threads == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    pool.install(f)
}

/// Runs `cmd`, writing its outputs and a manifest into `run.out_dir`.
pub fn run(cmd: &Command) -> Result<RunReport> {
    let cfg = &cmd.config;
    cfg.check()?;
    let out = cfg.run.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut ctx = Ctx {
        cfg,
        out: out.clone(),
        inputs: Vec::new(),
        report: RunReport::default(),
    };
    in_pool(cfg.run.threads, || execute(cmd.verb, &mut ctx))?;

    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        verb: cmd.verb,
        config: cfg.to_toml(),
        threads: cfg.run.threads,
        seeds: Seeds::of(cfg),
        inputs: ctx
            .inputs
            .iter()
            .map(|p| record(p, p.display().to_string()))
            .collect::<Result<_>>()?,
        outputs: ctx
            .report
            .outputs
            .iter()
            .map(|name| record(&out.join(name), name.clone()))
            .collect::<Result<_>>()?,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_locked(&out.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(ctx.report)
}

/// Re-runs a manifest into `out_dir` and compares every output byte for byte.
/// `threads` overrides the recorded thread count when given.
pub fn replay_manifest(path: &Path, out_dir: &Path, threads: Option<usize>) -> Result<String> {
    let m = Manifest::load(path)?;
    for input in &m.inputs {
        let now = record(Path::new(&input.path), input.path.clone())?;
        if now.sha256 != input.sha256 {
            return Err(Error::FingerprintMismatch {
                expected: input.sha256.clone(),
                found: now.sha256,
            });
        }
    }
    let mut config = RunConfig::from_toml(&m.config, &[])?;
    config.run.out_dir = out_dir.to_path_buf();
    if let Some(t) = threads {
        config.run.threads = t;
    }
    run(&Command { verb: m.verb, config })?;
    let mut tsv = String::from("file\texpected\tfound\tstatus\n");
    let mut bad = Vec::new();
    for o in &m.outputs {
        let now = record(&out_dir.join(&o.path), o.path.clone())?;
        let ok = now.sha256 == o.sha256;
        if !ok {
            bad.push(o.path.clone());
        }
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            o.path,
            o.sha256,
            now.sha256,
            if ok { "same" } else { "differs" }
        ));
    }
    write_locked(&out_dir.join("replay.tsv"), tsv.as_bytes())?;
    if !bad.is_empty() {
        return Err(Error::ReplayMismatch(bad.join(", ")));
    }
    Ok(tsv)
}
