use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use vitprune::data::config::RunConfig;
use vitprune::pipeline::{replay_manifest, run, Command, Verb};
use vitprune::surgeon::HeadStrategy;
use vitprune::ErrorKind;

#[derive(Parser)]
#[command(name = "vitprune", version, about = "Structured pruning and distillation of vision transformers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a freshly initialized model.
    Init(RunArgs),
    /// Train a model on labels alone.
    Train(RunArgs),
    /// Compute channel and block importance scores.
    Score(RunArgs),
    /// Remove channels by ratio or to explicit widths.
    Prune(RunArgs),
    /// Remove blocks down to `prune.target_depth`.
    PruneBlocks(RunArgs),
    /// Fine-tune a student against a teacher.
    Distill(RunArgs),
    /// Top-1 accuracy on the train and eval splits.
    Eval(RunArgs),
    /// Parameter and multiply-accumulate counts.
    Stats(RunArgs),
    /// Multi-run comparison tables.
    Ablate(RunArgs),
    /// Re-run a manifest and compare every output byte for byte.
    Replay {
        manifest: PathBuf,
        #[arg(long, default_value = "replay")]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
}

/// Named flags are shorthands for `--set` keys and are applied after them.
#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dotted config override, e.g. `distill.alpha=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// run.out_dir
    #[arg(long)]
    out: Option<PathBuf>,
    /// run.threads
    #[arg(long)]
    threads: Option<usize>,
    /// io.model
    #[arg(long)]
    model: Option<PathBuf>,
    /// io.teacher
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// io.scores
    #[arg(long)]
    scores: Option<PathBuf>,
    /// prune.ratio
    #[arg(long)]
    ratio: Option<f64>,
    /// prune.embed_dim
    #[arg(long)]
    embed_dim: Option<usize>,
    /// prune.attn_dim
    #[arg(long)]
    attn_dim: Option<usize>,
    /// prune.heads
    #[arg(long)]
    heads: Option<usize>,
    /// prune.ffn_dim
    #[arg(long)]
    ffn_dim: Option<usize>,
    /// prune.head_strategy as 1, 2 or 3
    #[arg(long)]
    head_strategy: Option<u8>,
    /// prune.target_depth
    #[arg(long)]
    target_depth: Option<usize>,
    /// distill.strategy
    #[arg(long)]
    strategy: Option<String>,
    /// distill.alpha
    #[arg(long)]
    alpha: Option<f64>,
    /// distill.beta
    #[arg(long)]
    beta: Option<f64>,
    /// distill.epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// run.allow_stale
    #[arg(long)]
    allow_stale: bool,
}

fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

impl RunArgs {
    fn overrides(&self) -> Result<Vec<String>> {
        let mut o = self.set.clone();
        let mut put = |k: &str, v: String| o.push(format!("{k}={v}"));
        let path = |p: &PathBuf| quote(&p.display().to_string());
        if let Some(v) = &self.out {
            put("run.out_dir", path(v));
        }
        if let Some(v) = self.threads {
            put("run.threads", v.to_string());
        }
        if let Some(v) = &self.model {
            put("io.model", path(v));
        }
        if let Some(v) = &self.teacher {
            put("io.teacher", path(v));
        }
        if let Some(v) = &self.scores {
            put("io.scores", path(v));
        }
        if let Some(v) = self.ratio {
            put("prune.ratio", format!("{v:?}"));
        }
        for (k, v) in [
            ("prune.embed_dim", self.embed_dim),
            ("prune.attn_dim", self.attn_dim),
            ("prune.heads", self.heads),
            ("prune.ffn_dim", self.ffn_dim),
            ("prune.target_depth", self.target_depth),
            ("distill.epochs", self.epochs),
        ] {
            if let Some(v) = v {
                put(k, v.to_string());
            }
        }
        if let Some(n) = self.head_strategy {
            let s = HeadStrategy::from_number(n)
                .ok_or_else(|| vitprune::Error::Config(format!("head strategy must be 1, 2 or 3, got {n}")))?;
            put("prune.head_strategy", serde_json::to_string(&s)?);
        }
        if let Some(v) = &self.strategy {
            put("distill.strategy", quote(v));
        }
        if let Some(v) = self.alpha {
            put("distill.alpha", format!("{v:?}"));
        }
        if let Some(v) = self.beta {
            put("distill.beta", format!("{v:?}"));
        }
        if self.allow_stale {
            put("run.allow_stale", "true".into());
        }
        Ok(o)
    }
}

fn run_verb(verb: Verb, args: &RunArgs) -> Result<()> {
    let config = RunConfig::load(args.config.as_deref(), &args.overrides()?)?;
    let out = config.run.out_dir.clone();
    let report = run(&Command { verb, config }).with_context(|| format!("{verb} failed"))?;
    for line in &report.summary {
        println!("{}", line.trim_end());
    }
    for f in &report.outputs {
        eprintln!("wrote {}", out.join(f).display());
    }
    Ok(())
}

fn real_main(cli: Cli) -> Result<()> {
    let (verb, args) = match cli.cmd {
        Cmd::Replay { manifest, out, threads } => {
            let tsv = replay_manifest(&manifest, &out, threads)?;
            print!("{tsv}");
            return Ok(());
        }
        Cmd::Init(a) => (Verb::Init, a),
        Cmd::Train(a) => (Verb::Train, a),
        Cmd::Score(a) => (Verb::Score, a),
        Cmd::Prune(a) => (Verb::Prune, a),
        Cmd::PruneBlocks(a) => (Verb::PruneBlocks, a),
        Cmd::Distill(a) => (Verb::Distill, a),
        Cmd::Eval(a) => (Verb::Eval, a),
        Cmd::Stats(a) => (Verb::Stats, a),
        Cmd::Ablate(a) => (Verb::Ablate, a),
    };
    run_verb(verb, &args)
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config | ErrorKind::Io => 2,
        ErrorKind::Validation => 3,
        ErrorKind::Numeric => 4,
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Config => "config",
        ErrorKind::Io => "io",
        ErrorKind::Validation => "validation",
        ErrorKind::Numeric => "numeric",
    }
}

fn fail(kind: ErrorKind, message: &str) -> ExitCode {
    let code = exit_code(kind);
    let rec = serde_json::json!({ "error": kind_name(kind), "exit": code, "message": message });
    eprintln!("{rec}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            return fail(ErrorKind::Config, msg.lines().next().unwrap_or("bad arguments"));
        }
    };
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<vitprune::Error>())
                .map_or(ErrorKind::Config, |v| v.kind());
            fail(kind, &format!("{e:#}"))
        }
    }
}
