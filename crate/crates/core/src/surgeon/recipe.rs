use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::importance::parse_block_id;
use crate::model::{component_map, BlockId, Model, Scope};

use super::blocks::{remove_block, remove_hybrid};
use super::validate::ensure_valid;

pub const RECIPE_MAGIC: &str = "VITPRUNE-RECIPE";
pub const RECIPE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Edit {
    DropChannels {
        component: u8,
        scope: Scope,
        indices: Vec<usize>,
    },
    MergeHeads {
        block: BlockId,
        factor: usize,
    },
    DropBlock(BlockId),
    DropHybrid(BlockId),
}

fn fmt_block(b: BlockId) -> String {
    if b.stage == 0 {
        b.index.to_string()
    } else {
        format!("{}:{}", b.stage, b.index)
    }
}

impl fmt::Display for Edit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Edit::DropChannels {
                component,
                scope,
                indices,
            } => {
                let idx: Vec<String> = indices.iter().map(usize::to_string).collect();
                write!(f, "DROP_CH {component} {scope} {}", idx.join(","))
            }
            Edit::MergeHeads { block, factor } => write!(f, "MERGE_HEADS {} {factor}", fmt_block(*block)),
            Edit::DropBlock(b) => write!(f, "DROP_BLOCK {}", fmt_block(*b)),
            Edit::DropHybrid(b) => write!(f, "DROP_HYBRID {}", fmt_block(*b)),
        }
    }
}

impl Edit {
    fn parse(line: &str, path: &Path) -> Result<Edit> {
        let bad = |m: &str| Error::format(path, format!("{m}: `{line}`"));
        let parts: Vec<&str> = line.split_whitespace().collect();
        let block = |s: &str| parse_block_id(s).ok_or_else(|| bad("bad block index"));
        match parts.as_slice() {
            ["DROP_CH", comp, scope, idx] => {
                let indices = idx
                    .split(',')
                    .map(|t| t.parse::<usize>().map_err(|_| bad("bad channel index")))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Edit::DropChannels {
                    component: comp.parse().map_err(|_| bad("bad component"))?,
                    scope: scope.parse().map_err(|_| bad("bad scope"))?,
                    indices,
                })
            }
            ["MERGE_HEADS", b, factor] => Ok(Edit::MergeHeads {
                block: block(b)?,
                factor: factor.parse().map_err(|_| bad("bad merge factor"))?,
            }),
            ["DROP_BLOCK", b] => Ok(Edit::DropBlock(block(b)?)),
            ["DROP_HYBRID", b] => Ok(Edit::DropHybrid(block(b)?)),
            _ => Err(bad("unrecognized edit")),
        }
    }
}

/// Ordered structural edits between two fingerprinted models.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneRecipe {
    pub source: String,
    pub target: String,
    pub edits: Vec<Edit>,
}

impl PruneRecipe {
    pub fn to_text(&self) -> String {
        let mut s = format!("{RECIPE_MAGIC} {RECIPE_VERSION}\nSOURCE {}\nTARGET {}\n", self.source, self.target);
        for e in &self.edits {
            s.push_str(&e.to_string());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<PruneRecipe> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().unwrap_or_default();
        let version = header
            .strip_prefix(RECIPE_MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| Error::format(path, "missing recipe header"))?;
        if version > RECIPE_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
                supported: RECIPE_VERSION,
            });
        }
        let mut field = |key: &str| -> Result<String> {
            lines
                .next()
                .and_then(|l| l.strip_prefix(key))
                .map(|v| v.trim().to_string())
                .ok_or_else(|| Error::format(path, format!("missing {key} line")))
        };
        let source = field("SOURCE")?;
        let target = field("TARGET")?;
        let edits = lines.map(|l| Edit::parse(l.trim(), path)).collect::<Result<_>>()?;
        Ok(PruneRecipe { source, target, edits })
    }
}

/// Applies one edit in place of `model`. Indices refer to the model as it
/// stands when the edit is applied.
pub fn apply_edit(mut model: Model, edit: &Edit) -> Result<Model> {
    match edit {
        Edit::DropChannels {
            component,
            scope,
            indices,
        } => {
            if indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidPrune(format!(
                    "channel indices for c{component}@{scope} must be strictly increasing"
                )));
            }
            let map = component_map(&model.spec);
            let group = map
                .find(*component, *scope)
                .ok_or_else(|| Error::InvalidPrune(format!("no channel group c{component}@{scope}")))?;
            let replaced = group.remove(&model.weights, indices)?;
            let spec = group.shrink_spec(&model.spec, indices.len())?;
            for (k, t) in replaced {
                model.weights.insert(k, t);
            }
            model.spec = spec;
            Ok(model)
        }
        Edit::MergeHeads { block, factor } => {
            let a = model
                .spec
                .block_mut(*block)
                .and_then(|b| b.attn.as_mut())
                .ok_or_else(|| Error::InvalidPrune(format!("block {block} has no attention")))?;
            if *factor == 0 || a.num_heads % factor != 0 {
                return Err(Error::InvalidPrune(format!(
                    "cannot merge {} heads by a factor of {factor}",
                    a.num_heads
                )));
            }
            a.num_heads /= factor;
            Ok(model)
        }
        Edit::DropBlock(b) => remove_block(&model, *b),
        Edit::DropHybrid(b) => remove_hybrid(&model, *b),
    }
}

/// Applies `edits` in order and validates the result.
pub fn apply_edits(model: &Model, edits: &[Edit]) -> Result<Model> {
    let mut m = model.clone();
    for e in edits {
        m = apply_edit(m, e)?;
    }
    ensure_valid(&m)?;
    Ok(m)
}

/// Replays a recorded recipe, checking both fingerprints.
pub fn replay(model: &Model, recipe: &PruneRecipe) -> Result<Model> {
    let fp = model.fingerprint();
    if fp != recipe.source {
        return Err(Error::FingerprintMismatch {
            expected: recipe.source.clone(),
            found: fp,
        });
    }
    let out = apply_edits(model, &recipe.edits)?;
    let got = out.fingerprint();
    if got != recipe.target {
        return Err(Error::FingerprintMismatch {
            expected: recipe.target.clone(),
            found: got,
        });
    }
    Ok(out)
}
