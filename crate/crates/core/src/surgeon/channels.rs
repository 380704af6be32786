use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ImportanceTable;
use crate::model::{component_map, BlockId, ChannelGroup, Model, Scope, Variant};

use super::recipe::{apply_edits, Edit, PruneRecipe};

/// Indices of the `n` lowest-scoring entries, ascending. Among equal scores
/// the higher index goes first, so lower indices survive.
pub fn lowest(scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)));
    let mut drop: Vec<usize> = order.into_iter().take(n).collect();
    drop.sort_unstable();
    drop
}

/// Complement of `drop` within `0..size`.
pub fn survivors(size: usize, drop: &[usize]) -> Vec<usize> {
    (0..size).filter(|i| drop.binary_search(i).is_err()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadStrategy {
    /// Merge runs of consecutive heads, then prune within each merged head.
    #[default]
    MergeThenPrune,
    /// Prune globally across the layer, then merge.
    Global,
    /// Prune equally within each original head, then merge.
    PerHead,
}

impl HeadStrategy {
    pub fn number(self) -> u8 {
        match self {
            HeadStrategy::MergeThenPrune => 1,
            HeadStrategy::Global => 2,
            HeadStrategy::PerHead => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(HeadStrategy::MergeThenPrune),
            2 => Some(HeadStrategy::Global),
            3 => Some(HeadStrategy::PerHead),
            _ => None,
        }
    }
}

/// Attention-embedding channels to drop when going from `(scores.len(), h_b)`
/// to `(d_t, h_t)`.
pub fn head_drop_set(scores: &[f64], h_b: usize, d_t: usize, h_t: usize, strategy: HeadStrategy) -> Result<Vec<usize>> {
    let d_b = scores.len();
    let bad = |m: String| Err(Error::InvalidPrune(m));
    if h_b == 0 || h_t == 0 || !d_b.is_multiple_of(h_b) {
        return bad(format!("width {d_b} not divisible into {h_b} heads"));
    }
    if !h_b.is_multiple_of(h_t) {
        return bad(format!("{h_b} heads cannot merge into {h_t}"));
    }
    if d_t == 0 || d_t > d_b || !d_t.is_multiple_of(h_t) {
        return bad(format!("target width {d_t} invalid for {h_t} heads from {d_b}"));
    }
    let removed = d_b - d_t;
    let in_runs = |runs: usize| -> Result<Vec<usize>> {
        if !removed.is_multiple_of(runs) {
            return bad(format!("{removed} channels do not split evenly over {runs} heads"));
        }
        let len = d_b / runs;
        let mut drop = Vec::with_capacity(removed);
        for r in 0..runs {
            let base = r * len;
            drop.extend(lowest(&scores[base..base + len], removed / runs).into_iter().map(|i| base + i));
        }
        Ok(drop)
    };
    match strategy {
        HeadStrategy::MergeThenPrune => in_runs(h_t),
        HeadStrategy::PerHead => in_runs(h_b),
        HeadStrategy::Global => Ok(lowest(scores, removed)),
    }
}

/// Edits taking block `block` to `d_t` attention channels in `h_t` heads.
pub fn prune_heads(
    model: &Model,
    block: BlockId,
    d_t: usize,
    h_t: usize,
    strategy: HeadStrategy,
    scores: &[f64],
) -> Result<Vec<Edit>> {
    let a = model
        .spec
        .block(block)
        .and_then(|b| b.attn)
        .ok_or_else(|| Error::InvalidPrune(format!("block {block} has no attention")))?;
    if scores.len() != a.dim {
        return Err(Error::InvalidPrune(format!(
            "block {block}: {} scores for {} channels",
            scores.len(),
            a.dim
        )));
    }
    let drop = head_drop_set(scores, a.num_heads, d_t, h_t, strategy)?;
    let mut edits = Vec::new();
    if h_t != a.num_heads {
        edits.push(Edit::MergeHeads {
            block,
            factor: a.num_heads / h_t,
        });
    }
    if !drop.is_empty() {
        edits.push(Edit::DropChannels {
            component: 2,
            scope: Scope::Block(block),
            indices: drop,
        });
    }
    Ok(edits)
}

fn scores_for<'t>(table: &'t ImportanceTable, g: &ChannelGroup) -> Result<&'t [f64]> {
    let s = table
        .group(g.component, g.scope)
        .ok_or_else(|| Error::InvalidPrune(format!("importance table has no scores for {}", g.label())))?;
    if s.len() != g.size {
        return Err(Error::InvalidPrune(format!(
            "importance table has {} scores for {} ({} channels)",
            s.len(),
            g.label(),
            g.size
        )));
    }
    Ok(s)
}

fn finish(model: &Model, edits: Vec<Edit>) -> Result<(Model, PruneRecipe)> {
    let pruned = apply_edits(model, &edits)?;
    let recipe = PruneRecipe {
        source: model.fingerprint(),
        target: pruned.fingerprint(),
        edits,
    };
    Ok((pruned, recipe))
}

/// Drops `⌊ratio·size⌋` lowest-scoring channels from every group independently.
/// Attention-embedding groups lose `⌊ratio·head_dim⌋` channels from every head,
/// keeping the head count.
pub fn prune_channels(model: &Model, table: &ImportanceTable, ratio: f64) -> Result<(Model, PruneRecipe)> {
    table.ensure_matches(model)?;
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidPrune(format!("ratio {ratio} outside [0, 1)")));
    }
    let mut edits = Vec::new();
    for g in component_map(&model.spec).groups {
        let scores = scores_for(table, &g)?;
        if g.component == 2 {
            let Scope::Block(id) = g.scope else { unreachable!("attention groups are per block") };
            let a = model.spec.block(id).and_then(|b| b.attn).expect("group implies attention");
            let per_head = (ratio * a.head_dim() as f64).floor() as usize;
            let d_t = a.dim - per_head * a.num_heads;
            edits.extend(prune_heads(model, id, d_t, a.num_heads, HeadStrategy::PerHead, scores)?);
            continue;
        }
        let n = (ratio * g.size as f64).floor() as usize;
        if n >= g.size {
            return Err(Error::EmptyGroup(g.label()));
        }
        if n > 0 {
            edits.push(Edit::DropChannels {
                component: g.component,
                scope: g.scope,
                indices: lowest(scores, n),
            });
        }
    }
    finish(model, edits)
}

/// Absolute survivor counts for a vanilla model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Targets {
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub strategy: HeadStrategy,
}

pub fn prune_to_targets(model: &Model, table: &ImportanceTable, t: &Targets) -> Result<(Model, PruneRecipe)> {
    table.ensure_matches(model)?;
    if model.spec.variant != Variant::Vanilla {
        return Err(Error::InvalidPrune("explicit targets apply to vanilla models only".into()));
    }
    let mut edits = Vec::new();
    for g in component_map(&model.spec).groups {
        let scores = scores_for(table, &g)?;
        let keep = match g.component {
            1 => t.embed_dim,
            3 => t.ffn_dim,
            _ => {
                let Scope::Block(id) = g.scope else { unreachable!("attention groups are per block") };
                edits.extend(prune_heads(model, id, t.attn_dim, t.heads, t.strategy, scores)?);
                continue;
            }
        };
        if keep == 0 || keep > g.size {
            return Err(Error::InvalidPrune(format!(
                "cannot keep {keep} of {} channels in {}",
                g.size,
                g.label()
            )));
        }
        if keep < g.size {
            edits.push(Edit::DropChannels {
                component: g.component,
                scope: g.scope,
                indices: lowest(scores, g.size - keep),
            });
        }
    }
    finish(model, edits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowest_breaks_ties_toward_lower_index() {
        assert_eq!(lowest(&[1.0, 1.0, 1.0], 2), vec![1, 2]);
        assert_eq!(lowest(&[3.0, 0.0, 2.0, 0.5], 2), vec![1, 3]);
        assert_eq!(lowest(&[3.0, 0.0], 0), Vec::<usize>::new());
    }

    #[test]
    fn worked_strategy_example() {
        let s = [0., 3., 1., 2., 4., 0., 2., 1.];
        let keep = |st| survivors(8, &head_drop_set(&s, 4, 4, 2, st).unwrap());
        assert_eq!(keep(HeadStrategy::MergeThenPrune), vec![1, 3, 4, 6]);
        assert_eq!(keep(HeadStrategy::PerHead), vec![1, 3, 4, 6]);
        assert_eq!(keep(HeadStrategy::Global), vec![1, 3, 4, 6]);
    }

    #[test]
    fn divisibility_errors() {
        let s = [0.0; 12];
        assert!(head_drop_set(&s, 4, 6, 3, HeadStrategy::Global).is_err());
        assert!(head_drop_set(&s, 4, 5, 1, HeadStrategy::PerHead).is_err());
        assert!(head_drop_set(&s, 4, 6, 2, HeadStrategy::MergeThenPrune).is_ok());
    }
}
