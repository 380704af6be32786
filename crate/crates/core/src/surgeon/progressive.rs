use serde::Serialize;

use crate::error::{Error, Result};
use crate::importance::{score_blocks, BlockCandidate, BlockScore, ProxySet, ScoreOptions};
use crate::model::Model;

use super::recipe::{apply_edit, apply_edits, Edit, PruneRecipe};
use super::validate::ensure_valid;

/// One greedy removal and the scores it was chosen from.
#[derive(Debug, Clone, Serialize)]
pub struct BlockStep {
    pub chosen: BlockCandidate,
    pub score: f64,
    pub scores: Vec<BlockScore>,
}

fn edit_for(c: BlockCandidate) -> Edit {
    match c {
        BlockCandidate::Whole(b) => Edit::DropBlock(b),
        BlockCandidate::Hybrid(b) => Edit::DropHybrid(b),
    }
}

/// Lowest score; ties prefer whole blocks over hybrids, then earlier blocks.
pub fn pick_min(scores: &[BlockScore]) -> Option<&BlockScore> {
    scores.iter().min_by(|a, b| {
        let rank = |c: &BlockCandidate| match c {
            BlockCandidate::Whole(id) => (0, *id),
            BlockCandidate::Hybrid(id) => (1, *id),
        };
        a.score.total_cmp(&b.score).then(rank(&a.candidate).cmp(&rank(&b.candidate)))
    })
}

/// Greedily removes one candidate at a time, re-scoring after every removal,
/// until `target` blocks remain. `after_step` may replace the model between
/// steps (for example to fine-tune it); return the input unchanged otherwise.
pub fn progressive_block_prune(
    model: &Model,
    proxy: &ProxySet,
    target: usize,
    opts: ScoreOptions,
    mut after_step: impl FnMut(usize, Model) -> Result<Model>,
) -> Result<(Model, PruneRecipe, Vec<BlockStep>)> {
    if target < 1 {
        return Err(Error::InvalidPrune("target depth must be at least 1".into()));
    }
    if target > model.spec.num_blocks() {
        return Err(Error::InvalidPrune(format!(
            "target depth {target} exceeds current depth {}",
            model.spec.num_blocks()
        )));
    }
    let mut current = model.clone();
    let mut edits = Vec::new();
    let mut steps = Vec::new();
    while current.spec.num_blocks() > target {
        let table = score_blocks(&current, proxy, opts)?;
        let best = pick_min(&table.blocks).expect("at least one candidate").clone();
        let edit = edit_for(best.candidate);
        current = apply_edit(current, &edit)?;
        ensure_valid(&current)?;
        current = after_step(steps.len(), current)?;
        edits.push(edit);
        steps.push(BlockStep {
            chosen: best.candidate,
            score: best.score,
            scores: table.blocks,
        });
    }
    let recipe = PruneRecipe {
        source: model.fingerprint(),
        target: current.fingerprint(),
        edits,
    };
    Ok((current, recipe, steps))
}

fn halves(c: BlockCandidate) -> [(crate::model::BlockId, bool); 2] {
    match c {
        BlockCandidate::Whole(b) => [(b, true), (b, false)],
        BlockCandidate::Hybrid(b) => [(b, false), (crate::model::BlockId::new(b.stage, b.index + 1), true)],
    }
}

/// Removes the `count` lowest-scoring mutually disjoint candidates chosen from
/// a single scoring round.
pub fn oneshot_block_prune(model: &Model, scores: &[BlockScore], count: usize) -> Result<(Model, PruneRecipe)> {
    if count >= model.spec.num_blocks() {
        return Err(Error::InvalidPrune(format!(
            "cannot remove {count} of {} blocks",
            model.spec.num_blocks()
        )));
    }
    let mut pool: Vec<BlockScore> = scores.to_vec();
    let mut chosen: Vec<BlockCandidate> = Vec::new();
    while chosen.len() < count {
        let best = pick_min(&pool)
            .ok_or_else(|| Error::InvalidPrune("not enough disjoint block candidates".into()))?
            .candidate;
        pool.retain(|s| s.candidate != best);
        let used: Vec<_> = chosen.iter().flat_map(|c| halves(*c)).collect();
        if halves(best).iter().all(|h| !used.contains(h)) {
            chosen.push(best);
        }
    }
    // Later positions first, so earlier indices stay valid during replay.
    chosen.sort_by(|a, b| b.block().cmp(&a.block()));
    let edits: Vec<Edit> = chosen.into_iter().map(edit_for).collect();
    let pruned = apply_edits(model, &edits)?;
    let recipe = PruneRecipe {
        source: model.fingerprint(),
        target: pruned.fingerprint(),
        edits,
    };
    Ok((pruned, recipe))
}
