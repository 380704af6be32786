use crate::error::{Error, Result};
use crate::importance::BlockCandidate;
use crate::model::{BlockId, BlockSpec, Model, WeightStore};

fn out_of_range(model: &Model, id: BlockId) -> Error {
    Error::BlockIndex {
        index: id.index,
        len: model.spec.stages.get(id.stage).map_or(0, |s| s.blocks.len()),
    }
}

/// Deletes block `id` entirely.
pub fn remove_block(model: &Model, id: BlockId) -> Result<Model> {
    if model.spec.block(id).is_none() {
        return Err(out_of_range(model, id));
    }
    canonicalize(&with_flags(model, BlockCandidate::Whole(id))?)
}

/// Deletes the FFN of block `id` and the attention of the block after it,
/// fusing the remainder into a single block.
pub fn remove_hybrid(model: &Model, id: BlockId) -> Result<Model> {
    let next = BlockId::new(id.stage, id.index + 1);
    if model.spec.block(id).is_none() {
        return Err(out_of_range(model, id));
    }
    if model.spec.block(next).is_none() {
        return Err(out_of_range(model, next));
    }
    canonicalize(&with_flags(model, BlockCandidate::Hybrid(id))?)
}

/// The model with a candidate's halves switched off but blocks not re-packed.
pub fn with_flags(model: &Model, cand: BlockCandidate) -> Result<Model> {
    let spec = cand.apply_flags(&model.spec)?;
    let mut weights = model.weights.clone();
    for id in spec.block_ids() {
        let (old, new) = (model.spec.block(id).unwrap(), spec.block(id).unwrap());
        let pre = spec.block_prefix(id);
        if old.attn.is_some() && new.attn.is_none() {
            drop_keys(&mut weights, &pre, ATTN_PARTS);
        }
        if old.ffn.is_some() && new.ffn.is_none() {
            drop_keys(&mut weights, &pre, FFN_PARTS);
        }
    }
    Ok(Model::new(spec, weights))
}

const ATTN_PARTS: &[&str] = &["norm1.", "attn."];
const FFN_PARTS: &[&str] = &["norm2.", "mlp."];

fn drop_keys(w: &mut WeightStore, prefix: &str, parts: &[&str]) {
    let keys: Vec<String> = w
        .names()
        .filter(|k| parts.iter().any(|p| k.starts_with(&format!("{prefix}.{p}"))))
        .cloned()
        .collect();
    for k in keys {
        w.remove(&k);
    }
}

/// Re-packs present attention/FFN halves into full blocks, renaming
/// parameters so every stage is a plain sequence of blocks again.
pub fn canonicalize(model: &Model) -> Result<Model> {
    model.spec.check_flags()?;
    let mut spec = model.spec.clone();
    let mut weights = model.weights.clone();
    for s in 0..spec.stages.len() {
        // (attention source, FFN source) for each new block.
        let mut pairs: Vec<(BlockId, BlockId)> = Vec::new();
        let mut pending: Option<BlockId> = None;
        for (k, b) in model.spec.stages[s].blocks.iter().enumerate() {
            let id = BlockId::new(s, k);
            if b.attn.is_some() {
                pending = Some(id);
            }
            if b.ffn.is_some() {
                let a = pending.take().expect("flag pattern checked");
                pairs.push((a, id));
            }
        }
        if pairs.iter().enumerate().all(|(k, &(a, f))| a.index == k && f.index == k)
            && pairs.len() == model.spec.stages[s].blocks.len()
        {
            continue;
        }
        for k in 0..model.spec.stages[s].blocks.len() {
            let pre = model.spec.block_prefix(BlockId::new(s, k));
            drop_keys(&mut weights, &pre, &[ATTN_PARTS, FFN_PARTS].concat());
        }
        let mut blocks = Vec::with_capacity(pairs.len());
        for (k, &(a, f)) in pairs.iter().enumerate() {
            let new_pre = model.spec.block_prefix(BlockId::new(s, k));
            blocks.push(BlockSpec {
                attn: model.spec.block(a).unwrap().attn,
                ffn: model.spec.block(f).unwrap().ffn,
            });
            for (src, parts) in [(a, ATTN_PARTS), (f, FFN_PARTS)] {
                let old_pre = model.spec.block_prefix(src);
                for (name, t) in model.weights.iter() {
                    if let Some(rest) = name.strip_prefix(&format!("{old_pre}.")) {
                        if parts.iter().any(|p| rest.starts_with(p)) {
                            weights.insert(format!("{new_pre}.{rest}"), t.clone());
                        }
                    }
                }
            }
        }
        spec.stages[s].blocks = blocks;
    }
    Ok(Model::new(spec, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ArchSpec};
    use crate::tensor::Tensor;

    #[test]
    fn hybrid_on_two_blocks_fuses_halves() {
        let m = init_model(&ArchSpec::vit(8, 4, 1, 3, 4, 2, 1, 2), 5).unwrap();
        let h = remove_hybrid(&m, BlockId::new(0, 0)).unwrap();
        assert_eq!(h.spec.num_blocks(), 1);
        assert_eq!(h.weights.get("blocks.0.attn.q.weight"), m.weights.get("blocks.0.attn.q.weight"));
        assert_eq!(h.weights.get("blocks.0.mlp.fc1.weight"), m.weights.get("blocks.1.mlp.fc1.weight"));
        assert!(h.weights.get("blocks.1.norm1.weight").is_none());
        let x = Tensor::ones(&[1, 1, 8, 8]);
        let flagged = with_flags(&m, BlockCandidate::Hybrid(BlockId::new(0, 0))).unwrap();
        assert_eq!(h.forward(&x).unwrap().logits, flagged.forward(&x).unwrap().logits);
    }

    #[test]
    fn out_of_range_blocks() {
        let m = init_model(&ArchSpec::vit(8, 4, 1, 3, 4, 2, 1, 2), 5).unwrap();
        assert!(matches!(remove_block(&m, BlockId::new(0, 2)), Err(Error::BlockIndex { .. })));
        assert!(matches!(remove_hybrid(&m, BlockId::new(0, 1)), Err(Error::BlockIndex { .. })));
    }
}
