use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Single stage, class token, non-overlapping patch projection.
    Vanilla,
    /// Multi-stage pyramid: overlapping conv patch embeddings, spatial-reduction
    /// attention, depthwise conv in the FFN, mean-pooled head.
    Staged,
}

/// Spatial reduction ahead of the key/value projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SrSpec {
    /// Kernel size and stride of the reduction conv.
    pub ratio: usize,
    /// Output channels of the reduction conv (input width of FC_k/FC_v).
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnSpec {
    pub num_heads: usize,
    /// Width of the Q/K/V projections.
    pub dim: usize,
    pub sr: Option<SrSpec>,
}

impl AttnSpec {
    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FfnSpec {
    pub hidden_dim: usize,
}

/// One transformer block. Either half may be absent, which only happens
/// transiently between a hybrid removal and canonicalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub attn: Option<AttnSpec>,
    pub ffn: Option<FfnSpec>,
}

impl BlockSpec {
    pub fn is_full(&self) -> bool {
        self.attn.is_some() && self.ffn.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub embed_dim: usize,
    /// Patch size (vanilla) or downsampling stride of the stage's embedding conv.
    pub patch_size: usize,
    pub blocks: Vec<BlockSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub variant: Variant,
    /// Square input resolution.
    pub image_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub ln_eps: f64,
    pub stages: Vec<StageSpec>,
}

/// Address of a block: stage index and position within the stage (both 0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockId {
    pub stage: usize,
    pub index: usize,
}

impl BlockId {
    pub fn new(stage: usize, index: usize) -> Self {
        BlockId { stage, index }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.stage, self.index)
    }
}

pub const DEFAULT_LN_EPS: f64 = 1e-6;

impl ArchSpec {
    /// Vanilla ViT with uniform blocks.
    #[allow(clippy::too_many_arguments)]
    pub fn vit(
        image_size: usize,
        patch_size: usize,
        in_channels: usize,
        num_classes: usize,
        embed_dim: usize,
        depth: usize,
        num_heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        let block = BlockSpec {
            attn: Some(AttnSpec {
                num_heads,
                dim: embed_dim,
                sr: None,
            }),
            ffn: Some(FfnSpec {
                hidden_dim: mlp_ratio * embed_dim,
            }),
        };
        ArchSpec {
            variant: Variant::Vanilla,
            image_size,
            in_channels,
            num_classes,
            ln_eps: DEFAULT_LN_EPS,
            stages: vec![StageSpec {
                embed_dim,
                patch_size,
                blocks: vec![block; depth],
            }],
        }
    }

    pub fn deit_tiny() -> Self {
        ArchSpec::vit(224, 16, 3, 1000, 192, 12, 3, 4)
    }

    pub fn deit_small() -> Self {
        ArchSpec::vit(224, 16, 3, 1000, 384, 12, 6, 4)
    }

    pub fn deit_base() -> Self {
        ArchSpec::vit(224, 16, 3, 1000, 768, 12, 12, 4)
    }

    /// Four-stage pyramid shaped like PVTv2-B0.
    pub fn pvt_v2_b0(image_size: usize, num_classes: usize) -> Self {
        let dims = [32, 64, 160, 256];
        let heads = [1, 2, 5, 8];
        let srs = [8, 4, 2, 1];
        let ratios = [8, 8, 4, 4];
        let strides = [4, 2, 2, 2];
        ArchSpec::staged(image_size, 3, num_classes, &dims, &heads, &srs, &ratios, &strides, &[2; 4])
    }

    /// Generic staged spec. An `sr` ratio of 1 means no spatial reduction.
    #[allow(clippy::too_many_arguments)]
    pub fn staged(
        image_size: usize,
        in_channels: usize,
        num_classes: usize,
        dims: &[usize],
        heads: &[usize],
        sr_ratios: &[usize],
        mlp_ratios: &[usize],
        strides: &[usize],
        depths: &[usize],
    ) -> Self {
        let stages = (0..dims.len())
            .map(|s| {
                let block = BlockSpec {
                    attn: Some(AttnSpec {
                        num_heads: heads[s],
                        dim: dims[s],
                        sr: (sr_ratios[s] > 1).then_some(SrSpec {
                            ratio: sr_ratios[s],
                            dim: dims[s],
                        }),
                    }),
                    ffn: Some(FfnSpec {
                        hidden_dim: mlp_ratios[s] * dims[s],
                    }),
                };
                StageSpec {
                    embed_dim: dims[s],
                    patch_size: strides[s],
                    blocks: vec![block; depths[s]],
                }
            })
            .collect();
        ArchSpec {
            variant: Variant::Staged,
            image_size,
            in_channels,
            num_classes,
            ln_eps: DEFAULT_LN_EPS,
            stages,
        }
    }

    pub fn block_ids(&self) -> Vec<BlockId> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(s, st)| (0..st.blocks.len()).map(move |k| BlockId::new(s, k)))
            .collect()
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks.len()).sum()
    }

    pub fn block(&self, id: BlockId) -> Option<&BlockSpec> {
        self.stages.get(id.stage)?.blocks.get(id.index)
    }

    pub fn block_mut(&mut self, id: BlockId) -> Option<&mut BlockSpec> {
        self.stages.get_mut(id.stage)?.blocks.get_mut(id.index)
    }

    /// Embedding width of the last stage (the classifier input).
    pub fn final_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.embed_dim)
    }

    /// Token grid side length within stage `s`.
    pub fn grid(&self, s: usize) -> usize {
        let mut side = self.image_size;
        for st in &self.stages[..=s] {
            side /= st.patch_size;
        }
        side
    }

    /// Number of patch tokens in stage `s` (class token excluded).
    pub fn num_patches(&self, s: usize) -> usize {
        self.grid(s) * self.grid(s)
    }

    /// Tokens per sequence in stage `s`, including the class token if any.
    pub fn seq_len(&self, s: usize) -> usize {
        self.num_patches(s) + usize::from(self.variant == Variant::Vanilla)
    }

    /// Kernel, stride and padding of stage `s`'s embedding.
    pub fn patch_conv(&self, s: usize) -> (usize, usize, usize) {
        let p = self.stages[s].patch_size;
        match self.variant {
            Variant::Vanilla => (p, p, 0),
            Variant::Staged => (2 * p - 1, p, p - 1),
        }
    }

    pub fn stage_in_channels(&self, s: usize) -> usize {
        if s == 0 {
            self.in_channels
        } else {
            self.stages[s - 1].embed_dim
        }
    }

    /// Key prefix for a block's parameters.
    pub fn block_prefix(&self, id: BlockId) -> String {
        match self.variant {
            Variant::Vanilla => format!("blocks.{}", id.index),
            Variant::Staged => format!("stages.{}.blocks.{}", id.stage, id.index),
        }
    }

    pub fn stage_prefix(&self, s: usize) -> String {
        match self.variant {
            Variant::Vanilla => String::new(),
            Variant::Staged => format!("stages.{s}."),
        }
    }

    /// Structural invariants that do not involve weights.
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.image_size == 0 || self.in_channels == 0 || self.num_classes == 0 {
            return bad("image size, channels and classes must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return bad(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.variant == Variant::Vanilla && self.stages.len() != 1 {
            return bad("vanilla variant has exactly one stage".into());
        }
        let mut side = self.image_size;
        let mut head_dim: Option<usize> = None;
        for (s, st) in self.stages.iter().enumerate() {
            if st.embed_dim == 0 || st.patch_size == 0 {
                return bad(format!("stage {s}: zero embed dim or patch size"));
            }
            if !side.is_multiple_of(st.patch_size) {
                return bad(format!(
                    "stage {s}: resolution {side} not divisible by patch size {}",
                    st.patch_size
                ));
            }
            side /= st.patch_size;
            for (k, b) in st.blocks.iter().enumerate() {
                let id = BlockId::new(s, k);
                if let Some(a) = &b.attn {
                    if a.num_heads == 0 || a.dim == 0 || a.dim % a.num_heads != 0 {
                        return bad(format!(
                            "block {id}: attention width {} not divisible by {} heads",
                            a.dim, a.num_heads
                        ));
                    }
                    match head_dim {
                        None => head_dim = Some(a.head_dim()),
                        Some(hd) if hd != a.head_dim() => {
                            return bad(format!(
                                "block {id}: head dim {} differs from {hd} elsewhere",
                                a.head_dim()
                            ))
                        }
                        _ => {}
                    }
                    if let Some(sr) = &a.sr {
                        if self.variant == Variant::Vanilla {
                            return bad(format!("block {id}: spatial reduction in vanilla variant"));
                        }
                        if sr.dim == 0 || sr.ratio < 2 || !side.is_multiple_of(sr.ratio) {
                            return bad(format!("block {id}: invalid spatial reduction {sr:?}"));
                        }
                    }
                }
                if let Some(f) = &b.ffn {
                    if f.hidden_dim == 0 {
                        return bad(format!("block {id}: zero FFN width"));
                    }
                }
            }
        }
        self.check_flags()
    }

    /// The sequence of present halves must alternate attention, FFN, starting
    /// with attention, within each stage.
    pub fn check_flags(&self) -> Result<()> {
        for (s, st) in self.stages.iter().enumerate() {
            if st.blocks.iter().all(|b| b.attn.is_none() && b.ffn.is_none()) {
                return Err(Error::InvalidSpec(format!("stage {s} has no blocks left")));
            }
            let mut expect_attn = true;
            for (k, b) in st.blocks.iter().enumerate() {
                for present_attn in [b.attn.is_some().then_some(true), b.ffn.is_some().then_some(false)]
                    .into_iter()
                    .flatten()
                {
                    if present_attn != expect_attn {
                        return Err(Error::InvalidSpec(format!(
                            "block {s}:{k}: illegal attention/FFN presence pattern"
                        )));
                    }
                    expect_attn = !expect_attn;
                }
            }
            if !expect_attn {
                return Err(Error::InvalidSpec(format!(
                    "stage {s} ends with a dangling attention half"
                )));
            }
        }
        Ok(())
    }

    /// Stable JSON used for fingerprints and checkpoint headers.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deit_tiny_geometry() {
        let s = ArchSpec::deit_tiny();
        s.check().unwrap();
        assert_eq!(s.num_patches(0), 196);
        assert_eq!(s.seq_len(0), 197);
        assert_eq!(s.num_blocks(), 12);
    }

    #[test]
    fn rejects_indivisible_heads_and_patches() {
        assert!(ArchSpec::vit(32, 16, 3, 10, 10, 1, 3, 4).check().is_err());
        assert!(ArchSpec::vit(30, 16, 3, 10, 12, 1, 3, 4).check().is_err());
    }

    #[test]
    fn flag_patterns() {
        let mut s = ArchSpec::vit(8, 4, 1, 2, 4, 3, 1, 1);
        s.stages[0].blocks[0].ffn = None;
        s.stages[0].blocks[1].attn = None;
        s.check().unwrap();
        s.stages[0].blocks[1].attn = s.stages[0].blocks[0].attn;
        assert!(s.check().is_err());
        let mut t = ArchSpec::vit(8, 4, 1, 2, 4, 2, 1, 1);
        t.stages[0].blocks[1].ffn = None;
        assert!(t.check().is_err());
    }

    #[test]
    fn pvt_geometry() {
        let s = ArchSpec::pvt_v2_b0(224, 1000);
        s.check().unwrap();
        assert_eq!(s.grid(0), 56);
        assert_eq!(s.grid(3), 7);
        assert!(s.stages[3].blocks[0].attn.unwrap().sr.is_none());
        assert_eq!(s.patch_conv(0), (7, 4, 3));
    }
}
