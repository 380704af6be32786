use std::collections::{BTreeMap, HashMap};

use super::{ArchSpec, BlockId, BlockSpec, Model, ParamSource, Variant};
use crate::error::{Error, Result};
use crate::tape::{ConvGeometry, Tape, Var};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Per-block 0/1 multipliers over the Q/K/V output channels.
    pub head_masks: BTreeMap<BlockId, Vec<f64>>,
}

/// Where the forward pass begins.
#[derive(Debug, Clone, Copy)]
pub enum StartPoint {
    /// `[B,C,H,W]` images.
    Image(Var),
    /// Tokens entering the given block (as recorded in `block_inputs`).
    Block { id: BlockId, tokens: Var },
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Pre-classifier feature: final-normed class token, or pooled tokens.
    pub feature: Var,
    /// Final-normed patch tokens `[B,N,D]` (class token excluded).
    pub patch_tokens: Var,
    /// Tokens entering each executed block.
    pub block_inputs: Vec<(BlockId, Var)>,
    /// Parameter leaves created for this pass, by name.
    pub params: HashMap<String, Var>,
}

/// Materialized forward results.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub logits: Tensor,
    pub feature: Tensor,
    pub patch_tokens: Tensor,
}

struct Builder<'t, 'a> {
    tape: &'t mut Tape<'a>,
    src: &'a dyn ParamSource,
    trainable: bool,
    params: HashMap<String, Var>,
    eps: f64,
}

impl<'a> Builder<'_, 'a> {
    fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = self.src.require(name)?;
        let v = if self.trainable {
            self.tape.param(t)
        } else {
            self.tape.constant_ref(t)
        };
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        self.tape.linear(x, w, Some(b))
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        self.tape.layer_norm(x, g, b, self.eps)
    }

    fn conv(&mut self, x: Var, prefix: &str, geom: ConvGeometry) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        self.tape.conv2d(x, w, Some(b), geom)
    }
}

/// Records one forward pass of `spec` over `src` on `tape`.
///
/// With `trainable` set, every parameter becomes a differentiable leaf;
/// otherwise parameters are constants and only inputs can carry gradients.
pub fn build_forward<'a>(
    tape: &mut Tape<'a>,
    spec: &ArchSpec,
    src: &'a dyn ParamSource,
    start: StartPoint,
    opts: &ForwardOptions,
    trainable: bool,
) -> Result<ForwardOutput> {
    let mut b = Builder {
        tape,
        src,
        trainable,
        params: HashMap::new(),
        eps: spec.ln_eps,
    };
    for (id, mask) in &opts.head_masks {
        let width = spec.block(*id).and_then(|blk| blk.attn).map(|a| a.dim);
        match width {
            Some(w) if w == mask.len() => {}
            Some(w) => {
                return Err(Error::MaskLength {
                    block: id.to_string(),
                    expected: w,
                    got: mask.len(),
                })
            }
            None => {
                return Err(Error::MaskLength {
                    block: id.to_string(),
                    expected: 0,
                    got: mask.len(),
                })
            }
        }
    }

    let (first_stage, first_block, mut x) = match start {
        StartPoint::Image(img) => {
            let expect = [spec.in_channels, spec.image_size, spec.image_size];
            let shape = b.tape.shape(img);
            if shape.len() != 4 || shape[1..] != expect {
                return Err(Error::ShapeMismatch {
                    op: "forward input",
                    lhs: shape.to_vec(),
                    rhs: expect.to_vec(),
                });
            }
            (0, 0, embed(&mut b, spec, 0, img)?)
        }
        StartPoint::Block { id, tokens } => {
            spec.block(id).ok_or(Error::BlockIndex {
                index: id.index,
                len: spec.num_blocks(),
            })?;
            (id.stage, id.index, tokens)
        }
    };

    let mut block_inputs = Vec::new();
    let n_stages = spec.stages.len();
    for s in first_stage..n_stages {
        if s > first_stage {
            let prev = s - 1;
            let g = spec.grid(prev);
            let grid = b.tape.tokens_to_grid(x, g, g)?;
            x = embed(&mut b, spec, s, grid)?;
        }
        let skip = if s == first_stage { first_block } else { 0 };
        for (k, blk) in spec.stages[s].blocks.iter().enumerate().skip(skip) {
            let id = BlockId::new(s, k);
            block_inputs.push((id, x));
            x = block(&mut b, spec, id, blk, x, opts.head_masks.get(&id))?;
        }
        if spec.variant == Variant::Staged {
            x = b.norm(x, &format!("{}norm", spec.stage_prefix(s)))?;
        }
    }

    let (feature, patch_tokens) = match spec.variant {
        Variant::Vanilla => {
            let x = b.norm(x, "norm")?;
            let t = b.tape.shape(x)[1];
            (b.tape.select_token(x, 0)?, b.tape.slice_tokens(x, 1, t)?)
        }
        Variant::Staged => (b.tape.mean_tokens(x)?, x),
    };
    let logits = b.linear(feature, "head")?;
    Ok(ForwardOutput {
        logits,
        feature,
        patch_tokens,
        block_inputs,
        params: b.params,
    })
}

fn embed(b: &mut Builder<'_, '_>, spec: &ArchSpec, s: usize, input: Var) -> Result<Var> {
    match spec.variant {
        Variant::Vanilla => {
            let patches = b.tape.patchify(input, spec.stages[0].patch_size)?;
            let tokens = b.linear(patches, "patch_embed")?;
            let cls = b.p("cls_token")?;
            let with_cls = b.tape.prepend_token(cls, tokens)?;
            let pos = b.p("pos_embed")?;
            b.tape.add_broadcast(with_cls, pos)
        }
        Variant::Staged => {
            let (_, stride, pad) = spec.patch_conv(s);
            let sp = spec.stage_prefix(s);
            let geom = ConvGeometry {
                stride,
                pad,
                groups: 1,
            };
            let grid = b.conv(input, &format!("{sp}patch_embed.proj"), geom)?;
            let tokens = b.tape.grid_to_tokens(grid)?;
            b.norm(tokens, &format!("{sp}patch_embed.norm"))
        }
    }
}

fn block(
    b: &mut Builder<'_, '_>,
    spec: &ArchSpec,
    id: BlockId,
    blk: &BlockSpec,
    mut x: Var,
    mask: Option<&Vec<f64>>,
) -> Result<Var> {
    let pre = spec.block_prefix(id);
    let g = spec.grid(id.stage);
    if let Some(a) = &blk.attn {
        let y = b.norm(x, &format!("{pre}.norm1"))?;
        let mut q = b.linear(y, &format!("{pre}.attn.q"))?;
        let kv_in = match &a.sr {
            Some(sr) => {
                let grid = b.tape.tokens_to_grid(y, g, g)?;
                let geom = ConvGeometry {
                    stride: sr.ratio,
                    pad: 0,
                    groups: 1,
                };
                let red = b.conv(grid, &format!("{pre}.attn.sr"), geom)?;
                let toks = b.tape.grid_to_tokens(red)?;
                b.norm(toks, &format!("{pre}.attn.sr_norm"))?
            }
            None => y,
        };
        let mut k = b.linear(kv_in, &format!("{pre}.attn.k"))?;
        let mut v = b.linear(kv_in, &format!("{pre}.attn.v"))?;
        if let Some(m) = mask {
            q = b.tape.mask_channels(q, m)?;
            k = b.tape.mask_channels(k, m)?;
            v = b.tape.mask_channels(v, m)?;
        }
        let o = b.tape.attention(q, k, v, a.num_heads)?;
        let o = b.linear(o, &format!("{pre}.attn.proj"))?;
        x = b.tape.add(x, o)?;
    }
    if blk.ffn.is_some() {
        let y = b.norm(x, &format!("{pre}.norm2"))?;
        let mut h = b.linear(y, &format!("{pre}.mlp.fc1"))?;
        if spec.variant == Variant::Staged {
            let width = b.tape.shape(h)[2];
            let grid = b.tape.tokens_to_grid(h, g, g)?;
            let geom = ConvGeometry {
                stride: 1,
                pad: 1,
                groups: width,
            };
            let grid = b.conv(grid, &format!("{pre}.mlp.dwconv"), geom)?;
            h = b.tape.grid_to_tokens(grid)?;
        }
        let h = b.tape.gelu(h);
        let o = b.linear(h, &format!("{pre}.mlp.fc2"))?;
        x = b.tape.add(x, o)?;
    }
    Ok(x)
}

/// Inference over a batch of images `[B,C,H,W]` with constant parameters.
pub fn forward_source(
    spec: &ArchSpec,
    src: &dyn ParamSource,
    images: &Tensor,
    opts: &ForwardOptions,
    precision: Precision,
) -> Result<Outputs> {
    let mut tape = Tape::with_precision(precision);
    let img = tape.constant_ref(images);
    let out = build_forward(&mut tape, spec, src, StartPoint::Image(img), opts, false)?;
    Ok(Outputs {
        logits: tape.value(out.logits).clone(),
        feature: tape.value(out.feature).clone(),
        patch_tokens: tape.value(out.patch_tokens).clone(),
    })
}

impl Model {
    pub fn forward(&self, images: &Tensor) -> Result<Outputs> {
        forward_source(&self.spec, &self.weights, images, &ForwardOptions::default(), Precision::F64)
    }

    pub fn forward_with(&self, images: &Tensor, opts: &ForwardOptions, precision: Precision) -> Result<Outputs> {
        forward_source(&self.spec, &self.weights, images, opts, precision)
    }

    /// Logits for `images`, evaluated in fixed chunks of `chunk` samples.
    pub fn logits(&self, images: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = images.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            parts.push(self.forward(&images.slice_rows(start, end))?.logits);
            start = end;
        }
        Tensor::stack_rows(&parts)
    }
}
