//! Vision transformer definition: architecture, parameters, forward pass and
//! the channel-coupling map that pruning operates on.

mod arch;
mod components;
mod forward;
mod init;

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

pub use arch::{ArchSpec, AttnSpec, BlockId, BlockSpec, FfnSpec, SrSpec, StageSpec, Variant, DEFAULT_LN_EPS};
pub use components::{component_map, ChannelGroup, ComponentMap, Scope, SliceRule};
pub use forward::{build_forward, forward_source, ForwardOptions, ForwardOutput, Outputs, StartPoint};
pub use init::{init_model, init_model_with_std, INIT_STD};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Every parameter name and shape implied by `spec`, in canonical order.
pub fn shape_table(spec: &ArchSpec) -> Vec<(String, Vec<usize>)> {
    let mut t: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| t.push((name, shape));
    let c = spec.in_channels;
    for (s, st) in spec.stages.iter().enumerate() {
        let d = st.embed_dim;
        let sp = spec.stage_prefix(s);
        match spec.variant {
            Variant::Vanilla => {
                let p = st.patch_size;
                push("patch_embed.weight".into(), vec![d, c * p * p]);
                push("patch_embed.bias".into(), vec![d]);
                push("cls_token".into(), vec![1, d]);
                push("pos_embed".into(), vec![spec.seq_len(0), d]);
            }
            Variant::Staged => {
                let (k, _, _) = spec.patch_conv(s);
                push(format!("{sp}patch_embed.proj.weight"), vec![d, spec.stage_in_channels(s), k, k]);
                push(format!("{sp}patch_embed.proj.bias"), vec![d]);
                push(format!("{sp}patch_embed.norm.weight"), vec![d]);
                push(format!("{sp}patch_embed.norm.bias"), vec![d]);
            }
        }
        for (k, b) in st.blocks.iter().enumerate() {
            let pre = spec.block_prefix(BlockId::new(s, k));
            if let Some(a) = &b.attn {
                push(format!("{pre}.norm1.weight"), vec![d]);
                push(format!("{pre}.norm1.bias"), vec![d]);
                push(format!("{pre}.attn.q.weight"), vec![a.dim, d]);
                push(format!("{pre}.attn.q.bias"), vec![a.dim]);
                let kv_in = match &a.sr {
                    Some(sr) => {
                        push(format!("{pre}.attn.sr.weight"), vec![sr.dim, d, sr.ratio, sr.ratio]);
                        push(format!("{pre}.attn.sr.bias"), vec![sr.dim]);
                        push(format!("{pre}.attn.sr_norm.weight"), vec![sr.dim]);
                        push(format!("{pre}.attn.sr_norm.bias"), vec![sr.dim]);
                        sr.dim
                    }
                    None => d,
                };
                for n in ["k", "v"] {
                    push(format!("{pre}.attn.{n}.weight"), vec![a.dim, kv_in]);
                    push(format!("{pre}.attn.{n}.bias"), vec![a.dim]);
                }
                push(format!("{pre}.attn.proj.weight"), vec![d, a.dim]);
                push(format!("{pre}.attn.proj.bias"), vec![d]);
            }
            if let Some(f) = &b.ffn {
                let h = f.hidden_dim;
                push(format!("{pre}.norm2.weight"), vec![d]);
                push(format!("{pre}.norm2.bias"), vec![d]);
                push(format!("{pre}.mlp.fc1.weight"), vec![h, d]);
                push(format!("{pre}.mlp.fc1.bias"), vec![h]);
                if spec.variant == Variant::Staged {
                    push(format!("{pre}.mlp.dwconv.weight"), vec![h, 1, 3, 3]);
                    push(format!("{pre}.mlp.dwconv.bias"), vec![h]);
                }
                push(format!("{pre}.mlp.fc2.weight"), vec![d, h]);
                push(format!("{pre}.mlp.fc2.bias"), vec![d]);
            }
        }
        if spec.variant == Variant::Staged {
            push(format!("{sp}norm.weight"), vec![d]);
            push(format!("{sp}norm.bias"), vec![d]);
        }
    }
    if spec.variant == Variant::Vanilla {
        let d = spec.final_dim();
        push("norm.weight".into(), vec![d]);
        push("norm.bias".into(), vec![d]);
    }
    push("head.weight".into(), vec![spec.num_classes, spec.final_dim()]);
    push("head.bias".into(), vec![spec.num_classes]);
    t
}

/// Read access to named parameters.
pub trait ParamSource: Sync {
    fn param(&self, name: &str) -> Option<&Tensor>;

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.param(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        WeightStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

impl ParamSource for WeightStore {
    fn param(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }
}

/// A base store seen through a set of replaced tensors; the base is never touched.
pub struct Overlay<'a> {
    pub base: &'a dyn ParamSource,
    pub overrides: BTreeMap<String, Tensor>,
}

impl<'a> Overlay<'a> {
    pub fn new(base: &'a dyn ParamSource) -> Self {
        Overlay {
            base,
            overrides: BTreeMap::new(),
        }
    }
}

impl ParamSource for Overlay<'_> {
    fn param(&self, name: &str) -> Option<&Tensor> {
        self.overrides.get(name).or_else(|| self.base.param(name))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ArchSpec,
    pub weights: WeightStore,
}

impl Model {
    pub fn new(spec: ArchSpec, weights: WeightStore) -> Self {
        Model { spec, weights }
    }

    /// Hex SHA-256 over the canonical spec and every tensor in shape-table order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.spec.canonical_json().as_bytes());
        for (name, _) in shape_table(&self.spec) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            if let Some(t) = self.weights.get(&name) {
                h.update((t.ndim() as u64).to_le_bytes());
                for &d in t.shape() {
                    h.update((d as u64).to_le_bytes());
                }
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn num_params(&self) -> usize {
        self.weights.num_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(spec: &ArchSpec) -> usize {
        shape_table(spec).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    #[test]
    fn deit_tiny_hand_count() {
        assert_eq!(count(&ArchSpec::deit_tiny()), 5_717_416);
    }

    #[test]
    fn pvt_b0_near_published_size() {
        let n = count(&ArchSpec::pvt_v2_b0(224, 1000)) as f64;
        assert!((n / 3.67e6 - 1.0).abs() < 0.02, "{n}");
    }

    #[test]
    fn forward_shapes() {
        let spec = ArchSpec::vit(8, 4, 3, 5, 8, 2, 2, 2);
        let m = init_model(&spec, 3).unwrap();
        let out = m.forward(&Tensor::ones(&[2, 3, 8, 8])).unwrap();
        assert_eq!(out.logits.shape(), &[2, 5]);
        assert_eq!(out.patch_tokens.shape(), &[2, 4, 8]);
        let staged = ArchSpec::pvt_v2_b0(32, 4);
        let m = init_model(&staged, 3).unwrap();
        let out = m.forward(&Tensor::ones(&[1, 3, 32, 32])).unwrap();
        assert_eq!(out.logits.shape(), &[1, 4]);
        assert!(out.logits.is_finite());
    }
}
