use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::{ArchSpec, BlockId, ParamSource, Variant};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scope {
    Network,
    Stage(usize),
    Block(BlockId),
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Network => write!(f, "net"),
            Scope::Stage(s) => write!(f, "stage:{s}"),
            Scope::Block(id) => write!(f, "block:{}:{}", id.stage, id.index),
        }
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad scope `{s}`"));
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["net"] => Ok(Scope::Network),
            ["stage", n] => Ok(Scope::Stage(num(n)?)),
            ["block", k] => Ok(Scope::Block(BlockId::new(0, num(k)?))),
            ["block", st, k] => Ok(Scope::Block(BlockId::new(num(st)?, num(k)?))),
            _ => Err(bad()),
        }
    }
}

/// One tensor axis indexed by the group's channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceRule {
    pub key: String,
    pub axis: usize,
}

/// Channels that must be cut together: channel `j` touches position `j` of
/// every rule's axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelGroup {
    /// 1 shortcut chain, 2 attention embedding, 3 FFN hidden, 4 spatial reduction.
    pub component: u8,
    pub scope: Scope,
    pub size: usize,
    pub rules: Vec<SliceRule>,
    /// Scored by zero-masking rather than removal.
    pub mask_only: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentMap {
    pub groups: Vec<ChannelGroup>,
}

impl ComponentMap {
    pub fn find(&self, component: u8, scope: Scope) -> Option<&ChannelGroup> {
        self.groups
            .iter()
            .find(|g| g.component == component && g.scope == scope)
    }

    pub fn total_channels(&self) -> usize {
        self.groups.iter().map(|g| g.size).sum()
    }
}

impl ChannelGroup {
    pub fn label(&self) -> String {
        format!("c{}@{}", self.component, self.scope)
    }

    /// Explicit (tensor, axis, index) coordinates of channel `j`.
    pub fn slices(&self, j: usize) -> Vec<(String, usize, usize)> {
        self.rules.iter().map(|r| (r.key.clone(), r.axis, j)).collect()
    }

    fn check_indices(&self, idx: &[usize]) -> Result<()> {
        match idx.iter().find(|&&j| j >= self.size) {
            Some(&j) => Err(Error::ChannelIndex {
                group: self.label(),
                index: j,
                size: self.size,
            }),
            None => Ok(()),
        }
    }

    /// Replacement tensors with channels `drop` physically removed.
    pub fn remove(&self, src: &dyn ParamSource, drop: &[usize]) -> Result<BTreeMap<String, Tensor>> {
        self.check_indices(drop)?;
        if drop.len() >= self.size {
            return Err(Error::EmptyGroup(self.label()));
        }
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for r in &self.rules {
            let cur = match out.remove(&r.key) {
                Some(t) => t,
                None => src.require(&r.key)?.clone(),
            };
            out.insert(r.key.clone(), cur.remove(r.axis, drop)?);
        }
        Ok(out)
    }

    /// Replacement tensors with channels `zero` set to zero in place.
    pub fn zero(&self, src: &dyn ParamSource, zero: &[usize]) -> Result<BTreeMap<String, Tensor>> {
        self.check_indices(zero)?;
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for r in &self.rules {
            let t = out
                .entry(r.key.clone())
                .or_insert_with(|| src.param(&r.key).cloned().unwrap_or_else(|| Tensor::scalar(0.0)));
            if t.ndim() == 0 {
                return Err(Error::MissingParam(r.key.clone()));
            }
            for &j in zero {
                t.zero_slice(r.axis, j);
            }
        }
        Ok(out)
    }

    /// `spec` after removing `n` channels from this group.
    pub fn shrink_spec(&self, spec: &ArchSpec, n: usize) -> Result<ArchSpec> {
        let mut out = spec.clone();
        let missing = || Error::InvalidPrune(format!("group {} not in spec", self.label()));
        match (self.component, self.scope) {
            (1, Scope::Network) => out.stages[0].embed_dim -= n,
            (1, Scope::Stage(s)) => out.stages.get_mut(s).ok_or_else(missing)?.embed_dim -= n,
            (2, Scope::Block(id)) => {
                let a = out.block_mut(id).and_then(|b| b.attn.as_mut()).ok_or_else(missing)?;
                a.dim -= n;
            }
            (3, Scope::Block(id)) => {
                let f = out.block_mut(id).and_then(|b| b.ffn.as_mut()).ok_or_else(missing)?;
                f.hidden_dim -= n;
            }
            (4, Scope::Block(id)) => {
                let sr = out
                    .block_mut(id)
                    .and_then(|b| b.attn.as_mut())
                    .and_then(|a| a.sr.as_mut())
                    .ok_or_else(missing)?;
                sr.dim -= n;
            }
            _ => return Err(missing()),
        }
        Ok(out)
    }
}

fn rule(key: impl Into<String>, axis: usize) -> SliceRule {
    SliceRule {
        key: key.into(),
        axis,
    }
}

fn norm_rules(rules: &mut Vec<SliceRule>, prefix: &str) {
    rules.push(rule(format!("{prefix}.weight"), 0));
    rules.push(rule(format!("{prefix}.bias"), 0));
}

/// Every prunable channel group of `spec`: shortcut-chain groups first, then
/// per block the attention, FFN and spatial-reduction groups.
pub fn component_map(spec: &ArchSpec) -> ComponentMap {
    let mut groups = Vec::new();
    let n_stages = spec.stages.len();
    for s in 0..n_stages {
        let st = &spec.stages[s];
        let sp = spec.stage_prefix(s);
        let mut rules = Vec::new();
        match spec.variant {
            Variant::Vanilla => {
                rules.push(rule("patch_embed.weight", 0));
                rules.push(rule("patch_embed.bias", 0));
                rules.push(rule("cls_token", 1));
                rules.push(rule("pos_embed", 1));
            }
            Variant::Staged => {
                rules.push(rule(format!("{sp}patch_embed.proj.weight"), 0));
                rules.push(rule(format!("{sp}patch_embed.proj.bias"), 0));
                norm_rules(&mut rules, &format!("{sp}patch_embed.norm"));
            }
        }
        for (k, b) in st.blocks.iter().enumerate() {
            let pre = spec.block_prefix(BlockId::new(s, k));
            if let Some(a) = &b.attn {
                norm_rules(&mut rules, &format!("{pre}.norm1"));
                rules.push(rule(format!("{pre}.attn.q.weight"), 1));
                if a.sr.is_some() {
                    rules.push(rule(format!("{pre}.attn.sr.weight"), 1));
                } else {
                    rules.push(rule(format!("{pre}.attn.k.weight"), 1));
                    rules.push(rule(format!("{pre}.attn.v.weight"), 1));
                }
                rules.push(rule(format!("{pre}.attn.proj.weight"), 0));
                rules.push(rule(format!("{pre}.attn.proj.bias"), 0));
            }
            if b.ffn.is_some() {
                norm_rules(&mut rules, &format!("{pre}.norm2"));
                rules.push(rule(format!("{pre}.mlp.fc1.weight"), 1));
                rules.push(rule(format!("{pre}.mlp.fc2.weight"), 0));
                rules.push(rule(format!("{pre}.mlp.fc2.bias"), 0));
            }
        }
        match spec.variant {
            Variant::Vanilla => {
                norm_rules(&mut rules, "norm");
                rules.push(rule("head.weight", 1));
            }
            Variant::Staged => {
                norm_rules(&mut rules, &format!("{sp}norm"));
                if s + 1 < n_stages {
                    rules.push(rule(format!("{}patch_embed.proj.weight", spec.stage_prefix(s + 1)), 1));
                } else {
                    rules.push(rule("head.weight", 1));
                }
            }
        }
        groups.push(ChannelGroup {
            component: 1,
            scope: match spec.variant {
                Variant::Vanilla => Scope::Network,
                Variant::Staged => Scope::Stage(s),
            },
            size: st.embed_dim,
            rules,
            mask_only: false,
        });
    }

    for id in spec.block_ids() {
        let b = spec.block(id).expect("listed block exists");
        let pre = spec.block_prefix(id);
        if let Some(a) = &b.attn {
            let mut rules = Vec::new();
            for n in ["q", "k", "v"] {
                rules.push(rule(format!("{pre}.attn.{n}.weight"), 0));
                rules.push(rule(format!("{pre}.attn.{n}.bias"), 0));
            }
            rules.push(rule(format!("{pre}.attn.proj.weight"), 1));
            groups.push(ChannelGroup {
                component: 2,
                scope: Scope::Block(id),
                size: a.dim,
                rules,
                mask_only: true,
            });
        }
        if let Some(f) = &b.ffn {
            let mut rules = vec![
                rule(format!("{pre}.mlp.fc1.weight"), 0),
                rule(format!("{pre}.mlp.fc1.bias"), 0),
            ];
            if spec.variant == Variant::Staged {
                rules.push(rule(format!("{pre}.mlp.dwconv.weight"), 0));
                rules.push(rule(format!("{pre}.mlp.dwconv.bias"), 0));
            }
            rules.push(rule(format!("{pre}.mlp.fc2.weight"), 1));
            groups.push(ChannelGroup {
                component: 3,
                scope: Scope::Block(id),
                size: f.hidden_dim,
                rules,
                mask_only: false,
            });
        }
        if let Some(sr) = b.attn.and_then(|a| a.sr) {
            let mut rules = vec![
                rule(format!("{pre}.attn.sr.weight"), 0),
                rule(format!("{pre}.attn.sr.bias"), 0),
            ];
            norm_rules(&mut rules, &format!("{pre}.attn.sr_norm"));
            rules.push(rule(format!("{pre}.attn.k.weight"), 1));
            rules.push(rule(format!("{pre}.attn.v.weight"), 1));
            groups.push(ChannelGroup {
                component: 4,
                scope: Scope::Block(id),
                size: sr.dim,
                rules,
                mask_only: false,
            });
        }
    }
    ComponentMap { groups }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::shape_table;

    #[test]
    fn deit_tiny_group_counts() {
        let m = component_map(&ArchSpec::deit_tiny());
        assert_eq!(m.groups.len(), 25);
        let sizes = |c| m.groups.iter().filter(|g| g.component == c).map(|g| g.size).collect::<Vec<_>>();
        assert_eq!(sizes(1), vec![192]);
        assert_eq!(sizes(2), vec![192; 12]);
        assert_eq!(sizes(3), vec![768; 12]);
    }

    #[test]
    fn staged_last_stage_has_no_sr_group() {
        let spec = ArchSpec::pvt_v2_b0(224, 1000);
        let m = component_map(&spec);
        assert_eq!(m.groups.iter().filter(|g| g.component == 1).count(), 4);
        assert!(m
            .groups
            .iter()
            .filter(|g| g.component == 4)
            .all(|g| matches!(g.scope, Scope::Block(id) if id.stage < 3)));
    }

    #[test]
    fn rule_keys_exist_and_axes_match_size() {
        for spec in [ArchSpec::vit(8, 4, 3, 5, 8, 2, 2, 2), ArchSpec::pvt_v2_b0(32, 4)] {
            let table: BTreeMap<_, _> = shape_table(&spec).into_iter().collect();
            for g in component_map(&spec).groups {
                for r in &g.rules {
                    let shape = &table[&r.key];
                    assert_eq!(shape[r.axis], g.size, "{} {}", g.label(), r.key);
                }
            }
        }
    }

    #[test]
    fn scope_round_trip() {
        for s in [Scope::Network, Scope::Stage(2), Scope::Block(BlockId::new(1, 3))] {
            assert_eq!(s.to_string().parse::<Scope>().unwrap(), s);
        }
        assert_eq!("block:4".parse::<Scope>().unwrap(), Scope::Block(BlockId::new(0, 4)));
    }
}
