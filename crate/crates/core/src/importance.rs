//! KL-divergence importance scores for channels and block candidates.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{
    build_forward, component_map, ArchSpec, BlockId, ChannelGroup, ForwardOptions, Model, Overlay, ParamSource,
    Scope, StartPoint,
};
use crate::tape::Tape;
use crate::tensor::{kernels, Precision, Tensor};

pub const DEFAULT_PROXY_SIZE: usize = 200;
pub const DEFAULT_CHUNK: usize = 32;

/// Images drawn without replacement from a training split.
#[derive(Debug, Clone)]
pub struct ProxySet {
    /// `[n,C,H,W]`, in sampled order.
    pub images: Tensor,
    /// Source dataset index of each image.
    pub indices: Vec<usize>,
    pub seed: u64,
    pub source: String,
}

impl ProxySet {
    /// Uniform sample of `n` of the leading-axis entries of `pool`.
    pub fn sample(pool: &Tensor, n: usize, seed: u64, source: impl Into<String>) -> Result<Self> {
        let total = pool.shape()[0];
        if n == 0 || n > total {
            return Err(Error::Dataset(format!(
                "proxy size {n} must be between 1 and the dataset size {total}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let indices = rand::seq::index::sample(&mut rng, total, n).into_vec();
        Ok(ProxySet {
            images: pool.gather_rows(&indices),
            indices,
            seed,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// A block-level removal candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockCandidate {
    /// The whole block.
    Whole(BlockId),
    /// FFN half of this block plus the attention half of the next one.
    Hybrid(BlockId),
}

impl BlockCandidate {
    pub fn block(&self) -> BlockId {
        match self {
            BlockCandidate::Whole(b) | BlockCandidate::Hybrid(b) => *b,
        }
    }

    /// `spec` with the candidate's halves switched off (no canonicalization).
    pub fn apply_flags(&self, spec: &ArchSpec) -> Result<ArchSpec> {
        let mut out = spec.clone();
        let len = spec.num_blocks();
        let oob = |id: BlockId| Error::BlockIndex { index: id.index, len };
        match *self {
            BlockCandidate::Whole(id) => {
                let b = out.block_mut(id).ok_or_else(|| oob(id))?;
                b.attn = None;
                b.ffn = None;
            }
            BlockCandidate::Hybrid(id) => {
                let next = BlockId::new(id.stage, id.index + 1);
                if spec.block(next).is_none() {
                    return Err(oob(next));
                }
                out.block_mut(id).ok_or_else(|| oob(id))?.ffn = None;
                out.block_mut(next).ok_or_else(|| oob(next))?.attn = None;
            }
        }
        Ok(out)
    }
}

impl fmt::Display for BlockCandidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockCandidate::Whole(b) => write!(f, "block:{b}"),
            BlockCandidate::Hybrid(b) => write!(f, "hybrid:{b}"),
        }
    }
}

impl FromStr for BlockCandidate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad block candidate `{s}`"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let id = parse_block_id(rest).ok_or_else(bad)?;
        match kind {
            "block" => Ok(BlockCandidate::Whole(id)),
            "hybrid" => Ok(BlockCandidate::Hybrid(id)),
            _ => Err(bad()),
        }
    }
}

/// `K` (stage 0) or `S:K`.
pub fn parse_block_id(s: &str) -> Option<BlockId> {
    match s.split_once(':') {
        Some((st, k)) => Some(BlockId::new(st.parse().ok()?, k.parse().ok()?)),
        None => Some(BlockId::new(0, s.parse().ok()?)),
    }
}

macro_rules! string_serde {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(Scope);
string_serde!(BlockCandidate);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub component: u8,
    pub scope: Scope,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockScore {
    pub candidate: BlockCandidate,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub model_fingerprint: String,
    pub proxy_seed: u64,
    pub proxy_size: usize,
    pub channels: Vec<GroupScores>,
    pub blocks: Vec<BlockScore>,
}

impl ImportanceTable {
    pub fn group(&self, component: u8, scope: Scope) -> Option<&[f64]> {
        self.channels
            .iter()
            .find(|g| g.component == component && g.scope == scope)
            .map(|g| g.scores.as_slice())
    }

    pub fn ensure_matches(&self, model: &Model) -> Result<()> {
        let fp = model.fingerprint();
        if fp != self.model_fingerprint {
            return Err(Error::StaleTable {
                table: self.model_fingerprint.clone(),
                model: fp,
            });
        }
        Ok(())
    }

    /// Every score, channels first, in table order.
    pub fn all_scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.channels
            .iter()
            .flat_map(|g| g.scores.iter().copied())
            .chain(self.blocks.iter().map(|b| b.score))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScoreOptions {
    /// Reuse activations entering each block for per-block perturbations.
    pub cache: bool,
    /// Samples per forward pass.
    pub chunk: usize,
    pub precision: Precision,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions {
            cache: true,
            chunk: DEFAULT_CHUNK,
            precision: Precision::F64,
        }
    }
}

/// Row-wise KL(q‖p) from log-probabilities.
pub fn kl_rows(logq: &Tensor, logp: &Tensor) -> Vec<f64> {
    let k = logq.last_dim();
    logq.data()
        .chunks(k)
        .zip(logp.data().chunks(k))
        .map(|(lq, lp)| {
            // Rounding can leave a near-zero divergence a hair below zero.
            let kl: f64 = lq.iter().zip(lp).map(|(&a, &b)| a.exp() * (a - b)).sum();
            kl.max(0.0)
        })
        .collect()
}

fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let mut t = logits.clone();
    let k = t.last_dim();
    for row in t.data_mut().chunks_mut(k) {
        kernels::log_softmax_inplace(row);
    }
    t
}

/// A perturbed view of the model: which spec and parameters to run, and from where.
struct Perturbation<'p> {
    spec: ArchSpec,
    src: &'p dyn ParamSource,
    opts: ForwardOptions,
    start: Option<BlockId>,
}

/// Reference outputs and cached activations for one (model, proxy) pair.
pub struct Scorer<'m> {
    model: &'m Model,
    proxy: &'m ProxySet,
    opts: ScoreOptions,
    chunks: Vec<Tensor>,
    ref_logp: Vec<Tensor>,
    cache: BTreeMap<BlockId, Vec<Tensor>>,
    /// Proxy positions in ascending dataset-index order.
    order: Vec<usize>,
}

impl<'m> Scorer<'m> {
    pub fn new(model: &'m Model, proxy: &'m ProxySet, opts: ScoreOptions) -> Result<Self> {
        let n = proxy.len();
        let step = opts.chunk.max(1);
        let chunks: Vec<Tensor> = (0..n)
            .step_by(step)
            .map(|s| proxy.images.slice_rows(s, (s + step).min(n)))
            .collect();
        let mut ref_logp = Vec::with_capacity(chunks.len());
        let mut cache: BTreeMap<BlockId, Vec<Tensor>> = BTreeMap::new();
        for (ci, images) in chunks.iter().enumerate() {
            let mut tape = Tape::with_precision(opts.precision);
            let img = tape.constant_ref(images);
            let out = build_forward(
                &mut tape,
                &model.spec,
                &model.weights,
                StartPoint::Image(img),
                &ForwardOptions::default(),
                false,
            )?;
            let logits = tape.value(out.logits);
            check_finite(logits, proxy, ci * step)?;
            ref_logp.push(log_softmax_rows(logits));
            if opts.cache {
                for (id, v) in out.block_inputs {
                    cache.entry(id).or_default().push(tape.value(v).clone());
                }
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| proxy.indices[i]);
        Ok(Scorer {
            model,
            proxy,
            opts,
            chunks,
            ref_logp,
            cache,
            order,
        })
    }

    fn evaluate(&self, p: &Perturbation<'_>) -> Result<f64> {
        let step = self.opts.chunk.max(1);
        let mut per_sample = Vec::with_capacity(self.proxy.len());
        for (ci, images) in self.chunks.iter().enumerate() {
            let mut tape = Tape::with_precision(self.opts.precision);
            let start = match (p.start, self.opts.cache) {
                (Some(id), true) => {
                    let tokens = tape.constant_ref(&self.cache[&id][ci]);
                    StartPoint::Block { id, tokens }
                }
                _ => StartPoint::Image(tape.constant_ref(images)),
            };
            let out = build_forward(&mut tape, &p.spec, p.src, start, &p.opts, false)?;
            let logits = tape.value(out.logits);
            check_finite(logits, self.proxy, ci * step)?;
            per_sample.extend(kl_rows(&self.ref_logp[ci], &log_softmax_rows(logits)));
        }
        Ok(self.order.iter().map(|&i| per_sample[i]).sum())
    }

    /// Score of channel `j` in `group`.
    pub fn channel(&self, group: &ChannelGroup, j: usize) -> Result<f64> {
        if j >= group.size {
            return Err(Error::ChannelIndex {
                group: group.label(),
                index: j,
                size: group.size,
            });
        }
        let start = match group.scope {
            Scope::Block(id) => Some(id),
            _ => None,
        };
        let base: &dyn ParamSource = &self.model.weights;
        if group.mask_only {
            let Scope::Block(id) = group.scope else {
                return Err(Error::InvalidPrune(format!("mask-only group {} is not per-block", group.label())));
            };
            let mut mask = vec![1.0; group.size];
            mask[j] = 0.0;
            let mut opts = ForwardOptions::default();
            opts.head_masks.insert(id, mask);
            return self.evaluate(&Perturbation {
                spec: self.model.spec.clone(),
                src: base,
                opts,
                start,
            });
        }
        let mut overlay = Overlay::new(base);
        overlay.overrides = group.remove(base, &[j])?;
        self.evaluate(&Perturbation {
            spec: group.shrink_spec(&self.model.spec, 1)?,
            src: &overlay,
            opts: ForwardOptions::default(),
            start,
        })
    }

    pub fn block_candidate(&self, cand: BlockCandidate) -> Result<f64> {
        self.evaluate(&Perturbation {
            spec: cand.apply_flags(&self.model.spec)?,
            src: &self.model.weights,
            opts: ForwardOptions::default(),
            start: Some(cand.block()),
        })
    }

    pub fn all_channels(&self) -> Result<Vec<GroupScores>> {
        let map = component_map(&self.model.spec);
        let tasks: Vec<(usize, usize)> = map
            .groups
            .iter()
            .enumerate()
            .flat_map(|(g, grp)| (0..grp.size).map(move |j| (g, j)))
            .collect();
        let scores: Vec<f64> = tasks
            .par_iter()
            .map(|&(g, j)| self.channel(&map.groups[g], j))
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(map.groups.len());
        let mut it = scores.into_iter();
        for grp in &map.groups {
            out.push(GroupScores {
                component: grp.component,
                scope: grp.scope,
                scores: it.by_ref().take(grp.size).collect(),
            });
        }
        Ok(out)
    }

    pub fn all_blocks(&self) -> Result<Vec<BlockScore>> {
        block_candidates(&self.model.spec)
            .into_par_iter()
            .map(|candidate| {
                Ok(BlockScore {
                    candidate,
                    score: self.block_candidate(candidate)?,
                })
            })
            .collect()
    }
}

/// The whole-block candidates followed by hybrids between neighbours in a stage.
pub fn block_candidates(spec: &ArchSpec) -> Vec<BlockCandidate> {
    let ids = spec.block_ids();
    let mut out: Vec<BlockCandidate> = ids.iter().map(|&id| BlockCandidate::Whole(id)).collect();
    for &id in &ids {
        let next = BlockId::new(id.stage, id.index + 1);
        let has_ffn = spec.block(id).is_some_and(|b| b.ffn.is_some());
        let next_attn = spec.block(next).is_some_and(|b| b.attn.is_some());
        if has_ffn && next_attn {
            out.push(BlockCandidate::Hybrid(id));
        }
    }
    out
}

fn check_finite(logits: &Tensor, proxy: &ProxySet, offset: usize) -> Result<()> {
    let k = logits.last_dim();
    match logits.data().chunks(k).position(|r| r.iter().any(|v| !v.is_finite())) {
        Some(row) => Err(Error::NonFiniteLogits {
            sample: proxy.indices[offset + row],
        }),
        None => Ok(()),
    }
}

/// Channel and block scores for `model` on `proxy`.
pub fn score_model(model: &Model, proxy: &ProxySet, opts: ScoreOptions) -> Result<ImportanceTable> {
    let scorer = Scorer::new(model, proxy, opts)?;
    Ok(ImportanceTable {
        model_fingerprint: model.fingerprint(),
        proxy_seed: proxy.seed,
        proxy_size: proxy.len(),
        channels: scorer.all_channels()?,
        blocks: scorer.all_blocks()?,
    })
}

/// Block candidate scores only (the channel part left empty).
pub fn score_blocks(model: &Model, proxy: &ProxySet, opts: ScoreOptions) -> Result<ImportanceTable> {
    let scorer = Scorer::new(model, proxy, opts)?;
    Ok(ImportanceTable {
        model_fingerprint: model.fingerprint(),
        proxy_seed: proxy.seed,
        proxy_size: proxy.len(),
        channels: Vec::new(),
        blocks: scorer.all_blocks()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    #[test]
    fn proxy_is_distinct_and_deterministic() {
        let pool = Tensor::zeros(&[5000, 1]);
        let a = ProxySet::sample(&pool, 200, 9, "t").unwrap();
        let b = ProxySet::sample(&pool, 200, 9, "t").unwrap();
        assert_eq!(a.indices, b.indices);
        let mut s = a.indices.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 200);
        assert!(ProxySet::sample(&pool, 5001, 9, "t").is_err());
    }

    #[test]
    fn candidate_count_is_two_l_minus_one() {
        for l in 1..6 {
            let spec = ArchSpec::vit(8, 4, 1, 2, 4, l, 1, 1);
            assert_eq!(block_candidates(&spec).len(), 2 * l - 1);
        }
    }

    #[test]
    fn kl_of_identical_rows_is_zero() {
        let l = log_softmax_rows(&Tensor::from_rows(&[&[0.3, -1.0, 2.0]]));
        assert_eq!(kl_rows(&l, &l), vec![0.0]);
    }

    #[test]
    fn small_table_shape_and_sign() {
        let spec = ArchSpec::vit(8, 4, 2, 3, 8, 2, 2, 2);
        let model = init_model(&spec, 1).unwrap();
        let pool = Tensor::new(vec![6, 2, 8, 8], (0..768).map(|i| ((i * 37) % 11) as f64 / 5.0 - 1.0).collect()).unwrap();
        let proxy = ProxySet::sample(&pool, 4, 2, "t").unwrap();
        let t = score_model(&model, &proxy, ScoreOptions::default()).unwrap();
        assert_eq!(t.channels.iter().map(|g| g.scores.len()).sum::<usize>(), 8 + 2 * 8 + 2 * 16);
        assert_eq!(t.blocks.len(), 3);
        assert!(t.all_scores().all(|s| s >= 0.0));
    }
}
