//! Test helpers and independent oracles. Nothing here calls into the
//! library's surgery or scoring code; model rebuilds are done by hand.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitprune::model::{init_model_with_std, ArchSpec, Model, WeightStore};
use vitprune::{Result, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random tiny ViT with every tensor (LN parameters included) perturbed so
/// nothing sits at a symmetric point.
pub fn tiny_vit(seed: u64, dim: usize, heads: usize, depth: usize, mlp_ratio: usize) -> Model {
    let spec = ArchSpec::vit(8, 4, 2, 3, dim, depth, heads, mlp_ratio);
    let mut m = init_model_with_std(&spec, seed, 0.4).unwrap();
    jitter(&mut m, seed ^ 0xabcdef, 0.3);
    m
}

pub fn jitter(m: &mut Model, seed: u64, scale: f64) {
    let mut r = rng(seed);
    let names: Vec<String> = m.weights.names().cloned().collect();
    for n in names {
        for v in m.weights.get_mut(&n).unwrap().data_mut() {
            *v += scale * r.random_range(-1.0..1.0);
        }
    }
}

pub fn images(n: usize, spec: &ArchSpec, seed: u64) -> Tensor {
    rand_tensor(&[n, spec.in_channels, spec.image_size, spec.image_size], &mut rng(seed))
}

// ---------------------------------------------------------------------------
// Finite differences

/// Denominator floor for relative gradient errors. Some gradients are exactly
/// zero (key biases under softmax) and central differences return rounding noise.
pub const GRAD_FLOOR: f64 = 1e-3;

/// Largest relative error (‖analytic − numeric‖ / max‖·‖ per input) between
/// the tape gradient and central differences of `f` at `inputs`.
pub fn fd_check(inputs: &[Tensor], f: impl Fn(&mut Tape<'_>, &[Var]) -> Result<Var>) -> f64 {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param_owned(x.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param_owned(x.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i]);
        let mut num = vec![0.0; x.numel()];
        for j in 0..x.numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += h;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * h;
            let down = eval(&xs);
            num[j] = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic.data().iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(GRAD_FLOOR));
    }
    worst
}

/// Reduces a tensor-valued op to a scalar with fixed random weights so every
/// output element contributes a distinct gradient.
pub fn weighted_sum(tape: &mut Tape<'_>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(rand_tensor(&shape, &mut rng(seed)));
    let p = tape.mul(x, w)?;
    Ok(tape.sum_all(p))
}

// ---------------------------------------------------------------------------
// Hand-rolled tensor surgery

/// `t` without index `j` along `axis`.
pub fn drop_index(t: &Tensor, axis: usize, j: usize) -> Tensor {
    let s = t.shape();
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(t.numel() - outer * inner);
    for o in 0..outer {
        for a in 0..s[axis] {
            if a == j {
                continue;
            }
            let base = (o * s[axis] + a) * inner;
            data.extend_from_slice(&t.data()[base..base + inner]);
        }
    }
    let mut shape = s.to_vec();
    shape[axis] -= 1;
    Tensor::new(shape, data).unwrap()
}

/// `t` with index `j` along `axis` set to zero.
pub fn zero_index(t: &Tensor, axis: usize, j: usize) -> Tensor {
    let s = t.shape();
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let mut out = t.clone();
    for o in 0..outer {
        let base = (o * s[axis] + j) * inner;
        out.data_mut()[base..base + inner].iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

fn edit(w: &mut WeightStore, key: &str, f: impl Fn(&Tensor) -> Tensor) {
    let t = w.get(key).unwrap_or_else(|| panic!("missing {key}"));
    let n = f(t);
    w.insert(key, n);
}

/// Removes embedding channel `j` from a vanilla ViT by hand.
pub fn oracle_drop_embed(m: &Model, j: usize) -> Model {
    let mut w = m.weights.clone();
    let mut spec = m.spec.clone();
    spec.stages[0].embed_dim -= 1;
    edit(&mut w, "patch_embed.weight", |t| drop_index(t, 0, j));
    edit(&mut w, "patch_embed.bias", |t| drop_index(t, 0, j));
    edit(&mut w, "cls_token", |t| drop_index(t, 1, j));
    edit(&mut w, "pos_embed", |t| drop_index(t, 1, j));
    for k in 0..m.spec.num_blocks() {
        let p = format!("blocks.{k}");
        for (key, axis) in [
            ("norm1.weight", 0),
            ("norm1.bias", 0),
            ("attn.q.weight", 1),
            ("attn.k.weight", 1),
            ("attn.v.weight", 1),
            ("attn.proj.weight", 0),
            ("attn.proj.bias", 0),
            ("norm2.weight", 0),
            ("norm2.bias", 0),
            ("mlp.fc1.weight", 1),
            ("mlp.fc2.weight", 0),
            ("mlp.fc2.bias", 0),
        ] {
            edit(&mut w, &format!("{p}.{key}"), |t| drop_index(t, axis, j));
        }
    }
    edit(&mut w, "norm.weight", |t| drop_index(t, 0, j));
    edit(&mut w, "norm.bias", |t| drop_index(t, 0, j));
    edit(&mut w, "head.weight", |t| drop_index(t, 1, j));
    Model::new(spec, w)
}

/// Zeroes embedding channel `j` everywhere it is produced, without removing it.
pub fn oracle_zero_embed(m: &Model, j: usize) -> Model {
    let mut w = m.weights.clone();
    edit(&mut w, "patch_embed.weight", |t| zero_index(t, 0, j));
    edit(&mut w, "patch_embed.bias", |t| zero_index(t, 0, j));
    edit(&mut w, "cls_token", |t| zero_index(t, 1, j));
    edit(&mut w, "pos_embed", |t| zero_index(t, 1, j));
    for k in 0..m.spec.num_blocks() {
        let p = format!("blocks.{k}");
        edit(&mut w, &format!("{p}.attn.proj.weight"), |t| zero_index(t, 0, j));
        edit(&mut w, &format!("{p}.attn.proj.bias"), |t| zero_index(t, 0, j));
        edit(&mut w, &format!("{p}.mlp.fc2.weight"), |t| zero_index(t, 0, j));
        edit(&mut w, &format!("{p}.mlp.fc2.bias"), |t| zero_index(t, 0, j));
    }
    Model::new(m.spec.clone(), w)
}

/// Zeroes the Q, K and V outputs of attention channel `j` in block `k`.
pub fn oracle_zero_attn(m: &Model, k: usize, j: usize) -> Model {
    let mut w = m.weights.clone();
    for qkv in ["q", "k", "v"] {
        edit(&mut w, &format!("blocks.{k}.attn.{qkv}.weight"), |t| zero_index(t, 0, j));
        edit(&mut w, &format!("blocks.{k}.attn.{qkv}.bias"), |t| zero_index(t, 0, j));
    }
    Model::new(m.spec.clone(), w)
}

/// Removes hidden unit `j` of block `k`'s FFN.
pub fn oracle_drop_ffn(m: &Model, k: usize, j: usize) -> Model {
    let mut w = m.weights.clone();
    let mut spec = m.spec.clone();
    spec.stages[0].blocks[k].ffn.as_mut().unwrap().hidden_dim -= 1;
    edit(&mut w, &format!("blocks.{k}.mlp.fc1.weight"), |t| drop_index(t, 0, j));
    edit(&mut w, &format!("blocks.{k}.mlp.fc1.bias"), |t| drop_index(t, 0, j));
    edit(&mut w, &format!("blocks.{k}.mlp.fc2.weight"), |t| drop_index(t, 1, j));
    Model::new(spec, w)
}

/// Zeroes hidden unit `j` of block `k`'s FFN without removing it.
pub fn oracle_zero_ffn(m: &Model, k: usize, j: usize) -> Model {
    let mut w = m.weights.clone();
    edit(&mut w, &format!("blocks.{k}.mlp.fc1.weight"), |t| zero_index(t, 0, j));
    edit(&mut w, &format!("blocks.{k}.mlp.fc1.bias"), |t| zero_index(t, 0, j));
    Model::new(m.spec.clone(), w)
}

const ATTN_KEYS: &[&str] = &[
    "norm1.weight",
    "norm1.bias",
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.k.bias",
    "attn.v.weight",
    "attn.v.bias",
    "attn.proj.weight",
    "attn.proj.bias",
];
const FFN_KEYS: &[&str] = &[
    "norm2.weight",
    "norm2.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

/// Builds a vanilla model whose blocks are `(attention source, FFN source)`
/// pairs taken from `m`, renumbered from zero.
pub fn oracle_rebuild_blocks(m: &Model, pairs: &[(usize, usize)]) -> Model {
    let mut spec = m.spec.clone();
    let old = m.spec.stages[0].blocks.clone();
    spec.stages[0].blocks = pairs
        .iter()
        .map(|&(a, f)| {
            let mut b = old[a];
            b.ffn = old[f].ffn;
            b
        })
        .collect();
    let mut w = WeightStore::new();
    for (name, t) in m.weights.iter() {
        if !name.starts_with("blocks.") {
            w.insert(name.clone(), t.clone());
        }
    }
    for (new, &(a, f)) in pairs.iter().enumerate() {
        for key in ATTN_KEYS {
            w.insert(format!("blocks.{new}.{key}"), m.weights.get(&format!("blocks.{a}.{key}")).unwrap().clone());
        }
        for key in FFN_KEYS {
            w.insert(format!("blocks.{new}.{key}"), m.weights.get(&format!("blocks.{f}.{key}")).unwrap().clone());
        }
    }
    Model::new(spec, w)
}

pub fn oracle_drop_block(m: &Model, k: usize) -> Model {
    let pairs: Vec<_> = (0..m.spec.num_blocks()).filter(|&b| b != k).map(|b| (b, b)).collect();
    oracle_rebuild_blocks(m, &pairs)
}

pub fn oracle_drop_hybrid(m: &Model, k: usize) -> Model {
    let l = m.spec.num_blocks();
    let mut pairs = Vec::new();
    let mut b = 0;
    while b < l {
        if b == k {
            pairs.push((k, k + 1));
            b += 2;
        } else {
            pairs.push((b, b));
            b += 1;
        }
    }
    oracle_rebuild_blocks(m, &pairs)
}

// ---------------------------------------------------------------------------
// KL oracle

fn log_probs(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    row.iter().map(|v| v - m - z.ln()).collect()
}

/// Σ over samples (in order) of KL(softmax(reference) ‖ softmax(perturbed)).
pub fn oracle_kl_sum(reference: &Tensor, perturbed: &Tensor) -> f64 {
    let k = reference.last_dim();
    let mut total = 0.0;
    for (a, b) in reference.data().chunks(k).zip(perturbed.data().chunks(k)) {
        let (lq, lp) = (log_probs(a), log_probs(b));
        let kl: f64 = lq.iter().zip(&lp).map(|(q, p)| q.exp() * (q - p)).sum();
        total += kl.max(0.0);
    }
    total
}

pub fn logits(m: &Model, x: &Tensor) -> Tensor {
    m.forward(x).unwrap().logits
}

/// Logits of a vanilla ViT with every block gone: nothing mixes tokens, so
/// each sample reads head(LN(cls + pos[0])).
pub fn oracle_no_block_logits(m: &Model, n: usize) -> Tensor {
    let w = |k: &str| m.weights.get(k).unwrap().data().to_vec();
    let (cls, pos, g, b) = (w("cls_token"), w("pos_embed"), w("norm.weight"), w("norm.bias"));
    let d = cls.len();
    let t: Vec<f64> = (0..d).map(|i| cls[i] + pos[i]).collect();
    let mean = t.iter().sum::<f64>() / d as f64;
    let var = t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let y: Vec<f64> = (0..d)
        .map(|i| (t[i] - mean) / (var + m.spec.ln_eps).sqrt() * g[i] + b[i])
        .collect();
    let (hw, hb) = (w("head.weight"), w("head.bias"));
    let row: Vec<f64> = (0..hb.len())
        .map(|c| hb[c] + (0..d).map(|i| hw[c * d + i] * y[i]).sum::<f64>())
        .collect();
    let k = row.len();
    Tensor::new(vec![n, k], row.repeat(n)).unwrap()
}

// ---------------------------------------------------------------------------
// Head-strategy oracle

/// Surviving channel set for each strategy, found by enumerating every
/// subset of size `d_t` that respects the strategy's per-head counts and
/// keeping the one with the largest total score.
pub fn enumerate_survivors(scores: &[f64], h_b: usize, d_t: usize, h_t: usize, strategy: u8) -> Vec<usize> {
    let d_b = scores.len();
    let runs = match strategy {
        1 => h_t,
        3 => h_b,
        _ => 1,
    };
    let len = d_b / runs;
    let per = d_t / runs;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << d_b) {
        if mask.count_ones() as usize != d_t {
            continue;
        }
        let ok = (0..runs).all(|r| ((r * len)..((r + 1) * len)).filter(|&i| mask >> i & 1 == 1).count() == per);
        if !ok {
            continue;
        }
        let keep: Vec<usize> = (0..d_b).filter(|&i| mask >> i & 1 == 1).collect();
        let total: f64 = keep.iter().map(|&i| scores[i]).sum();
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            best = Some((total, keep));
        }
    }
    best.unwrap().1
}
