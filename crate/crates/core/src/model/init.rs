use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{shape_table, ArchSpec, Model, WeightStore};
use crate::error::Result;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

pub fn init_model(spec: &ArchSpec, seed: u64) -> Result<Model> {
    init_model_with_std(spec, seed, INIT_STD)
}

/// Truncated normal (cut at ±2σ) for weights and embeddings, zero biases,
/// unit LN scales.
pub fn init_model_with_std(spec: &ArchSpec, seed: u64, std: f64) -> Result<Model> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = WeightStore::new();
    for (name, shape) in shape_table(spec) {
        let t = if is_norm(&name) && name.ends_with(".weight") {
            Tensor::ones(&shape)
        } else if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| truncated_normal(&mut rng) * std).collect();
            Tensor::new(shape, data)?
        };
        weights.insert(name, t);
    }
    Ok(Model::new(spec.clone(), weights))
}

fn is_norm(name: &str) -> bool {
    name.split('.').any(|part| part.starts_with("norm") || part == "sr_norm")
}

fn truncated_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = ArchSpec::vit(8, 4, 3, 4, 8, 2, 2, 2);
        let a = init_model(&spec, 7).unwrap();
        let b = init_model(&spec, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_model(&spec, 8).unwrap());
    }

    #[test]
    fn norms_and_biases() {
        let spec = ArchSpec::vit(8, 4, 3, 4, 8, 1, 2, 2);
        let m = init_model(&spec, 1).unwrap();
        assert_eq!(m.weights.get("blocks.0.norm1.weight").unwrap(), &Tensor::ones(&[8]));
        assert_eq!(m.weights.get("head.bias").unwrap(), &Tensor::zeros(&[4]));
        let w = m.weights.get("blocks.0.attn.q.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04));
    }
}
