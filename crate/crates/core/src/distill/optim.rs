use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with decoupled weight decay. Moment buffers are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient. Nothing is modified
    /// if any gradient is non-finite.
    pub fn step<'p>(
        &mut self,
        params: impl IntoIterator<Item = (&'p str, &'p mut Tensor)>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params {
            let Some(g) = grads.get(name) else { continue };
            let n = p.numel();
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let decay = 1.0 - lr * self.weight_decay;
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *x *= decay;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::from_vec(vec![v]))])
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = Tensor::from_vec(vec![1.5]);
        let mut opt = AdamW::new(0.0);
        opt.step([("w", &mut p)], &one("w", 0.0), 0.1).unwrap();
        assert_eq!(p.data(), &[1.5]);
    }

    #[test]
    fn zero_grad_decays_multiplicatively() {
        let mut p = Tensor::from_vec(vec![2.0]);
        let mut opt = AdamW::new(0.5);
        opt.step([("w", &mut p)], &one("w", 0.0), 0.1).unwrap();
        assert_eq!(p.data(), &[2.0 * (1.0 - 0.1 * 0.5)]);
    }

    #[test]
    fn non_finite_gradient_halts() {
        let mut p = Tensor::from_vec(vec![2.0]);
        let mut opt = AdamW::new(0.0);
        let e = opt.step([("w", &mut p)], &one("w", f64::NAN), 0.1).unwrap_err();
        assert!(matches!(e, Error::NonFiniteGradient(n) if n == "w"));
        assert_eq!(p.data(), &[2.0]);
        assert_eq!(opt.step, 0);
    }
}
