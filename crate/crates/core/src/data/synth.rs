use rand::Rng;
use rand_distr::StandardNormal;

use super::dataset::{rng_for, Dataset, Split};
use crate::distill::argmax_rows;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthShape {
    pub channels: usize,
    pub size: usize,
}

/// Standard-normal images; labels uniform at random or the teacher's argmax.
pub fn synth_dataset(
    n: usize,
    shape: SynthShape,
    num_classes: usize,
    seed: u64,
    teacher: Option<&Model>,
    split: Split,
) -> Result<Dataset> {
    if n == 0 || num_classes == 0 {
        return Err(Error::Dataset("synthetic dataset needs n ≥ 1 and at least one class".into()));
    }
    let mut rng = rng_for(seed, 0);
    let per = shape.channels * shape.size * shape.size;
    let data: Vec<f64> = (0..n * per).map(|_| rng.sample(StandardNormal)).collect();
    let images = Tensor::new(vec![n, shape.channels, shape.size, shape.size], data)?;
    let labels = match teacher {
        Some(t) => {
            if t.spec.num_classes != num_classes {
                return Err(Error::ClassCount {
                    student: num_classes,
                    teacher: t.spec.num_classes,
                });
            }
            argmax_rows(&t.logits(&images, 64)?)
        }
        None => (0..n).map(|_| rng.random_range(0..num_classes)).collect(),
    };
    Dataset::new(images, labels, num_classes, split)
}

/// Shifts the classifier bias so every class has the same mean logit over
/// `images`, which balances the argmax labels of a randomly initialized labeler.
pub fn center_classifier_bias(model: &mut Model, images: &Tensor) -> Result<()> {
    let logits = model.logits(images, 64)?;
    let k = logits.last_dim();
    let n = logits.shape()[0] as f64;
    let mut mean = vec![0.0; k];
    for row in logits.data().chunks(k) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let bias = model.weights.get_mut("head.bias").ok_or_else(|| Error::MissingParam("head.bias".into()))?;
    for (b, m) in bias.data_mut().iter_mut().zip(&mean) {
        *b -= m;
    }
    Ok(())
}
