//! Synthetic desk-scale dataset: per-class Gaussian blobs rendered as
//! images, separable by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TEMPLATE_MAGNITUDE: f64 = 1.2;
const NOISE_SIGMA: f64 = 0.8;

/// Builds a balanced dataset of `classes * per_class` images with shape
/// [C, H, W]. Each class has a fixed random sign template; samples are the
/// template plus Gaussian noise, squashed by tanh into (-1, 1). Fully
/// determined by `seed`.
pub fn make_synthetic_dataset(
    classes: usize,
    per_class: usize,
    shape: [usize; 3],
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument(
            "synthetic dataset needs at least two classes".into(),
        ));
    }
    if per_class == 0 || shape.contains(&0) {
        return Err(Error::InvalidArgument(
            "per_class and all image dims must be positive".into(),
        ));
    }
    let dim: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    if rng.gen_bool(0.5) {
                        TEMPLATE_MAGNITUDE
                    } else {
                        -TEMPLATE_MAGNITUDE
                    }
                })
                .collect()
        })
        .collect();

    let n = classes * per_class;
    let mut values = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (class, template) in templates.iter().enumerate() {
        for _ in 0..per_class {
            for &t in template {
                let noise: f64 = rng.sample(StandardNormal);
                values.push((t + NOISE_SIGMA * noise).tanh());
            }
            labels.push(class);
        }
    }
    let images = Tensor::from_values(&[n, shape[0], shape[1], shape[2]], values)?;
    LabeledDataset::new(images, labels, classes)
}

/// Structureless uniform noise in (-1, 1) with all-zero labels; a
/// deliberately mismatched stand-in for a public distillation set.
pub fn make_noise_dataset(samples: usize, shape: [usize; 3], seed: u64) -> Result<LabeledDataset> {
    if samples == 0 || shape.contains(&0) {
        return Err(Error::InvalidArgument(
            "samples and all image dims must be positive".into(),
        ));
    }
    let dim: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..samples * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let images = Tensor::from_values(&[samples, shape[0], shape[1], shape[2]], values)?;
    LabeledDataset::new(images, vec![0; samples], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::cross_entropy_with_grad;
    use crate::nn::optim::Optimizer;
    use crate::nn::{LayerSpec, NeuralNet};

    #[test]
    fn noise_dataset_shape_and_range() {
        let ds = make_noise_dataset(7, [2, 3, 3], 4).unwrap();
        assert_eq!(ds.len(), 7);
        assert_eq!(ds.image_shape(), &[2, 3, 3]);
        assert!(ds.images().values().iter().all(|v| (-1.0..1.0).contains(v)));
        let again = make_noise_dataset(7, [2, 3, 3], 4).unwrap();
        assert_eq!(ds.images().values(), again.images().values());
    }

    #[test]
    fn balanced_and_deterministic() {
        let a = make_synthetic_dataset(10, 100, [1, 8, 8], 3).unwrap();
        assert_eq!(a.len(), 1000);
        assert_eq!(a.class_histogram(), vec![100; 10]);
        let b = make_synthetic_dataset(10, 100, [1, 8, 8], 3).unwrap();
        assert_eq!(a.images().values(), b.images().values());
        let c = make_synthetic_dataset(10, 100, [1, 8, 8], 4).unwrap();
        assert_ne!(a.images().values(), c.images().values());
        assert!(a.images().values().iter().all(|v| v.abs() < 1.0));
    }

    /// The separability fixture: a linear classifier fits the training set.
    #[test]
    fn linear_classifier_reaches_95_percent() {
        let ds = make_synthetic_dataset(6, 50, [1, 6, 6], 11).unwrap();
        let dim = 36;
        let mut net = NeuralNet::new(
            vec![1, 6, 6],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { input: dim, output: 6 },
            ],
        )
        .unwrap();
        net.glorot_init(1);
        let mut opt = Optimizer::sgd(0.1, 0.0, net.param_count());
        let batch = 50;
        let order: Vec<usize> = (0..ds.len()).collect();
        for _epoch in 0..50 {
            for chunk in order.chunks(batch) {
                let (x, y) = ds.gather(chunk).unwrap();
                let trace = net.forward_train(&x).unwrap();
                let (_, dy) = cross_entropy_with_grad(trace.output(), &y).unwrap();
                let grads = net.backward(&trace, &dy).unwrap();
                opt.step(net.params_mut(), &grads.params).unwrap();
            }
        }
        let logits = net.forward(ds.images()).unwrap();
        let mut correct = 0;
        for (b, &label) in ds.labels().iter().enumerate() {
            if crate::loss::argmax(logits.row(b)) == label {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc > 0.95, "train accuracy {acc}");
    }
}
