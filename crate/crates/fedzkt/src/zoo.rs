//! Model catalog: five heterogeneous desk-scale classifier architectures
//! and the DCGAN-style generator.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, NeuralNet, Padding};
use crate::tensor::Tensor;

fn conv_same(in_channels: usize, out_channels: usize, kernel: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels,
        out_channels,
        kernel,
        stride: 1,
        padding: Padding::Same,
    }
}

fn pool2() -> LayerSpec {
    LayerSpec::MaxPool2d { kernel: 2, stride: 2 }
}

/// One catalog architecture: a named builder from image shape and class
/// count to a layer stack.
pub struct ModelCatalogEntry {
    pub name: &'static str,
    builder: fn(&[usize; 3], usize) -> Vec<LayerSpec>,
}

impl ModelCatalogEntry {
    /// Builds and Glorot-initializes the network.
    pub fn build(&self, image_shape: &[usize; 3], classes: usize, seed: u64) -> Result<NeuralNet> {
        let layers = (self.builder)(image_shape, classes);
        let mut net = NeuralNet::new(image_shape.to_vec(), layers)?;
        net.glorot_init(seed);
        Ok(net)
    }

    /// Nominal parameter count for a given dataset geometry.
    pub fn param_count(&self, image_shape: &[usize; 3], classes: usize) -> Result<usize> {
        Ok(self.build(image_shape, classes, 0)?.param_count())
    }
}

fn mlp_small(shape: &[usize; 3], classes: usize) -> Vec<LayerSpec> {
    let dim = shape[0] * shape[1] * shape[2];
    vec![
        LayerSpec::Flatten,
        LayerSpec::Dense { input: dim, output: 32 },
        LayerSpec::Relu,
        LayerSpec::Dense { input: 32, output: classes },
    ]
}

fn cnn_a(shape: &[usize; 3], classes: usize) -> Vec<LayerSpec> {
    let dim = 4 * (shape[1] / 2) * (shape[2] / 2);
    vec![
        conv_same(shape[0], 4, 3),
        LayerSpec::Relu,
        pool2(),
        LayerSpec::Flatten,
        LayerSpec::Dense { input: dim, output: classes },
    ]
}

fn lenet_lite(shape: &[usize; 3], classes: usize) -> Vec<LayerSpec> {
    let dim = 12 * (shape[1] / 4) * (shape[2] / 4);
    vec![
        conv_same(shape[0], 6, 5),
        LayerSpec::Relu,
        pool2(),
        conv_same(6, 12, 5),
        LayerSpec::Relu,
        pool2(),
        LayerSpec::Flatten,
        LayerSpec::Dense { input: dim, output: 24 },
        LayerSpec::Relu,
        LayerSpec::Dense { input: 24, output: classes },
    ]
}

fn cnn_wide(shape: &[usize; 3], classes: usize) -> Vec<LayerSpec> {
    let dim = 16 * (shape[1] / 4) * (shape[2] / 4);
    vec![
        conv_same(shape[0], 8, 3),
        LayerSpec::Relu,
        pool2(),
        conv_same(8, 16, 3),
        LayerSpec::Relu,
        pool2(),
        LayerSpec::Flatten,
        LayerSpec::Dense { input: dim, output: classes },
    ]
}

fn cnn_deep(shape: &[usize; 3], classes: usize) -> Vec<LayerSpec> {
    let dim = 24 * (shape[1] / 8) * (shape[2] / 8);
    vec![
        conv_same(shape[0], 6, 3),
        LayerSpec::Relu,
        pool2(),
        conv_same(6, 12, 3),
        LayerSpec::Relu,
        pool2(),
        conv_same(12, 24, 3),
        LayerSpec::Relu,
        pool2(),
        LayerSpec::Flatten,
        LayerSpec::Dense { input: dim, output: classes },
    ]
}

const CATALOG: [ModelCatalogEntry; 5] = [
    ModelCatalogEntry { name: "mlp-small", builder: mlp_small },
    ModelCatalogEntry { name: "cnn-a", builder: cnn_a },
    ModelCatalogEntry { name: "lenet-lite", builder: lenet_lite },
    ModelCatalogEntry { name: "cnn-wide", builder: cnn_wide },
    ModelCatalogEntry { name: "cnn-deep", builder: cnn_deep },
];

/// The five heterogeneous classifier architectures, in canonical order.
pub fn catalog() -> &'static [ModelCatalogEntry] {
    &CATALOG
}

pub fn catalog_names() -> Vec<&'static str> {
    CATALOG.iter().map(|e| e.name).collect()
}

/// Builds the named catalog architecture for a dataset geometry.
pub fn build_classifier(
    name: &str,
    image_shape: &[usize; 3],
    classes: usize,
    seed: u64,
) -> Result<NeuralNet> {
    let entry = CATALOG
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::UnknownModel {
            name: name.to_string(),
            catalog: catalog_names().iter().map(|s| s.to_string()).collect(),
        })?;
    entry.build(image_shape, classes, seed)
}

/// Generator geometry. The layer stack projects the latent vector to a
/// quarter-resolution map and upsamples twice, so H and W must be
/// divisible by 4.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    pub output_shape: [usize; 3],
    /// Channel width of the last conv block; the projection uses twice this.
    pub base_channels: usize,
}

impl GeneratorSpec {
    pub fn for_shape(output_shape: [usize; 3]) -> Self {
        GeneratorSpec {
            latent_dim: 100,
            output_shape,
            base_channels: 6,
        }
    }
}

/// DCGAN-style generator: dense projection, two upsample+conv blocks with
/// batch norm, tanh output in [-1, 1].
pub fn build_generator(spec: &GeneratorSpec, seed: u64) -> Result<NeuralNet> {
    let [c, h, w] = spec.output_shape;
    if spec.latent_dim == 0 {
        return Err(Error::InvalidArgument("latent_dim must be positive".into()));
    }
    if spec.base_channels == 0 {
        return Err(Error::InvalidArgument("base_channels must be positive".into()));
    }
    if c == 0 || h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "generator output shape must have positive dims with H, W divisible by 4, got [{c}, {h}, {w}]"
        )));
    }
    let g1 = spec.base_channels;
    let g2 = 2 * g1;
    let (h4, w4) = (h / 4, w / 4);
    let layers = vec![
        LayerSpec::Dense {
            input: spec.latent_dim,
            output: g2 * h4 * w4,
        },
        LayerSpec::Reshape { channels: g2, height: h4, width: w4 },
        LayerSpec::BatchNorm2d { channels: g2 },
        LayerSpec::Relu,
        LayerSpec::Upsample2d { factor: 2 },
        conv_same(g2, g1, 3),
        LayerSpec::BatchNorm2d { channels: g1 },
        LayerSpec::Relu,
        LayerSpec::Upsample2d { factor: 2 },
        conv_same(g1, c, 3),
        LayerSpec::Tanh,
    ];
    let mut net = NeuralNet::new(vec![spec.latent_dim], layers)?;
    net.glorot_init(seed);
    Ok(net)
}

/// [batch, latent_dim] of i.i.d. standard normal draws.
pub fn sample_latent<R: Rng>(batch: usize, latent_dim: usize, rng: &mut R) -> Result<Tensor> {
    if batch == 0 || latent_dim == 0 {
        return Err(Error::InvalidArgument(
            "batch and latent_dim must be positive".into(),
        ));
    }
    let values: Vec<f64> = (0..batch * latent_dim)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Tensor::from_values(&[batch, latent_dim], values)
}
