//! Neural-network engine: layer specifications, forward passes with cached
//! traces, and hand-written reverse-mode gradients.
//!
//! A [`NeuralNet`] owns one flat `f64` parameter vector plus a flat state
//! vector for batch-norm running statistics. Forward passes return a
//! [`ForwardTrace`] holding every intermediate activation; [`NeuralNet::backward`]
//! consumes a trace and an output gradient to produce parameter and input
//! gradients. Batch work is chunked through [`crate::exec`] so parallel and
//! sequential execution produce bit-identical results.

pub mod checkpoint;
pub(crate) mod layers;
pub(crate) mod math;
pub mod optim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{
    for_each_chunk_mut, for_each_chunk_pair_mut, map_chunks_mut, map_reduce_in_order, CHUNK_ROWS,
};
use crate::tensor::Tensor;
use layers::{ConvGeom, BATCHNORM_EPS};
use math::axpy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

/// One layer of a sequential network. Shapes are per sample; the batch
/// dimension is implicit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    Relu,
    Tanh,
    Flatten,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    BatchNorm2d {
        channels: usize,
    },
    Reshape {
        channels: usize,
        height: usize,
        width: usize,
    },
    Upsample2d {
        factor: usize,
    },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Tanh => "tanh",
            LayerSpec::Flatten => "flatten",
            LayerSpec::MaxPool2d { .. } => "max_pool2d",
            LayerSpec::BatchNorm2d { .. } => "batch_norm2d",
            LayerSpec::Reshape { .. } => "reshape",
            LayerSpec::Upsample2d { .. } => "upsample2d",
        }
    }

    /// Per-sample output shape given the per-sample input shape, or an error
    /// when the layer cannot be applied at position `index`.
    fn output_shape(&self, input: &[usize], index: usize) -> Result<Vec<usize>> {
        let invalid = |reason: String| Error::InvalidLayer {
            layer: index,
            kind: self.kind_name(),
            reason,
        };
        let mismatch = |expected: Vec<usize>| Error::ShapeMismatch {
            layer: index,
            kind: self.kind_name(),
            expected,
            got: input.to_vec(),
        };
        match *self {
            LayerSpec::Dense {
                input: d_in,
                output: d_out,
            } => {
                if d_in == 0 || d_out == 0 {
                    return Err(invalid("zero-sized dense layer".into()));
                }
                if input != [d_in] {
                    return Err(mismatch(vec![d_in]));
                }
                Ok(vec![d_out])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if kernel == 0 || stride == 0 || out_channels == 0 {
                    return Err(invalid("kernel, stride, and out_channels must be positive".into()));
                }
                let [c, h, w] = *input else {
                    return Err(invalid(format!("expects [c, h, w] input, got {input:?}")));
                };
                if c != in_channels {
                    return Err(mismatch(vec![in_channels, h, w]));
                }
                let pad = match padding {
                    Padding::Valid => 0,
                    Padding::Same => {
                        if kernel % 2 == 0 {
                            return Err(invalid("same padding requires an odd kernel".into()));
                        }
                        (kernel - 1) / 2
                    }
                };
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                if ph < kernel || pw < kernel {
                    return Err(invalid(format!(
                        "kernel {kernel} larger than padded input {ph}x{pw}"
                    )));
                }
                let out_h = (ph - kernel) / stride + 1;
                let out_w = (pw - kernel) / stride + 1;
                Ok(vec![out_channels, out_h, out_w])
            }
            LayerSpec::Relu | LayerSpec::Tanh => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::MaxPool2d { kernel, stride } => {
                if kernel == 0 || stride == 0 {
                    return Err(invalid("kernel and stride must be positive".into()));
                }
                let [c, h, w] = *input else {
                    return Err(invalid(format!("expects [c, h, w] input, got {input:?}")));
                };
                if h < kernel || w < kernel {
                    return Err(invalid(format!(
                        "pool kernel {kernel} larger than input {h}x{w}"
                    )));
                }
                Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::BatchNorm2d { channels } => {
                let [c, h, w] = *input else {
                    return Err(invalid(format!("expects [c, h, w] input, got {input:?}")));
                };
                if c != channels {
                    return Err(mismatch(vec![channels, h, w]));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Reshape {
                channels,
                height,
                width,
            } => {
                let want = channels * height * width;
                if want == 0 {
                    return Err(invalid("zero-sized reshape target".into()));
                }
                let have: usize = input.iter().product();
                if have != want {
                    return Err(mismatch(vec![want]));
                }
                Ok(vec![channels, height, width])
            }
            LayerSpec::Upsample2d { factor } => {
                if factor == 0 {
                    return Err(invalid("factor must be positive".into()));
                }
                let [c, h, w] = *input else {
                    return Err(invalid(format!("expects [c, h, w] input, got {input:?}")));
                };
                Ok(vec![c, h * factor, w * factor])
            }
        }
    }

    /// Number of trainable parameters.
    fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { input: i, output: o } => i * o + o,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel * kernel + out_channels,
            LayerSpec::BatchNorm2d { channels } => 2 * channels,
            _ => 0,
        }
    }

    /// Number of non-trainable state values (batch-norm running stats).
    fn state_count(&self) -> usize {
        match *self {
            LayerSpec::BatchNorm2d { channels } => 2 * channels,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum LayerAux {
    None,
    MaxPool { argmax: Vec<u32> },
    BatchNorm(BnStats),
}

#[derive(Debug, Clone)]
struct BnStats {
    mean: Vec<f64>,
    var: Vec<f64>,
    invstd: Vec<f64>,
}

/// Every intermediate activation of one forward pass, plus the per-layer
/// caches the backward pass needs. Produced by the forward methods, consumed
/// by [`NeuralNet::backward`]; a backward pass cannot run without one.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    mode: Mode,
    input: Tensor,
    outputs: Vec<Tensor>,
    aux: Vec<LayerAux>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Tensor {
        self.outputs.last().expect("trace has at least one layer")
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch(&self) -> usize {
        self.input.batch()
    }
}

/// Parameter and input gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Tensor,
}

/// A sequential feed-forward network with a flat parameter vector.
#[derive(Debug, Clone)]
pub struct NeuralNet {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    /// Per-sample output shape of each layer.
    shapes: Vec<Vec<usize>>,
    params: Vec<f64>,
    /// `param_offsets[i]..param_offsets[i+1]` is layer i's slice of `params`.
    param_offsets: Vec<usize>,
    /// Batch-norm running statistics, laid out `[mean(c), var(c)]` per layer.
    state: Vec<f64>,
    state_offsets: Vec<usize>,
}

impl NeuralNet {
    /// Validates the layer chain against `input_shape` and allocates
    /// parameters (zeros, except batch-norm scale and running variance which
    /// start at one).
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "input shape must be non-empty with positive dims, got {input_shape:?}"
            )));
        }
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut param_offsets = vec![0usize];
        let mut state_offsets = vec![0usize];
        let mut cur = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            let next = layer.output_shape(&cur, i)?;
            param_offsets.push(param_offsets[i] + layer.param_count());
            state_offsets.push(state_offsets[i] + layer.state_count());
            shapes.push(next.clone());
            cur = next;
        }
        let mut net = NeuralNet {
            input_shape,
            layers,
            shapes,
            params: vec![0.0; *param_offsets.last().unwrap()],
            param_offsets,
            state: vec![0.0; *state_offsets.last().unwrap()],
            state_offsets,
        };
        net.reset_norm_defaults();
        Ok(net)
    }

    /// Batch-norm scale to one, shift to zero, running mean zero, running
    /// variance one.
    fn reset_norm_defaults(&mut self) {
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::BatchNorm2d { channels } = *layer {
                let po = self.param_offsets[i];
                self.params[po..po + channels].fill(1.0);
                self.params[po + channels..po + 2 * channels].fill(0.0);
                let so = self.state_offsets[i];
                self.state[so..so + channels].fill(0.0);
                self.state[so + channels..so + 2 * channels].fill(1.0);
            }
        }
    }

    /// Glorot-uniform weight init: weights drawn from
    /// U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))), biases zero,
    /// batch-norm scale one and shift zero. Fully determined by `seed`.
    pub fn glorot_init(&mut self, seed: u64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for i in 0..self.layers.len() {
            let po = self.param_offsets[i];
            match self.layers[i] {
                LayerSpec::Dense { input, output } => {
                    let limit = (6.0 / (input + output) as f64).sqrt();
                    for w in &mut self.params[po..po + input * output] {
                        *w = (2.0 * rng.gen::<f64>() - 1.0) * limit;
                    }
                    self.params[po + input * output..po + input * output + output].fill(0.0);
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let fan_out = out_channels * kernel * kernel;
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let w_len = out_channels * fan_in;
                    for w in &mut self.params[po..po + w_len] {
                        *w = (2.0 * rng.gen::<f64>() - 1.0) * limit;
                    }
                    self.params[po + w_len..po + w_len + out_channels].fill(0.0);
                }
                LayerSpec::BatchNorm2d { channels } => {
                    self.params[po..po + channels].fill(1.0);
                    self.params[po + channels..po + 2 * channels].fill(0.0);
                }
                _ => {}
            }
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-sample output shape of the whole network.
    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("validated at construction")
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut [f64] {
        &mut self.state
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let shape = x.shape();
        if shape.len() != self.input_shape.len() + 1
            || shape[0] == 0
            || shape[1..] != self.input_shape[..]
        {
            return Err(Error::ShapeMismatch {
                layer: 0,
                kind: "input",
                expected: self.input_shape.clone(),
                got: shape.to_vec(),
            });
        }
        Ok(shape[0])
    }

    /// Evaluation forward pass; returns only the final activations.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut trace = self.forward_traced(x, Mode::Eval)?;
        Ok(trace.outputs.pop().expect("at least one layer"))
    }

    /// Forward pass that records every activation. Never mutates the
    /// network, so it is safe for finite-difference probing in either mode;
    /// in `Train` mode batch statistics are used for batch norm but running
    /// statistics are left untouched.
    pub fn forward_traced(&self, x: &Tensor, mode: Mode) -> Result<ForwardTrace> {
        let batch = self.check_input(x)?;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        let mut aux = Vec::with_capacity(self.layers.len());
        for li in 0..self.layers.len() {
            let input = if li == 0 { x } else { &outputs[li - 1] };
            let (out, a) = self.apply_layer(li, input, batch, mode)?;
            outputs.push(out);
            aux.push(a);
        }
        Ok(ForwardTrace {
            mode,
            input: x.clone(),
            outputs,
            aux,
        })
    }

    /// Training forward pass: batch norm uses batch statistics and folds
    /// them into the running statistics with momentum 0.9.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<ForwardTrace> {
        let trace = self.forward_traced(x, Mode::Train)?;
        for (li, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::BatchNorm2d { channels } = *layer {
                let LayerAux::BatchNorm(stats) = &trace.aux[li] else {
                    unreachable!("batch norm layer always records stats");
                };
                let so = self.state_offsets[li];
                let (mean_s, var_s) = self.state[so..so + 2 * channels].split_at_mut(channels);
                for c in 0..channels {
                    mean_s[c] = 0.9 * mean_s[c] + 0.1 * stats.mean[c];
                    var_s[c] = 0.9 * var_s[c] + 0.1 * stats.var[c];
                }
            }
        }
        Ok(trace)
    }

    /// Reverse-mode pass over a recorded trace. Returns gradients of the
    /// scalar loss whose output gradient is `output_grad`, with respect to
    /// all parameters and to the network input. Running statistics receive
    /// no gradient.
    pub fn backward(&self, trace: &ForwardTrace, output_grad: &Tensor) -> Result<Gradients> {
        if trace.outputs.len() != self.layers.len() {
            return Err(Error::LengthMismatch {
                context: "trace layers",
                left: trace.outputs.len(),
                right: self.layers.len(),
            });
        }
        let batch = self.check_input(&trace.input)?;
        let last = trace.output();
        if output_grad.shape() != last.shape() {
            return Err(Error::ShapeMismatch {
                layer: self.layers.len() - 1,
                kind: "output_grad",
                expected: last.shape().to_vec(),
                got: output_grad.shape().to_vec(),
            });
        }
        let mut dparams = vec![0.0; self.params.len()];
        let mut dy = output_grad.values().to_vec();
        for li in (0..self.layers.len()).rev() {
            let input = if li == 0 { &trace.input } else { &trace.outputs[li - 1] };
            let mut dx = vec![0.0; input.len()];
            self.backward_layer(
                li,
                input,
                &trace.outputs[li],
                &trace.aux[li],
                trace.mode,
                batch,
                &dy,
                &mut dx,
                &mut dparams,
            );
            dy = dx;
        }
        let input = Tensor::from_values(trace.input.shape(), dy)?;
        Ok(Gradients {
            params: dparams,
            input,
        })
    }

    fn conv_geom(&self, li: usize, in_shape: &[usize]) -> ConvGeom {
        let LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } = self.layers[li]
        else {
            unreachable!("conv geometry requested for non-conv layer");
        };
        let out = &self.shapes[li];
        ConvGeom {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: match padding {
                Padding::Valid => 0,
                Padding::Same => (kernel - 1) / 2,
            },
            in_h: in_shape[1],
            in_w: in_shape[2],
            out_h: out[1],
            out_w: out[2],
        }
    }

    fn apply_layer(
        &self,
        li: usize,
        input: &Tensor,
        batch: usize,
        mode: Mode,
    ) -> Result<(Tensor, LayerAux)> {
        let in_shape: &[usize] = if li == 0 { &self.input_shape } else { &self.shapes[li - 1] };
        let out_shape = &self.shapes[li];
        let in_len: usize = in_shape.iter().product();
        let out_len: usize = out_shape.iter().product();
        let mut full_shape = vec![batch];
        full_shape.extend_from_slice(out_shape);
        let mut out = Tensor::zeros(&full_shape);
        let po = self.param_offsets[li];
        let pe = self.param_offsets[li + 1];
        let x_vals = input.values();
        let mut aux = LayerAux::None;
        match self.layers[li] {
            LayerSpec::Dense { input: d_in, output: d_out } => {
                let (w, b) = self.params[po..pe].split_at(d_in * d_out);
                for_each_chunk_mut(out.values_mut(), CHUNK_ROWS * out_len, |ci, chunk| {
                    let row0 = ci * CHUNK_ROWS;
                    for (r, y_row) in chunk.chunks_mut(out_len).enumerate() {
                        let x_row = &x_vals[(row0 + r) * in_len..(row0 + r + 1) * in_len];
                        layers::dense_forward_sample(d_in, d_out, w, b, x_row, y_row);
                    }
                });
            }
            LayerSpec::Conv2d { .. } => {
                let geom = self.conv_geom(li, in_shape);
                let (w, b) = self.params[po..pe].split_at(geom.weight_len());
                for_each_chunk_mut(out.values_mut(), CHUNK_ROWS * out_len, |ci, chunk| {
                    let row0 = ci * CHUNK_ROWS;
                    let mut padded = vec![0.0; geom.padded_len()];
                    for (r, y_row) in chunk.chunks_mut(out_len).enumerate() {
                        let x_row = &x_vals[(row0 + r) * in_len..(row0 + r + 1) * in_len];
                        layers::fill_padded(&geom, x_row, &mut padded);
                        layers::conv2d_forward_sample(&geom, w, b, &padded, y_row);
                    }
                });
            }
            LayerSpec::Relu => {
                for_each_chunk_mut(out.values_mut(), CHUNK_ROWS * out_len, |ci, chunk| {
                    let start = ci * CHUNK_ROWS * out_len;
                    layers::relu_forward(&x_vals[start..start + chunk.len()], chunk);
                });
            }
            LayerSpec::Tanh => {
                for_each_chunk_mut(out.values_mut(), CHUNK_ROWS * out_len, |ci, chunk| {
                    let start = ci * CHUNK_ROWS * out_len;
                    layers::tanh_forward(&x_vals[start..start + chunk.len()], chunk);
                });
            }
            LayerSpec::Flatten | LayerSpec::Reshape { .. } => {
                out.values_mut().copy_from_slice(x_vals);
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                let mut argmax = vec![0u32; batch * out_len];
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                for_each_chunk_pair_mut(
                    out.values_mut(),
                    CHUNK_ROWS * out_len,
                    &mut argmax,
                    CHUNK_ROWS * out_len,
                    |ci, y_chunk, a_chunk| {
                        let row0 = ci * CHUNK_ROWS;
                        for (r, (y_row, a_row)) in y_chunk
                            .chunks_mut(out_len)
                            .zip(a_chunk.chunks_mut(out_len))
                            .enumerate()
                        {
                            let x_row = &x_vals[(row0 + r) * in_len..(row0 + r + 1) * in_len];
                            layers::maxpool_forward_sample(
                                c, h, w, kernel, stride, oh, ow, x_row, y_row, a_row,
                            );
                        }
                    },
                );
                aux = LayerAux::MaxPool { argmax };
            }
            LayerSpec::BatchNorm2d { channels } => {
                let plane = in_shape[1] * in_shape[2];
                let stats = match mode {
                    Mode::Train => batch_stats(x_vals, batch, channels, plane, in_len),
                    Mode::Eval => {
                        let so = self.state_offsets[li];
                        let mean = self.state[so..so + channels].to_vec();
                        let var = self.state[so + channels..so + 2 * channels].to_vec();
                        let invstd = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
                        BnStats { mean, var, invstd }
                    }
                };
                let (gamma, beta) = self.params[po..pe].split_at(channels);
                // y = scale[c] * x + shift[c]
                let scale: Vec<f64> = (0..channels).map(|c| gamma[c] * stats.invstd[c]).collect();
                let shift: Vec<f64> = (0..channels)
                    .map(|c| beta[c] - stats.mean[c] * scale[c])
                    .collect();
                for_each_chunk_mut(out.values_mut(), CHUNK_ROWS * out_len, |ci, chunk| {
                    let start = ci * CHUNK_ROWS * out_len;
                    for (j, y) in chunk.iter_mut().enumerate() {
                        let c = ((start + j) % in_len) / plane;
                        *y = scale[c] * x_vals[start + j] + shift[c];
                    }
                });
                aux = LayerAux::BatchNorm(stats);
            }
            LayerSpec::Upsample2d { factor } => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                for_each_chunk_mut(out.values_mut(), CHUNK_ROWS * out_len, |ci, chunk| {
                    let row0 = ci * CHUNK_ROWS;
                    for (r, y_row) in chunk.chunks_mut(out_len).enumerate() {
                        let x_row = &x_vals[(row0 + r) * in_len..(row0 + r + 1) * in_len];
                        layers::upsample_forward_sample(c, h, w, factor, x_row, y_row);
                    }
                });
            }
        }
        Ok((out, aux))
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_layer(
        &self,
        li: usize,
        input: &Tensor,
        output: &Tensor,
        aux: &LayerAux,
        mode: Mode,
        batch: usize,
        dy: &[f64],
        dx: &mut [f64],
        dparams: &mut [f64],
    ) {
        let in_shape: &[usize] = if li == 0 { &self.input_shape } else { &self.shapes[li - 1] };
        let out_shape = &self.shapes[li];
        let in_len: usize = in_shape.iter().product();
        let out_len: usize = out_shape.iter().product();
        let po = self.param_offsets[li];
        let pe = self.param_offsets[li + 1];
        let x_vals = input.values();
        match self.layers[li] {
            LayerSpec::Dense { input: d_in, output: d_out } => {
                let w = &self.params[po..po + d_in * d_out];
                let partials = map_chunks_mut(dx, CHUNK_ROWS * in_len, |ci, dx_chunk| {
                    let row0 = ci * CHUNK_ROWS;
                    let mut dw = vec![0.0; d_in * d_out];
                    let mut db = vec![0.0; d_out];
                    for (r, dx_row) in dx_chunk.chunks_mut(in_len).enumerate() {
                        let b_idx = row0 + r;
                        let x_row = &x_vals[b_idx * in_len..(b_idx + 1) * in_len];
                        let dy_row = &dy[b_idx * out_len..(b_idx + 1) * out_len];
                        layers::dense_backward_sample(
                            d_in, d_out, w, x_row, dy_row, dx_row, &mut dw, &mut db,
                        );
                    }
                    (dw, db)
                });
                for (dw, db) in partials {
                    axpy(1.0, &dw, &mut dparams[po..po + d_in * d_out]);
                    axpy(1.0, &db, &mut dparams[po + d_in * d_out..pe]);
                }
            }
            LayerSpec::Conv2d { .. } => {
                let geom = self.conv_geom(li, in_shape);
                let w_len = geom.weight_len();
                let w = &self.params[po..po + w_len];
                let partials = map_chunks_mut(dx, CHUNK_ROWS * in_len, |ci, dx_chunk| {
                    let row0 = ci * CHUNK_ROWS;
                    let mut dw = vec![0.0; w_len];
                    let mut db = vec![0.0; geom.out_channels];
                    let mut padded = vec![0.0; geom.padded_len()];
                    let mut dpadded = vec![0.0; geom.padded_len()];
                    for (r, dx_row) in dx_chunk.chunks_mut(in_len).enumerate() {
                        let b_idx = row0 + r;
                        let x_row = &x_vals[b_idx * in_len..(b_idx + 1) * in_len];
                        let dy_row = &dy[b_idx * out_len..(b_idx + 1) * out_len];
                        layers::fill_padded(&geom, x_row, &mut padded);
                        layers::conv2d_backward_sample(
                            &geom, w, &padded, dy_row, &mut dpadded, &mut dw, &mut db,
                        );
                        layers::crop_padded(&geom, &dpadded, dx_row);
                    }
                    (dw, db)
                });
                for (dw, db) in partials {
                    axpy(1.0, &dw, &mut dparams[po..po + w_len]);
                    axpy(1.0, &db, &mut dparams[po + w_len..pe]);
                }
            }
            LayerSpec::Relu => {
                for_each_chunk_mut(dx, CHUNK_ROWS * in_len, |ci, chunk| {
                    let start = ci * CHUNK_ROWS * in_len;
                    layers::relu_backward(
                        &x_vals[start..start + chunk.len()],
                        &dy[start..start + chunk.len()],
                        chunk,
                    );
                });
            }
            LayerSpec::Tanh => {
                let y_vals = output.values();
                for_each_chunk_mut(dx, CHUNK_ROWS * in_len, |ci, chunk| {
                    let start = ci * CHUNK_ROWS * in_len;
                    layers::tanh_backward(
                        &y_vals[start..start + chunk.len()],
                        &dy[start..start + chunk.len()],
                        chunk,
                    );
                });
            }
            LayerSpec::Flatten | LayerSpec::Reshape { .. } => {
                dx.copy_from_slice(dy);
            }
            LayerSpec::MaxPool2d { .. } => {
                let LayerAux::MaxPool { argmax } = aux else {
                    unreachable!("max pool trace always records argmax");
                };
                for_each_chunk_mut(dx, CHUNK_ROWS * in_len, |ci, dx_chunk| {
                    let row0 = ci * CHUNK_ROWS;
                    for (r, dx_row) in dx_chunk.chunks_mut(in_len).enumerate() {
                        let b_idx = row0 + r;
                        layers::maxpool_backward_sample(
                            &dy[b_idx * out_len..(b_idx + 1) * out_len],
                            &argmax[b_idx * out_len..(b_idx + 1) * out_len],
                            dx_row,
                        );
                    }
                });
            }
            LayerSpec::BatchNorm2d { channels } => {
                let LayerAux::BatchNorm(stats) = aux else {
                    unreachable!("batch norm trace always records stats");
                };
                let plane = in_shape[1] * in_shape[2];
                let gamma = &self.params[po..po + channels];
                bn_backward(
                    x_vals, dy, dx, stats, gamma, mode, batch, channels, plane, in_len,
                    &mut dparams[po..pe],
                );
            }
            LayerSpec::Upsample2d { factor } => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                for_each_chunk_mut(dx, CHUNK_ROWS * in_len, |ci, dx_chunk| {
                    let row0 = ci * CHUNK_ROWS;
                    for (r, dx_row) in dx_chunk.chunks_mut(in_len).enumerate() {
                        let b_idx = row0 + r;
                        layers::upsample_backward_sample(
                            c, h, w, factor,
                            &dy[b_idx * out_len..(b_idx + 1) * out_len],
                            dx_row,
                        );
                    }
                });
            }
        }
    }
}

/// Per-channel mean and biased variance over batch and spatial dims.
fn batch_stats(
    x: &[f64],
    batch: usize,
    channels: usize,
    plane: usize,
    row_len: usize,
) -> BnStats {
    let n = (batch * plane) as f64;
    let mut sums = vec![0.0; channels];
    let mut sumsqs = vec![0.0; channels];
    map_reduce_in_order(
        batch,
        CHUNK_ROWS,
        |range| {
            let mut s = vec![0.0; channels];
            let mut s2 = vec![0.0; channels];
            for b in range {
                for c in 0..channels {
                    let start = b * row_len + c * plane;
                    let slice = &x[start..start + plane];
                    s[c] += math::sum(slice);
                    s2[c] += math::dot(slice, slice);
                }
            }
            (s, s2)
        },
        |(s, s2)| {
            axpy(1.0, &s, &mut sums);
            axpy(1.0, &s2, &mut sumsqs);
        },
    );
    let mean: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let var: Vec<f64> = sumsqs
        .iter()
        .zip(&mean)
        .map(|(s2, m)| (s2 / n - m * m).max(0.0))
        .collect();
    let invstd = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
    BnStats { mean, var, invstd }
}

#[allow(clippy::too_many_arguments)]
fn bn_backward(
    x: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    stats: &BnStats,
    gamma: &[f64],
    mode: Mode,
    batch: usize,
    channels: usize,
    plane: usize,
    row_len: usize,
    dparams: &mut [f64],
) {
    let n = (batch * plane) as f64;
    // Accumulate sum(dy) and sum(dy * xhat) per channel.
    let mut sum_dy = vec![0.0; channels];
    let mut sum_dy_xhat = vec![0.0; channels];
    map_reduce_in_order(
        batch,
        CHUNK_ROWS,
        |range| {
            let mut s = vec![0.0; channels];
            let mut sx = vec![0.0; channels];
            for b in range.clone() {
                for c in 0..channels {
                    let start = b * row_len + c * plane;
                    let xs = &x[start..start + plane];
                    let dys = &dy[start..start + plane];
                    s[c] += math::sum(dys);
                    // sum(dy * (x - mean)) * invstd, expanded to reuse dot.
                    sx[c] += (math::dot(dys, xs) - stats.mean[c] * math::sum(dys))
                        * stats.invstd[c];
                }
            }
            (s, sx)
        },
        |(s, sx)| {
            axpy(1.0, &s, &mut sum_dy);
            axpy(1.0, &sx, &mut sum_dy_xhat);
        },
    );
    let (dgamma, dbeta) = dparams.split_at_mut(channels);
    axpy(1.0, &sum_dy_xhat, dgamma);
    axpy(1.0, &sum_dy, dbeta);
    match mode {
        Mode::Train => {
            // dx = gamma*invstd/n * (n*dy - sum_dy - xhat * sum_dy_xhat)
            for_each_chunk_mut(dx, CHUNK_ROWS * row_len, |ci, chunk| {
                let start = ci * CHUNK_ROWS * row_len;
                for (j, d) in chunk.iter_mut().enumerate() {
                    let idx = start + j;
                    let c = (idx % row_len) / plane;
                    let xhat = (x[idx] - stats.mean[c]) * stats.invstd[c];
                    *d = gamma[c] * stats.invstd[c] / n
                        * (n * dy[idx] - sum_dy[c] - xhat * sum_dy_xhat[c]);
                }
            });
        }
        Mode::Eval => {
            // Running stats are constants: dx = dy * gamma * invstd.
            for_each_chunk_mut(dx, CHUNK_ROWS * row_len, |ci, chunk| {
                let start = ci * CHUNK_ROWS * row_len;
                for (j, d) in chunk.iter_mut().enumerate() {
                    let idx = start + j;
                    let c = (idx % row_len) / plane;
                    *d = dy[idx] * gamma[c] * stats.invstd[c];
                }
            });
        }
    }
}
