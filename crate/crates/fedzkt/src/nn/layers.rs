//! Per-sample layer kernels.
//!
//! Each kernel operates on the flat value slices of a single sample (or, for
//! batch norm, on the whole mini-batch). The orchestration in `nn::net`
//! handles batching, chunking, and gradient accumulation.

use crate::nn::math::{axpy, dot, dot_strided, sum};

pub(crate) const BATCHNORM_EPS: f64 = 1e-5;

/// Geometry of one conv layer, resolved against a concrete input shape.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn padded_h(&self) -> usize {
        self.in_h + 2 * self.pad
    }
    pub fn padded_w(&self) -> usize {
        self.in_w + 2 * self.pad
    }
    pub fn padded_len(&self) -> usize {
        self.in_channels * self.padded_h() * self.padded_w()
    }
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }
}

/// Copy one sample into the zero-padded scratch buffer.
pub(crate) fn fill_padded(geom: &ConvGeom, x: &[f64], padded: &mut [f64]) {
    let (ph, pw) = (geom.padded_h(), geom.padded_w());
    padded.fill(0.0);
    for c in 0..geom.in_channels {
        for row in 0..geom.in_h {
            let src = c * geom.in_h * geom.in_w + row * geom.in_w;
            let dst = c * ph * pw + (row + geom.pad) * pw + geom.pad;
            padded[dst..dst + geom.in_w].copy_from_slice(&x[src..src + geom.in_w]);
        }
    }
}

/// y[oc, oh, ow] = b[oc] + sum_{ic,kh,kw} w[oc,ic,kh,kw] * padded[ic, oh*s+kh, ow*s+kw]
pub(crate) fn conv2d_forward_sample(
    geom: &ConvGeom,
    weights: &[f64],
    bias: &[f64],
    padded: &[f64],
    y: &mut [f64],
) {
    let (ph, pw) = (geom.padded_h(), geom.padded_w());
    let out_plane = geom.out_h * geom.out_w;
    for oc in 0..geom.out_channels {
        let y_plane = &mut y[oc * out_plane..(oc + 1) * out_plane];
        y_plane.fill(bias[oc]);
        for ic in 0..geom.in_channels {
            let pad_plane = &padded[ic * ph * pw..(ic + 1) * ph * pw];
            for kh in 0..geom.kernel {
                for kw in 0..geom.kernel {
                    let w = weights[((oc * geom.in_channels + ic) * geom.kernel + kh)
                        * geom.kernel
                        + kw];
                    for oh in 0..geom.out_h {
                        let in_row = (oh * geom.stride + kh) * pw + kw;
                        let y_row = &mut y_plane[oh * geom.out_w..(oh + 1) * geom.out_w];
                        if geom.stride == 1 {
                            axpy(w, &pad_plane[in_row..in_row + geom.out_w], y_row);
                        } else {
                            for ow in 0..geom.out_w {
                                y_row[ow] += w * pad_plane[in_row + ow * geom.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates dL/d(padded input), dL/dw, dL/db for one sample.
pub(crate) fn conv2d_backward_sample(
    geom: &ConvGeom,
    weights: &[f64],
    padded: &[f64],
    dy: &[f64],
    dpadded: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let (ph, pw) = (geom.padded_h(), geom.padded_w());
    let out_plane = geom.out_h * geom.out_w;
    dpadded.fill(0.0);
    for oc in 0..geom.out_channels {
        let dy_plane = &dy[oc * out_plane..(oc + 1) * out_plane];
        db[oc] += sum(dy_plane);
        for ic in 0..geom.in_channels {
            let pad_plane = &padded[ic * ph * pw..(ic + 1) * ph * pw];
            let dpad_plane = &mut dpadded[ic * ph * pw..(ic + 1) * ph * pw];
            for kh in 0..geom.kernel {
                for kw in 0..geom.kernel {
                    let widx = ((oc * geom.in_channels + ic) * geom.kernel + kh)
                        * geom.kernel
                        + kw;
                    let w = weights[widx];
                    let mut wg = 0.0;
                    for oh in 0..geom.out_h {
                        let in_row = (oh * geom.stride + kh) * pw + kw;
                        let dy_row = &dy_plane[oh * geom.out_w..(oh + 1) * geom.out_w];
                        if geom.stride == 1 {
                            wg += dot(dy_row, &pad_plane[in_row..in_row + geom.out_w]);
                            axpy(w, dy_row, &mut dpad_plane[in_row..in_row + geom.out_w]);
                        } else {
                            wg += dot_strided(dy_row, &pad_plane[in_row..], geom.stride);
                            for ow in 0..geom.out_w {
                                dpad_plane[in_row + ow * geom.stride] += w * dy_row[ow];
                            }
                        }
                    }
                    dw[widx] += wg;
                }
            }
        }
    }
}

/// Crop the padded-input gradient back to the unpadded sample gradient.
pub(crate) fn crop_padded(geom: &ConvGeom, dpadded: &[f64], dx: &mut [f64]) {
    let (ph, pw) = (geom.padded_h(), geom.padded_w());
    for c in 0..geom.in_channels {
        for row in 0..geom.in_h {
            let src = c * ph * pw + (row + geom.pad) * pw + geom.pad;
            let dst = c * geom.in_h * geom.in_w + row * geom.in_w;
            dx[dst..dst + geom.in_w].copy_from_slice(&dpadded[src..src + geom.in_w]);
        }
    }
}

/// y[o] = b[o] + sum_i x[i] * w[i, o]   (weights stored input-major)
pub(crate) fn dense_forward_sample(
    input: usize,
    output: usize,
    weights: &[f64],
    bias: &[f64],
    x: &[f64],
    y: &mut [f64],
) {
    y.copy_from_slice(bias);
    for i in 0..input {
        axpy(x[i], &weights[i * output..(i + 1) * output], y);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward_sample(
    input: usize,
    output: usize,
    weights: &[f64],
    x: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    axpy(1.0, dy, db);
    for i in 0..input {
        let w_row = &weights[i * output..(i + 1) * output];
        dx[i] = dot(dy, w_row);
        axpy(x[i], dy, &mut dw[i * output..(i + 1) * output]);
    }
}

pub(crate) fn relu_forward(x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = xi.max(0.0);
    }
}

pub(crate) fn relu_backward(x: &[f64], dy: &[f64], dx: &mut [f64]) {
    for i in 0..x.len() {
        dx[i] = if x[i] > 0.0 { dy[i] } else { 0.0 };
    }
}

pub(crate) fn tanh_forward(x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = xi.tanh();
    }
}

pub(crate) fn tanh_backward(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    for i in 0..y.len() {
        dx[i] = dy[i] * (1.0 - y[i] * y[i]);
    }
}

/// Max pool over non-overlapping-or-strided windows; records the flat index
/// of each window argmax (first occurrence on ties) for the backward pass.
#[allow(clippy::too_many_arguments)]
pub(crate) fn maxpool_forward_sample(
    channels: usize,
    in_h: usize,
    in_w: usize,
    kernel: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    x: &[f64],
    y: &mut [f64],
    argmax: &mut [u32],
) {
    for c in 0..channels {
        let plane = &x[c * in_h * in_w..(c + 1) * in_h * in_w];
        for oh in 0..out_h {
            for ow in 0..out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for kh in 0..kernel {
                    let row = oh * stride + kh;
                    for kw in 0..kernel {
                        let idx = row * in_w + ow * stride + kw;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                let out_idx = (c * out_h + oh) * out_w + ow;
                y[out_idx] = best;
                argmax[out_idx] = (c * in_h * in_w + best_idx) as u32;
            }
        }
    }
}

pub(crate) fn maxpool_backward_sample(dy: &[f64], argmax: &[u32], dx: &mut [f64]) {
    for (g, &idx) in dy.iter().zip(argmax) {
        dx[idx as usize] += g;
    }
}

/// Nearest-neighbour upsample by an integer factor.
pub(crate) fn upsample_forward_sample(
    channels: usize,
    in_h: usize,
    in_w: usize,
    factor: usize,
    x: &[f64],
    y: &mut [f64],
) {
    let (out_h, out_w) = (in_h * factor, in_w * factor);
    for c in 0..channels {
        for oh in 0..out_h {
            let src_row = c * in_h * in_w + (oh / factor) * in_w;
            let dst_row = c * out_h * out_w + oh * out_w;
            for ow in 0..out_w {
                y[dst_row + ow] = x[src_row + ow / factor];
            }
        }
    }
}

pub(crate) fn upsample_backward_sample(
    channels: usize,
    in_h: usize,
    in_w: usize,
    factor: usize,
    dy: &[f64],
    dx: &mut [f64],
) {
    let (out_h, out_w) = (in_h * factor, in_w * factor);
    for c in 0..channels {
        for oh in 0..out_h {
            let src_row = c * out_h * out_w + oh * out_w;
            let dst_row = c * in_h * in_w + (oh / factor) * in_w;
            for ow in 0..out_w {
                dx[dst_row + ow / factor] += dy[src_row + ow];
            }
        }
    }
}
