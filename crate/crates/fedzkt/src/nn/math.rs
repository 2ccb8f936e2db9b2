//! Scalar kernels shared by the layer implementations.
//!
//! Reductions use a fixed four-way accumulator split so the floating-point
//! order is the same on every run and on both execution paths.

/// Dot product with four independent accumulators.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let quads = n / 4;
    let mut acc = [0.0f64; 4];
    for i in 0..quads {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * quads..n {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y[i] += alpha * x[i]`
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// Sum with four independent accumulators.
pub(crate) fn sum(a: &[f64]) -> f64 {
    let n = a.len();
    let quads = n / 4;
    let mut acc = [0.0f64; 4];
    for i in 0..quads {
        let j = 4 * i;
        acc[0] += a[j];
        acc[1] += a[j + 1];
        acc[2] += a[j + 2];
        acc[3] += a[j + 3];
    }
    let mut tail = 0.0;
    for &v in &a[4 * quads..n] {
        tail += v;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `sum(a[i] * b[i])` where `b` is read with a stride.
pub(crate) fn dot_strided(a: &[f64], b: &[f64], stride: usize) -> f64 {
    let mut acc = 0.0;
    for (i, ai) in a.iter().enumerate() {
        acc += ai * b[i * stride];
    }
    acc
}

pub(crate) fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
