//! Finite-difference verification of analytic gradients.
//!
//! Central differences with a configurable step probe a sampled subset of
//! parameters (or input pixels) and compare against the backward pass. The
//! relative error for a pair (analytic `a`, numeric `n`) is
//! `|a - n| / max(|a| + |n|, 1e-4)`; the floor keeps near-zero gradients
//! from inflating the ratio.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Mode, NeuralNet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckSummary {
    pub checked: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-4)
}

/// Draws `count` distinct indices from `0..len` (all of them if `count >= len`).
pub fn sample_indices(len: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, len, count).into_vec();
    idx.sort_unstable();
    idx
}

/// Checks d(loss)/d(params) at the sampled indices. `loss` maps the network
/// output to the scalar loss and its gradient with respect to that output.
pub fn check_param_gradients<L>(
    net: &mut NeuralNet,
    x: &Tensor,
    mode: Mode,
    loss: L,
    indices: &[usize],
    step: f64,
) -> Result<GradCheckSummary>
where
    L: Fn(&Tensor) -> (f64, Tensor),
{
    let trace = net.forward_traced(x, mode)?;
    let (_, dy) = loss(trace.output());
    let grads = net.backward(&trace, &dy)?;
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    for &i in indices {
        let saved = net.params()[i];
        net.params_mut()[i] = saved + step;
        let plus = loss(net.forward_traced(x, mode)?.output()).0;
        net.params_mut()[i] = saved - step;
        let minus = loss(net.forward_traced(x, mode)?.output()).0;
        net.params_mut()[i] = saved;
        let numeric = (plus - minus) / (2.0 * step);
        let rel = relative_error(grads.params[i], numeric);
        max_rel = max_rel.max(rel);
        sum_rel += rel;
    }
    Ok(GradCheckSummary {
        checked: indices.len(),
        max_rel_error: max_rel,
        mean_rel_error: if indices.is_empty() { 0.0 } else { sum_rel / indices.len() as f64 },
    })
}

/// Checks d(loss)/d(input) at the sampled indices of `x`.
pub fn check_input_gradients<L>(
    net: &NeuralNet,
    x: &Tensor,
    mode: Mode,
    loss: L,
    indices: &[usize],
    step: f64,
) -> Result<GradCheckSummary>
where
    L: Fn(&Tensor) -> (f64, Tensor),
{
    let trace = net.forward_traced(x, mode)?;
    let (_, dy) = loss(trace.output());
    let grads = net.backward(&trace, &dy)?;
    let mut probe = x.clone();
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    for &i in indices {
        let saved = probe.values()[i];
        probe.values_mut()[i] = saved + step;
        let plus = loss(net.forward_traced(&probe, mode)?.output()).0;
        probe.values_mut()[i] = saved - step;
        let minus = loss(net.forward_traced(&probe, mode)?.output()).0;
        probe.values_mut()[i] = saved;
        let numeric = (plus - minus) / (2.0 * step);
        let rel = relative_error(grads.input.values()[i], numeric);
        max_rel = max_rel.max(rel);
        sum_rel += rel;
    }
    Ok(GradCheckSummary {
        checked: indices.len(),
        max_rel_error: max_rel,
        mean_rel_error: if indices.is_empty() { 0.0 } else { sum_rel / indices.len() as f64 },
    })
}

/// One named check from the standard suite.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub summary: GradCheckSummary,
}

/// The standard gradient-verification suite: every layer kind appears in at
/// least one checked network, and every loss (cross-entropy, the three
/// disagreement losses, the proximal regularizer) is verified against
/// central finite differences with the given step.
pub fn standard_suite(step: f64, samples_per_check: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    use crate::loss::{self, LossKind};
    use crate::nn::{LayerSpec, Padding};

    let mut entries = Vec::new();

    // Classifier covering conv (same padding), batch norm, relu, max pool,
    // flatten, dense, and tanh.
    let classifier_layers = vec![
        LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 3,
            kernel: 3,
            stride: 1,
            padding: Padding::Same,
        },
        LayerSpec::BatchNorm2d { channels: 3 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { kernel: 2, stride: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense { input: 3 * 4 * 4, output: 8 },
        LayerSpec::Tanh,
        LayerSpec::Dense { input: 8, output: 4 },
    ];
    let mut student = NeuralNet::new(vec![1, 8, 8], classifier_layers.clone())?;
    student.glorot_init(seed);
    let mut teacher = NeuralNet::new(vec![1, 8, 8], classifier_layers)?;
    teacher.glorot_init(seed.wrapping_add(1));

    let x = {
        let values = (0..3 * 64)
            .map(|i| ((i as f64) * 0.711).sin())
            .collect::<Vec<_>>();
        Tensor::from_values(&[3, 1, 8, 8], values)?
    };
    let labels = vec![0usize, 3, 1];

    // Give the batch-norm running statistics non-default values so the
    // eval-mode check exercises real constants.
    let warm = student.forward_train(&x)?;
    drop(warm);
    let _ = teacher.forward_train(&x)?;

    for mode in [Mode::Train, Mode::Eval] {
        let mode_name = if mode == Mode::Train { "train" } else { "eval" };
        let labels = labels.clone();
        let ce = move |y: &Tensor| {
            loss::cross_entropy_with_grad(y, &labels).expect("valid logits")
        };
        let indices = sample_indices(student.param_count(), samples_per_check, seed ^ 0x11);
        let summary = check_param_gradients(&mut student, &x, mode, &ce, &indices, step)?;
        entries.push(SuiteEntry {
            name: format!("classifier/ce/{mode_name}/params"),
            summary,
        });
        let indices = sample_indices(x.len(), samples_per_check, seed ^ 0x12);
        let summary = check_input_gradients(&student, &x, mode, &ce, &indices, step)?;
        entries.push(SuiteEntry {
            name: format!("classifier/ce/{mode_name}/input"),
            summary,
        });
    }

    // Disagreement losses through the student net (teacher logits fixed)
    // and through the teacher net (student logits fixed).
    let teacher_logits = teacher.forward(&x)?;
    let student_logits = student.forward(&x)?;
    for kind in LossKind::ALL {
        let fixed_v = teacher_logits.clone();
        let student_side = move |y: &Tensor| {
            let d = loss::disagreement(kind, y, std::slice::from_ref(&fixed_v))
                .expect("valid logits");
            (d.value, d.student)
        };
        let indices = sample_indices(student.param_count(), samples_per_check, seed ^ 0x21);
        let summary =
            check_param_gradients(&mut student, &x, Mode::Eval, &student_side, &indices, step)?;
        entries.push(SuiteEntry {
            name: format!("classifier/{}/student/params", kind.name()),
            summary,
        });

        let fixed_u = student_logits.clone();
        let device_side = move |y: &Tensor| {
            let d = loss::disagreement(kind, &fixed_u, std::slice::from_ref(y))
                .expect("valid logits");
            (d.value, d.devices.into_iter().next().expect("one device"))
        };
        let indices = sample_indices(teacher.param_count(), samples_per_check, seed ^ 0x22);
        let summary =
            check_param_gradients(&mut teacher, &x, Mode::Eval, &device_side, &indices, step)?;
        entries.push(SuiteEntry {
            name: format!("classifier/{}/device/params", kind.name()),
            summary,
        });
    }

    // Generator-style net covering dense, reshape, batch norm, upsample,
    // conv with valid padding and stride 2, flatten, and tanh.
    let mut generator = NeuralNet::new(
        vec![6],
        vec![
            LayerSpec::Dense { input: 6, output: 2 * 3 * 3 },
            LayerSpec::Reshape { channels: 2, height: 3, width: 3 },
            LayerSpec::BatchNorm2d { channels: 2 },
            LayerSpec::Relu,
            LayerSpec::Upsample2d { factor: 2 },
            LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                stride: 1,
                padding: Padding::Same,
            },
            LayerSpec::BatchNorm2d { channels: 3 },
            LayerSpec::Relu,
            LayerSpec::Conv2d {
                in_channels: 3,
                out_channels: 2,
                kernel: 3,
                stride: 2,
                padding: Padding::Valid,
            },
            LayerSpec::Flatten,
            LayerSpec::Tanh,
        ],
    )?;
    generator.glorot_init(seed.wrapping_add(2));
    let z = {
        let values = (0..4 * 6).map(|i| ((i as f64) * 1.37).cos()).collect::<Vec<_>>();
        Tensor::from_values(&[4, 6], values)?
    };
    let _ = generator.forward_train(&z)?;
    // Smooth quadratic probe loss with fixed per-output weights.
    let quad = |y: &Tensor| {
        let b = y.shape()[0] as f64;
        let mut value = 0.0;
        let mut grad = Tensor::zeros(y.shape());
        for (i, (v, g)) in y.values().iter().zip(grad.values_mut().iter_mut()).enumerate() {
            let c = 0.5 + ((i % 7) as f64) * 0.25;
            value += c * v * v / b;
            *g = 2.0 * c * v / b;
        }
        (value, grad)
    };
    for mode in [Mode::Train, Mode::Eval] {
        let mode_name = if mode == Mode::Train { "train" } else { "eval" };
        let indices = sample_indices(generator.param_count(), samples_per_check, seed ^ 0x31);
        let summary = check_param_gradients(&mut generator, &z, mode, quad, &indices, step)?;
        entries.push(SuiteEntry {
            name: format!("generator/quadratic/{mode_name}/params"),
            summary,
        });
        let indices = sample_indices(z.len(), samples_per_check, seed ^ 0x32);
        let summary = check_input_gradients(&generator, &z, mode, quad, &indices, step)?;
        entries.push(SuiteEntry {
            name: format!("generator/quadratic/{mode_name}/input"),
            summary,
        });
    }

    // Proximal regularizer: analytic 2c(w - a) against finite differences.
    {
        use crate::loss::{add_prox_gradient, prox_regularizer};
        let w: Vec<f64> = (0..24).map(|i| ((i as f64) * 0.911).sin()).collect();
        let anchor: Vec<f64> = (0..24).map(|i| ((i as f64) * 0.377).cos()).collect();
        let c = 0.7;
        let mut analytic = vec![0.0; w.len()];
        add_prox_gradient(&w, &anchor, c, &mut analytic)?;
        let mut max_rel = 0.0f64;
        let mut sum_rel = 0.0;
        for i in 0..w.len() {
            let mut probe = w.clone();
            probe[i] += step;
            let plus = prox_regularizer(&probe, &anchor, c)?;
            probe[i] -= 2.0 * step;
            let minus = prox_regularizer(&probe, &anchor, c)?;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = relative_error(analytic[i], numeric);
            max_rel = max_rel.max(rel);
            sum_rel += rel;
        }
        entries.push(SuiteEntry {
            name: "prox/params".into(),
            summary: GradCheckSummary {
                checked: w.len(),
                max_rel_error: max_rel,
                mean_rel_error: sum_rel / w.len() as f64,
            },
        });
    }

    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampled_indices_are_distinct_and_sorted() {
        let idx = sample_indices(100, 20, 9);
        assert_eq!(idx.len(), 20);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert!(idx.iter().all(|&i| i < 100));
        assert_eq!(sample_indices(5, 10, 0), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn relative_error_floors_small_magnitudes() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-9, -1e-9) < 1e-4);
        assert!(relative_error(1.0, 2.0) > 0.3);
    }
}
