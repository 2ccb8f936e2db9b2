//! Training and disagreement losses with hand-derived logit gradients.
//!
//! The three disagreement losses compare a student's outputs against the
//! device ensemble: KL divergence and SL operate on post-softmax
//! probabilities (the ensemble averages probabilities), the ℓ1 logit loss
//! compares raw logits against the mean device logit. Every loss is
//! mean-reduced over the batch and runs at temperature 1. Probabilities are
//! clamped below at 1e-12 before logs or divisions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::math::l2_norm;
use crate::nn::{Mode, NeuralNet};
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Kl,
    #[serde(rename = "l1")]
    L1Logit,
    Sl,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Kl, LossKind::Sl, LossKind::L1Logit];

    /// Short name used in config files and CSV columns.
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Kl => "kl",
            LossKind::L1Logit => "l1",
            LossKind::Sl => "sl",
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_batch_of_rows(t: &Tensor, context: &'static str) -> Result<(usize, usize)> {
    let shape = t.shape();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::InvalidArgument(format!(
            "{context} expects a [batch, classes] tensor, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1]))
}

/// Row-wise numerically stable softmax.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(logits.shape());
    let row_len = logits.row_len();
    for (y_row, x_row) in out
        .values_mut()
        .chunks_mut(row_len)
        .zip(logits.values().chunks(row_len))
    {
        softmax_row(x_row, y_row);
    }
    out
}

fn softmax_row(x: &[f64], y: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = (xi - max).exp();
        total += *yi;
    }
    for yi in y.iter_mut() {
        *yi /= total;
    }
}

/// Pulls dL/d(probs) back through one softmax row:
/// dL/dz_j = p_j (g_j - Σ_i g_i p_i).
fn softmax_pullback_row(probs: &[f64], dprobs: &[f64], dlogits: &mut [f64]) {
    let inner: f64 = probs.iter().zip(dprobs).map(|(p, g)| p * g).sum();
    for ((dz, p), g) in dlogits.iter_mut().zip(probs).zip(dprobs) {
        *dz = p * (g - inner);
    }
}

/// Mean over the batch of -log(prob[label]), clamped below at 1e-12.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (batch, classes) = check_batch_of_rows(probs, "cross_entropy")?;
    if labels.len() != batch {
        return Err(Error::LengthMismatch {
            context: "cross_entropy labels",
            left: labels.len(),
            right: batch,
        });
    }
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        total -= probs.row(b)[label].max(PROB_CLAMP).ln();
    }
    Ok(total / batch as f64)
}

/// Cross-entropy of softmax(logits) against integer labels, with the
/// gradient with respect to the logits: (softmax - onehot) / batch.
pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (batch, _) = check_batch_of_rows(logits, "cross_entropy_with_grad")?;
    let probs = softmax(logits);
    let value = cross_entropy(&probs, labels)?;
    let mut grad = probs;
    let row_len = grad.row_len();
    let scale = 1.0 / batch as f64;
    for (b, row) in grad.values_mut().chunks_mut(row_len).enumerate() {
        row[labels[b]] -= 1.0;
        for g in row.iter_mut() {
            *g *= scale;
        }
    }
    Ok((value, grad))
}

/// Mean over the batch of Σ_i U_i log(U_i / V_i), with 0 log 0 = 0.
pub fn kl_loss(student: &Tensor, ensemble: &Tensor) -> Result<f64> {
    let (batch, _) = check_same_rows(student, ensemble, "kl_loss")?;
    let row_len = student.row_len();
    let mut total = 0.0;
    for (u_row, v_row) in student
        .values()
        .chunks(row_len)
        .zip(ensemble.values().chunks(row_len))
    {
        total += kl_row(u_row, v_row);
    }
    Ok(total / batch as f64)
}

fn kl_row(u: &[f64], v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (ui, vi) in u.iter().zip(v) {
        if *ui > 0.0 {
            acc += ui * (ui.max(PROB_CLAMP) / vi.max(PROB_CLAMP)).ln();
        }
    }
    acc
}

/// Mean over the batch of ||U - V||_1 on probability rows.
pub fn sl_loss(student: &Tensor, ensemble: &Tensor) -> Result<f64> {
    let (batch, _) = check_same_rows(student, ensemble, "sl_loss")?;
    let total: f64 = student
        .values()
        .iter()
        .zip(ensemble.values())
        .map(|(u, v)| (u - v).abs())
        .sum();
    Ok(total / batch as f64)
}

/// Mean over the batch of ||u - mean_k(v_k)||_1 on raw logits.
pub fn l1_logit_loss(student_logits: &Tensor, device_logits: &[Tensor]) -> Result<f64> {
    let mean = mean_logits(student_logits, device_logits)?;
    let batch = student_logits.shape()[0];
    let total: f64 = student_logits
        .values()
        .iter()
        .zip(mean.values())
        .map(|(u, v)| (u - v).abs())
        .sum();
    Ok(total / batch as f64)
}

fn check_same_rows(a: &Tensor, b: &Tensor, context: &'static str) -> Result<(usize, usize)> {
    let dims = check_batch_of_rows(a, context)?;
    if a.shape() != b.shape() {
        return Err(Error::LengthMismatch {
            context,
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(dims)
}

fn mean_logits(student: &Tensor, devices: &[Tensor]) -> Result<Tensor> {
    check_batch_of_rows(student, "l1_logit_loss")?;
    if devices.is_empty() {
        return Err(Error::InvalidArgument(
            "l1_logit_loss needs at least one device output".into(),
        ));
    }
    let mut mean = Tensor::zeros(student.shape());
    for d in devices {
        if d.shape() != student.shape() {
            return Err(Error::LengthMismatch {
                context: "l1_logit_loss device shape",
                left: d.len(),
                right: student.len(),
            });
        }
        for (m, v) in mean.values_mut().iter_mut().zip(d.values()) {
            *m += v;
        }
    }
    let inv = 1.0 / devices.len() as f64;
    for m in mean.values_mut() {
        *m *= inv;
    }
    Ok(mean)
}

/// coefficient * ||w_now - w_anchor||_2^2
pub fn prox_regularizer(w_now: &[f64], w_anchor: &[f64], coefficient: f64) -> Result<f64> {
    if w_now.len() != w_anchor.len() {
        return Err(Error::LengthMismatch {
            context: "prox_regularizer",
            left: w_now.len(),
            right: w_anchor.len(),
        });
    }
    let mut acc = 0.0;
    for (w, a) in w_now.iter().zip(w_anchor) {
        let d = w - a;
        acc += d * d;
    }
    Ok(coefficient * acc)
}

/// Adds the proximal gradient 2c(w_now - w_anchor) into `grads`.
pub fn add_prox_gradient(
    w_now: &[f64],
    w_anchor: &[f64],
    coefficient: f64,
    grads: &mut [f64],
) -> Result<()> {
    if w_now.len() != w_anchor.len() || w_now.len() != grads.len() {
        return Err(Error::LengthMismatch {
            context: "add_prox_gradient",
            left: w_now.len(),
            right: w_anchor.len().max(grads.len()),
        });
    }
    for ((g, w), a) in grads.iter_mut().zip(w_now).zip(w_anchor) {
        *g += 2.0 * coefficient * (w - a);
    }
    Ok(())
}

/// Value and logit-level gradients of one disagreement loss.
///
/// `student` is dL/d(student logits); `devices[k]` is dL/d(v_k). The
/// generator ascends by negating both, the server step descends using the
/// student side only, and phase-2 shadow distillation (single teacher as
/// the student argument) uses the device side.
#[derive(Debug, Clone)]
pub struct Disagreement {
    pub value: f64,
    pub student: Tensor,
    pub devices: Vec<Tensor>,
}

/// Evaluates the selected disagreement loss between student logits and the
/// device ensemble, returning logit gradients for every participant.
pub fn disagreement(
    kind: LossKind,
    student_logits: &Tensor,
    device_logits: &[Tensor],
) -> Result<Disagreement> {
    let (batch, classes) = check_batch_of_rows(student_logits, "disagreement")?;
    if device_logits.is_empty() {
        return Err(Error::InvalidArgument(
            "disagreement needs at least one device output".into(),
        ));
    }
    for d in device_logits {
        if d.shape() != student_logits.shape() {
            return Err(Error::LengthMismatch {
                context: "disagreement device shape",
                left: d.len(),
                right: student_logits.len(),
            });
        }
    }
    match kind {
        LossKind::L1Logit => l1_disagreement(student_logits, device_logits, batch, classes),
        LossKind::Kl | LossKind::Sl => {
            prob_disagreement(kind, student_logits, device_logits, batch, classes)
        }
    }
}

fn l1_disagreement(
    u: &Tensor,
    vs: &[Tensor],
    batch: usize,
    _classes: usize,
) -> Result<Disagreement> {
    let mean = mean_logits(u, vs)?;
    let k = vs.len() as f64;
    let scale = 1.0 / batch as f64;
    let mut value = 0.0;
    let mut du = Tensor::zeros(u.shape());
    let mut dv_shared = Tensor::zeros(u.shape());
    for i in 0..u.len() {
        let diff = u.values()[i] - mean.values()[i];
        value += diff.abs();
        let s = sign(diff) * scale;
        du.values_mut()[i] = s;
        dv_shared.values_mut()[i] = -s / k;
    }
    // Every device shares the same gradient: the mean weights them equally.
    let devices = vec![dv_shared; vs.len()];
    Ok(Disagreement {
        value: value * scale,
        student: du,
        devices,
    })
}

fn prob_disagreement(
    kind: LossKind,
    u_logits: &Tensor,
    v_logits: &[Tensor],
    batch: usize,
    classes: usize,
) -> Result<Disagreement> {
    let u_probs = softmax(u_logits);
    let v_probs: Vec<Tensor> = v_logits.iter().map(softmax).collect();
    let k = v_logits.len() as f64;
    // Ensemble: mean of post-softmax probabilities.
    let mut vbar = Tensor::zeros(u_logits.shape());
    for vp in &v_probs {
        for (m, p) in vbar.values_mut().iter_mut().zip(vp.values()) {
            *m += p;
        }
    }
    for m in vbar.values_mut() {
        *m /= k;
    }

    let scale = 1.0 / batch as f64;
    let mut value = 0.0;
    let mut du = Tensor::zeros(u_logits.shape());
    let mut dvbar = vec![0.0; u_logits.len()];
    let mut dprob_row = vec![0.0; classes];
    for b in 0..batch {
        let urow = &u_probs.values()[b * classes..(b + 1) * classes];
        let vrow = &vbar.values()[b * classes..(b + 1) * classes];
        match kind {
            LossKind::Kl => {
                value += kl_row(urow, vrow);
                // d/dU_i of Σ U ln(U/V) = ln(U_i/V_i) + 1
                for i in 0..classes {
                    dprob_row[i] =
                        (urow[i].max(PROB_CLAMP) / vrow[i].max(PROB_CLAMP)).ln() + 1.0;
                }
                softmax_pullback_row(
                    urow,
                    &dprob_row,
                    &mut du.values_mut()[b * classes..(b + 1) * classes],
                );
                for i in 0..classes {
                    dvbar[b * classes + i] = -urow[i] / vrow[i].max(PROB_CLAMP);
                }
            }
            LossKind::Sl => {
                for i in 0..classes {
                    let diff = urow[i] - vrow[i];
                    value += diff.abs();
                    dprob_row[i] = sign(diff);
                    dvbar[b * classes + i] = -sign(diff);
                }
                softmax_pullback_row(
                    urow,
                    &dprob_row,
                    &mut du.values_mut()[b * classes..(b + 1) * classes],
                );
            }
            LossKind::L1Logit => unreachable!("handled by l1_disagreement"),
        }
    }
    for g in du.values_mut() {
        *g *= scale;
    }
    // Pull dL/dVbar back through each device softmax; dVbar/dV_k = 1/k.
    let mut devices = Vec::with_capacity(v_logits.len());
    for vp in &v_probs {
        let mut dv = Tensor::zeros(u_logits.shape());
        for b in 0..batch {
            let prow = &vp.values()[b * classes..(b + 1) * classes];
            for i in 0..classes {
                dprob_row[i] = dvbar[b * classes + i] * scale / k;
            }
            softmax_pullback_row(
                prow,
                &dprob_row,
                &mut dv.values_mut()[b * classes..(b + 1) * classes],
            );
        }
        devices.push(dv);
    }
    Ok(Disagreement {
        value: value * scale,
        student: du,
        devices,
    })
}

/// Value of the disagreement loss and its gradient with respect to the
/// input batch, backpropagated through the student and all device nets
/// (evaluation mode). This is the quantity the generator ascends on.
pub fn disagreement_input_gradient(
    kind: LossKind,
    student: &NeuralNet,
    devices: &[&NeuralNet],
    x: &Tensor,
) -> Result<(f64, Tensor)> {
    if devices.is_empty() {
        return Err(Error::InvalidArgument(
            "disagreement_input_gradient needs at least one device".into(),
        ));
    }
    let u_trace = student.forward_traced(x, Mode::Eval)?;
    let v_traces: Vec<_> = devices
        .iter()
        .map(|d| d.forward_traced(x, Mode::Eval))
        .collect::<Result<Vec<_>>>()?;
    let v_logits: Vec<Tensor> = v_traces.iter().map(|t| t.output().clone()).collect();
    let d = disagreement(kind, u_trace.output(), &v_logits)?;
    let mut dx = student.backward(&u_trace, &d.student)?.input;
    for ((dev, trace), dv) in devices.iter().zip(&v_traces).zip(&d.devices) {
        let g = dev.backward(trace, dv)?;
        for (a, b) in dx.values_mut().iter_mut().zip(g.input.values()) {
            *a += b;
        }
    }
    Ok((d.value, dx))
}

/// Per-sample ℓ2 norms of the disagreement loss's input gradient (the
/// quantity behind the gradient-norm hypotheses).
pub fn input_gradient_norms(
    kind: LossKind,
    student: &NeuralNet,
    devices: &[&NeuralNet],
    x: &Tensor,
) -> Result<Vec<f64>> {
    let (_, dx) = disagreement_input_gradient(kind, student, devices, x)?;
    let row_len = dx.row_len();
    Ok(dx.values().chunks(row_len).map(l2_norm).collect())
}

/// Whole-batch ℓ2 norm variant of [`input_gradient_norms`].
pub fn input_gradient_norm(
    kind: LossKind,
    student: &NeuralNet,
    devices: &[&NeuralNet],
    x: &Tensor,
) -> Result<f64> {
    let per_sample = input_gradient_norms(kind, student, devices, x)?;
    Ok(per_sample.iter().map(|n| n * n).sum::<f64>().sqrt())
}

/// Index of the largest value; the first index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Median of a sample list; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaNs in medians"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;

    fn t(shape: &[usize], values: Vec<f64>) -> Tensor {
        Tensor::from_values(shape, values).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let y = softmax(&t(&[1, 2], vec![0.0, 0.0]));
        assert_eq!(y.values(), &[0.5, 0.5]);

        let y = softmax(&t(&[1, 2], vec![1000.0, 0.0]));
        assert!(y.all_finite());
        assert!(y.values()[0] > 1.0 - 1e-12);
        assert!(y.values()[1] < 1e-12);

        let y = softmax(&t(&[1, 3], vec![1.0, 2.0, 3.0]));
        let m = 3.0f64;
        let raw: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|v| (v - m).exp()).collect();
        let z: f64 = raw.iter().sum();
        for (got, want) in y.values().iter().zip(raw.iter().map(|r| r / z)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        // One-hot on the true label.
        let p = t(&[1, 3], vec![0.0, 1.0, 0.0]);
        assert!(cross_entropy(&p, &[1]).unwrap().abs() < 1e-12);

        // Uniform over 10 classes.
        let p = t(&[1, 10], vec![0.1; 10]);
        assert!((cross_entropy(&p, &[4]).unwrap() - 10.0f64.ln()).abs() < 1e-12);

        // Mean invariance for identical rows.
        let p2 = t(&[2, 10], vec![0.1; 20]);
        assert!(
            (cross_entropy(&p2, &[4, 4]).unwrap() - cross_entropy(&p, &[4]).unwrap()).abs()
                < 1e-15
        );

        // Out-of-range label.
        assert!(cross_entropy(&p, &[10]).is_err());
    }

    #[test]
    fn cross_entropy_grad_is_probs_minus_onehot() {
        let logits = t(&[1, 3], vec![0.2, -0.1, 0.4]);
        let (_, grad) = cross_entropy_with_grad(&logits, &[2]).unwrap();
        let p = softmax(&logits);
        assert!((grad.values()[0] - p.values()[0]).abs() < 1e-15);
        assert!((grad.values()[2] - (p.values()[2] - 1.0)).abs() < 1e-15);
        let total: f64 = grad.values().iter().sum();
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let u = t(&[1, 2], vec![0.5, 0.5]);
        assert!(kl_loss(&u, &u).unwrap().abs() < 1e-15);

        let v = t(&[1, 2], vec![0.25, 0.75]);
        let want = 0.5 * (2.0f64).ln() + 0.5 * (2.0f64 / 3.0).ln();
        let got = kl_loss(&u, &v).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.143841).abs() < 1e-6);

        // Zero student entries contribute nothing.
        let u0 = t(&[1, 2], vec![0.0, 1.0]);
        let v0 = t(&[1, 2], vec![0.5, 0.5]);
        assert!((kl_loss(&u0, &v0).unwrap() - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let raw_u: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let raw_v: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let zu: f64 = raw_u.iter().sum();
            let zv: f64 = raw_v.iter().sum();
            let u = t(&[1, 6], raw_u.iter().map(|x| x / zu).collect());
            let v = t(&[1, 6], raw_v.iter().map(|x| x / zv).collect());
            assert!(kl_loss(&u, &v).unwrap() >= -1e-15);
        }
    }

    #[test]
    fn l1_logit_examples() {
        let u = t(&[1, 2], vec![3.0, 0.0]);
        let d1 = t(&[1, 2], vec![1.0, 0.0]);
        let d2 = t(&[1, 2], vec![1.0, 0.0]);
        assert_eq!(l1_logit_loss(&u, &[d1.clone(), d2.clone()]).unwrap(), 2.0);

        // u equal to the device mean.
        let mean = t(&[1, 2], vec![1.0, 0.0]);
        assert_eq!(l1_logit_loss(&mean, &[d1.clone(), d2.clone()]).unwrap(), 0.0);

        // Translation invariance.
        let c = 0.37;
        let shift = |x: &Tensor| t(&[1, 2], x.values().iter().map(|v| v + c).collect());
        let shifted = l1_logit_loss(&shift(&u), &[shift(&d1), shift(&d2)]).unwrap();
        assert!((shifted - 2.0).abs() < 1e-12);

        assert!(l1_logit_loss(&u, &[]).is_err());
    }

    #[test]
    fn sl_examples() {
        let u = t(&[1, 2], vec![1.0, 0.0]);
        let v = t(&[1, 2], vec![0.0, 1.0]);
        assert_eq!(sl_loss(&u, &u).unwrap(), 0.0);
        assert_eq!(sl_loss(&u, &v).unwrap(), 2.0);
        let a = t(&[1, 2], vec![0.7, 0.3]);
        let b = t(&[1, 2], vec![0.4, 0.6]);
        assert!((sl_loss(&a, &b).unwrap() - 0.6).abs() < 1e-12);
        // Symmetric in its arguments.
        assert_eq!(sl_loss(&a, &b).unwrap(), sl_loss(&b, &a).unwrap());
    }

    #[test]
    fn prox_examples() {
        assert_eq!(prox_regularizer(&[1.0, 2.0], &[1.0, 2.0], 3.0).unwrap(), 0.0);
        assert_eq!(prox_regularizer(&[1.0, 2.0], &[0.0, 0.0], 1.0).unwrap(), 5.0);
        assert_eq!(prox_regularizer(&[9.0, -4.0], &[1.0, 3.0], 0.0).unwrap(), 0.0);
        assert!(prox_regularizer(&[1.0], &[1.0, 2.0], 1.0).is_err());

        // Quadratic scaling: doubling the difference quadruples the value.
        let base = prox_regularizer(&[0.3, -0.7, 1.1], &[0.0, 0.0, 0.0], 2.0).unwrap();
        let scaled = prox_regularizer(&[0.6, -1.4, 2.2], &[0.0, 0.0, 0.0], 2.0).unwrap();
        assert_eq!(scaled, 4.0 * base);
    }

    #[test]
    fn prox_gradient_matches_closed_form() {
        let now = [1.0, 3.0];
        let anchor = [0.5, 4.0];
        let mut grads = [0.1, 0.2];
        add_prox_gradient(&now, &anchor, 0.5, &mut grads).unwrap();
        assert!((grads[0] - (0.1 + 2.0 * 0.5 * 0.5)).abs() < 1e-15);
        assert!((grads[1] - (0.2 + -(2.0 * 0.5))).abs() < 1e-15);
    }

    #[test]
    fn disagreement_value_matches_standalone_losses() {
        let u = t(&[2, 3], vec![0.3, -0.5, 1.2, 0.0, 0.8, -0.2]);
        let v1 = t(&[2, 3], vec![0.1, 0.4, -0.3, 0.9, -0.6, 0.5]);
        let v2 = t(&[2, 3], vec![-0.7, 0.2, 0.6, 0.3, 0.3, -1.0]);
        let vs = [v1.clone(), v2.clone()];

        let d = disagreement(LossKind::L1Logit, &u, &vs).unwrap();
        assert!((d.value - l1_logit_loss(&u, &vs).unwrap()).abs() < 1e-12);

        let up = softmax(&u);
        let mut vbar = Tensor::zeros(u.shape());
        for v in [&v1, &v2] {
            let p = softmax(v);
            for (m, x) in vbar.values_mut().iter_mut().zip(p.values()) {
                *m += 0.5 * x;
            }
        }
        let d = disagreement(LossKind::Kl, &u, &vs).unwrap();
        assert!((d.value - kl_loss(&up, &vbar).unwrap()).abs() < 1e-12);
        let d = disagreement(LossKind::Sl, &u, &vs).unwrap();
        assert!((d.value - sl_loss(&up, &vbar).unwrap()).abs() < 1e-12);
    }

    /// Logit-level finite differences for every loss kind, on both the
    /// student and the device sides.
    #[test]
    fn disagreement_gradients_match_finite_differences() {
        let u = t(&[2, 3], vec![0.31, -0.52, 1.23, 0.04, 0.85, -0.26]);
        let v1 = t(&[2, 3], vec![0.17, 0.44, -0.33, 0.92, -0.61, 0.55]);
        let v2 = t(&[2, 3], vec![-0.78, 0.29, 0.66, 0.33, 0.31, -1.04]);
        let h = 1e-6;
        for kind in LossKind::ALL {
            let vs = [v1.clone(), v2.clone()];
            let d = disagreement(kind, &u, &vs).unwrap();
            for i in 0..u.len() {
                let mut up = u.clone();
                up.values_mut()[i] += h;
                let plus = disagreement(kind, &up, &vs).unwrap().value;
                up.values_mut()[i] -= 2.0 * h;
                let minus = disagreement(kind, &up, &vs).unwrap().value;
                let numeric = (plus - minus) / (2.0 * h);
                let rel = crate::gradcheck::relative_error(d.student.values()[i], numeric);
                assert!(rel < 1e-4, "{} student grad {i}: rel {rel}", kind.name());
            }
            for k in 0..2 {
                for i in 0..v1.len() {
                    let mut vs2 = [v1.clone(), v2.clone()];
                    vs2[k].values_mut()[i] += h;
                    let plus = disagreement(kind, &u, &vs2).unwrap().value;
                    vs2[k].values_mut()[i] -= 2.0 * h;
                    let minus = disagreement(kind, &u, &vs2).unwrap().value;
                    let numeric = (plus - minus) / (2.0 * h);
                    let rel = crate::gradcheck::relative_error(d.devices[k].values()[i], numeric);
                    assert!(rel < 1e-4, "{} device {k} grad {i}: rel {rel}", kind.name());
                }
            }
        }
    }

    fn tiny_classifier(seed: u64) -> NeuralNet {
        let mut net = NeuralNet::new(
            vec![4],
            vec![
                LayerSpec::Dense { input: 4, output: 6 },
                LayerSpec::Tanh,
                LayerSpec::Dense { input: 6, output: 3 },
            ],
        )
        .unwrap();
        net.glorot_init(seed);
        net
    }

    #[test]
    fn identical_student_and_single_device_has_zero_sl_gradient() {
        let net = tiny_classifier(3);
        let clone = net.clone();
        let x = t(&[4, 4], (0..16).map(|i| (i as f64 * 0.37).sin()).collect());
        let norms = input_gradient_norms(LossKind::Sl, &net, &[&clone], &x).unwrap();
        assert!(norms.iter().all(|n| *n < 1e-9), "norms: {norms:?}");
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let student = tiny_classifier(1);
        let d1 = tiny_classifier(2);
        let d2 = tiny_classifier(7);
        let devices = [&d1, &d2];
        let x = t(&[2, 4], vec![0.21, -0.43, 0.65, 0.12, -0.77, 0.38, 0.05, -0.19]);
        let h = 1e-5;
        for kind in LossKind::ALL {
            let (_, dx) = disagreement_input_gradient(kind, &student, &devices, &x).unwrap();
            for i in 0..x.len() {
                let mut probe = x.clone();
                probe.values_mut()[i] += h;
                let plus = disagreement_input_gradient(kind, &student, &devices, &probe)
                    .unwrap()
                    .0;
                probe.values_mut()[i] -= 2.0 * h;
                let minus = disagreement_input_gradient(kind, &student, &devices, &probe)
                    .unwrap()
                    .0;
                let numeric = (plus - minus) / (2.0 * h);
                let rel = crate::gradcheck::relative_error(dx.values()[i], numeric);
                assert!(rel < 1e-3, "{} input grad {i}: rel {rel}", kind.name());
            }
        }
    }

    #[test]
    fn median_of_odd_and_even_lists() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }
}
