//! The federation protocol: round loop, device-side local training, and
//! the server's adversarial distillation update.
//!
//! One round runs four steps: sample the active devices, run local
//! training on each, upload their parameters, then run the server update
//! and download the refreshed shadow parameters back to the active
//! devices. The server update itself has two phases. Phase 1 alternates a
//! generator ascent step on the student/ensemble disagreement with a
//! global-model descent step on the same loss. Phase 2 freezes the
//! generator and distills the global model back into every device shadow
//! with a KL loss.
//!
//! Inactive devices neither train nor receive downloads in a round; their
//! server-side shadows still participate in phase 2 and re-sync to the
//! device on its next active round.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_partition, LabeledDataset, PartitionScheme};
use crate::error::{Error, Result};
use crate::loss::{
    self, add_prox_gradient, cross_entropy_with_grad, disagreement, disagreement_input_gradient,
    softmax, LossKind,
};
use crate::nn::optim::{lr_schedule, Optimizer};
use crate::nn::{Mode, NeuralNet};
use crate::tensor::Tensor;
use crate::zoo::{build_classifier, build_generator, sample_latent, GeneratorSpec};

/// Factor applied to the server and generator learning rates at the half
/// and three-quarter points of the total distillation iterations.
pub const LR_DROP: f64 = 0.3;

const SALT_GLOBAL: u64 = 1;
const SALT_GENERATOR: u64 = 2;
const SALT_DEVICE: u64 = 16;

const STREAM_SERVER: u64 = 1;
const STREAM_DIAGNOSTIC: u64 = 2;
const STREAM_DEVICE: u64 = 16;

/// Decorrelates per-role init seeds drawn from one experiment seed
/// (splitmix64 finalizer).
fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// One participating device: its private model, the anchor parameters the
/// proximal term pulls toward, and its slice of the training set.
pub struct DeviceState {
    pub id: usize,
    pub model: NeuralNet,
    /// Parameters received at the last download; the ℓ2 regularizer in
    /// local training anchors to these.
    pub anchor_params: Vec<f64>,
    /// Indices into the training dataset.
    pub local_data: Vec<usize>,
    pub optimizer: Optimizer,
    pub rng: ChaCha8Rng,
}

/// Server-side state: the global student, the generator, and one shadow
/// copy of every device model.
pub struct ServerState {
    pub global: NeuralNet,
    pub generator: NeuralNet,
    pub shadows: Vec<NeuralNet>,
    pub global_opt: Optimizer,
    pub generator_opt: Optimizer,
    pub shadow_opts: Vec<Optimizer>,
    pub rng: ChaCha8Rng,
}

/// Everything a federated run needs beyond the datasets themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    /// Communication rounds (T).
    pub rounds: usize,
    /// Local SGD epochs per round (T_l).
    pub local_epochs: usize,
    /// Phase-1 distillation iterations per round (n_G).
    pub n_g: usize,
    /// Phase-2 distillation iterations per round (n_S).
    pub n_s: usize,
    /// Device count (K).
    pub device_count: usize,
    /// Fraction of devices active per round (p).
    pub active_fraction: f64,
    /// Disagreement loss for the phase-1 minimax.
    pub loss_kind: LossKind,
    pub prox_coefficient: f64,
    pub device_lr: f64,
    pub generator_lr: f64,
    pub server_lr: f64,
    pub weight_decay: f64,
    pub device_batch: usize,
    pub distill_batch: usize,
    pub seed: u64,
    pub partition: PartitionScheme,
    /// Catalog architecture per device; length must equal `device_count`.
    pub device_models: Vec<String>,
    pub global_model: String,
    pub latent_dim: usize,
    pub generator_channels: usize,
    /// Record per-round median input-gradient norms for all loss kinds.
    pub log_gradient_norms: bool,
    pub gradnorm_batch: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            rounds: 50,
            local_epochs: 5,
            n_g: 200,
            n_s: 200,
            device_count: 5,
            active_fraction: 1.0,
            loss_kind: LossKind::Sl,
            prox_coefficient: 1.0,
            device_lr: 0.01,
            generator_lr: 0.001,
            server_lr: 0.01,
            weight_decay: 5e-4,
            device_batch: 256,
            distill_batch: 256,
            seed: 0,
            partition: PartitionScheme::Iid,
            device_models: crate::zoo::catalog_names()
                .iter()
                .map(|s| s.to_string())
                .collect(),
            global_model: "cnn-wide".to_string(),
            latent_dim: 100,
            generator_channels: 6,
            log_gradient_norms: false,
            gradnorm_batch: 256,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        fn bad(msg: String) -> Result<()> {
            Err(Error::InvalidArgument(msg))
        }
        if self.rounds == 0 || self.local_epochs == 0 || self.n_g == 0 || self.n_s == 0 {
            return bad("rounds, local_epochs, n_g and n_s must all be at least 1".into());
        }
        if self.device_count == 0 {
            return bad("device_count must be at least 1".into());
        }
        if !(self.active_fraction > 0.0 && self.active_fraction <= 1.0) {
            return bad(format!(
                "active_fraction must be in (0, 1], got {}",
                self.active_fraction
            ));
        }
        for (name, rate) in [
            ("device_lr", self.device_lr),
            ("generator_lr", self.generator_lr),
            ("server_lr", self.server_lr),
        ] {
            if !(rate > 0.0 && rate.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {rate}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.prox_coefficient >= 0.0 && self.prox_coefficient.is_finite()) {
            return bad(format!(
                "prox_coefficient must be non-negative, got {}",
                self.prox_coefficient
            ));
        }
        if self.device_batch == 0 || self.distill_batch == 0 || self.gradnorm_batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.device_models.len() != self.device_count {
            return bad(format!(
                "device_models lists {} architectures for {} devices",
                self.device_models.len(),
                self.device_count
            ));
        }
        if self.latent_dim == 0 || self.generator_channels == 0 {
            return bad("latent_dim and generator_channels must be at least 1".into());
        }
        Ok(())
    }
}

/// Per-round median input-gradient norms of the disagreement loss, one
/// per loss kind, over a generated probe batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradNormMedians {
    pub kl: f64,
    pub sl: f64,
    pub l1: f64,
}

/// Measurements taken at the end of each round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub device_accuracy: Vec<f64>,
    pub global_accuracy: f64,
    /// Mean generator objective over phase 1 (the negated disagreement).
    pub mean_loss_g: f64,
    /// Mean global-model distillation loss over phase 1.
    pub mean_loss_s: f64,
    /// Mean shadow distillation loss over phase 2.
    pub mean_loss_k: f64,
    pub grad_norm_medians: Option<GradNormMedians>,
    pub wall_clock_seconds: f64,
}

impl RoundMetrics {
    pub fn average_device_accuracy(&self) -> f64 {
        mean(&self.device_accuracy)
    }
}

/// Final states alongside the per-round metrics, for checkpointing.
pub struct FedRun {
    pub metrics: Vec<RoundMetrics>,
    pub server: ServerState,
    pub devices: Vec<DeviceState>,
}

/// One device's parameter upload.
pub struct DeviceUpload {
    pub device: usize,
    pub params: Vec<f64>,
}

/// Per-iteration losses from one server update.
#[derive(Debug)]
pub struct ServerStats {
    /// Generator objective per phase-1 iteration.
    pub loss_g: Vec<f64>,
    /// Global distillation loss per phase-1 iteration.
    pub loss_s: Vec<f64>,
    /// Shadow distillation loss per phase-2 iteration, averaged over devices.
    pub loss_k: Vec<f64>,
}

/// Arithmetic mean of the models' softmax outputs.
pub fn ensemble_predict(models: &[&NeuralNet], x: &Tensor) -> Result<Tensor> {
    if models.is_empty() {
        return Err(Error::InvalidArgument(
            "ensemble_predict needs at least one model".into(),
        ));
    }
    let mut acc: Option<Tensor> = None;
    for model in models {
        let probs = softmax(&model.forward(x)?);
        match &mut acc {
            None => acc = Some(probs),
            Some(sum) => {
                if probs.shape() != sum.shape() {
                    return Err(Error::LengthMismatch {
                        context: "ensemble_predict output shape",
                        left: sum.len(),
                        right: probs.len(),
                    });
                }
                for (a, b) in sum.values_mut().iter_mut().zip(probs.values()) {
                    *a += b;
                }
            }
        }
    }
    let mut sum = acc.expect("non-empty model list");
    let scale = 1.0 / models.len() as f64;
    for v in sum.values_mut() {
        *v *= scale;
    }
    Ok(sum)
}

/// Uniformly random active subset of size round(p·K), at least one.
pub fn sample_active_devices(
    device_count: usize,
    active_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let count = ((active_fraction * device_count as f64).round() as usize).clamp(1, device_count);
    let mut picked = rand::seq::index::sample(rng, device_count, count).into_vec();
    picked.sort_unstable();
    picked
}

/// Local training: `local_epochs` epochs of minibatch SGD on cross-entropy
/// plus the proximal pull toward `anchor_params`.
pub fn device_update(
    dev: &mut DeviceState,
    ds: &LabeledDataset,
    local_epochs: usize,
    prox_coefficient: f64,
    batch: usize,
) -> Result<()> {
    if dev.local_data.is_empty() {
        return Err(Error::Device {
            device: dev.id,
            reason: "no local samples".into(),
        });
    }
    if dev.anchor_params.len() != dev.model.param_count() {
        return Err(Error::Device {
            device: dev.id,
            reason: format!(
                "anchor length {} does not match parameter count {}",
                dev.anchor_params.len(),
                dev.model.param_count()
            ),
        });
    }
    let mut order = dev.local_data.clone();
    for _ in 0..local_epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut dev.rng);
        for chunk in order.chunks(batch) {
            let (x, labels) = ds.gather(chunk)?;
            let trace = dev.model.forward_train(&x)?;
            let (_, dlogits) = cross_entropy_with_grad(trace.output(), &labels)?;
            let mut grads = dev.model.backward(&trace, &dlogits)?.params;
            add_prox_gradient(
                dev.model.params(),
                &dev.anchor_params,
                prox_coefficient,
                &mut grads,
            )?;
            dev.optimizer.step(dev.model.params_mut(), &grads)?;
        }
    }
    Ok(())
}

/// Top-1 accuracy in evaluation mode, computed in batches.
pub fn evaluate(model: &NeuralNet, ds: &LabeledDataset) -> Result<f64> {
    const EVAL_BATCH: usize = 256;
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = ds.gather(chunk)?;
        let logits = model.forward(&x)?;
        let row_len = logits.row_len();
        for (row, &label) in logits.values().chunks(row_len).zip(&labels) {
            if loss::argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

fn install_uploads(server: &mut ServerState, uploads: &[DeviceUpload]) -> Result<()> {
    for upload in uploads {
        let shadow = server
            .shadows
            .get_mut(upload.device)
            .ok_or_else(|| Error::Device {
                device: upload.device,
                reason: format!("upload from unknown device (have {})", upload.device),
            })?;
        if upload.params.len() != shadow.param_count() {
            return Err(Error::Device {
                device: upload.device,
                reason: format!(
                    "uploaded {} parameters but the registered architecture has {}",
                    upload.params.len(),
                    shadow.param_count()
                ),
            });
        }
        shadow.params_mut().copy_from_slice(&upload.params);
    }
    Ok(())
}

/// The two-phase server update. Phase 1 alternates generator ascent and
/// global-model descent on the configured disagreement loss; phase 2
/// freezes the generator and distills the global model into every shadow
/// with a KL loss.
pub fn server_update(
    server: &mut ServerState,
    uploads: &[DeviceUpload],
    cfg: &FederationConfig,
    round: usize,
) -> Result<ServerStats> {
    install_uploads(server, uploads)?;
    let total_g = cfg.rounds * cfg.n_g;
    let total_s = cfg.rounds * cfg.n_s;
    let mut stats = ServerStats {
        loss_g: Vec::with_capacity(cfg.n_g),
        loss_s: Vec::with_capacity(cfg.n_g),
        loss_k: Vec::with_capacity(cfg.n_s),
    };

    for i in 0..cfg.n_g {
        let step = round * cfg.n_g + i;

        // Generator ascent: maximize the disagreement by descending its
        // negation through the frozen student and shadows.
        let z = sample_latent(cfg.distill_batch, cfg.latent_dim, &mut server.rng)?;
        let gen_trace = server.generator.forward_train(&z)?;
        let shadows: Vec<&NeuralNet> = server.shadows.iter().collect();
        let (value, dx) =
            disagreement_input_gradient(cfg.loss_kind, &server.global, &shadows, gen_trace.output())?;
        let neg_dx = Tensor::from_values(
            dx.shape(),
            dx.values().iter().map(|v| -v).collect(),
        )?;
        let gen_grads = server.generator.backward(&gen_trace, &neg_dx)?;
        server.generator_opt.learning_rate = lr_schedule(cfg.generator_lr, step, total_g, LR_DROP);
        server
            .generator_opt
            .step(server.generator.params_mut(), &gen_grads.params)?;
        stats.loss_g.push(-value);

        // Global descent on a fresh batch from the updated generator.
        let z = sample_latent(cfg.distill_batch, cfg.latent_dim, &mut server.rng)?;
        let x = server
            .generator
            .forward_traced(&z, Mode::Train)?
            .output()
            .clone();
        let trace = server.global.forward_train(&x)?;
        let device_logits: Vec<Tensor> = server
            .shadows
            .iter()
            .map(|s| s.forward(&x))
            .collect::<Result<Vec<_>>>()?;
        let d = disagreement(cfg.loss_kind, trace.output(), &device_logits)?;
        let grads = server.global.backward(&trace, &d.student)?;
        server.global_opt.learning_rate = lr_schedule(cfg.server_lr, step, total_g, LR_DROP);
        server.global_opt.step(server.global.params_mut(), &grads.params)?;
        stats.loss_s.push(d.value);
    }

    for i in 0..cfg.n_s {
        let step = round * cfg.n_s + i;
        let lr = lr_schedule(cfg.server_lr, step, total_s, LR_DROP);
        let z = sample_latent(cfg.distill_batch, cfg.latent_dim, &mut server.rng)?;
        let x = server
            .generator
            .forward_traced(&z, Mode::Train)?
            .output()
            .clone();
        let teacher_logits = server.global.forward(&x)?;
        let mut iter_loss = 0.0;
        for (shadow, opt) in server.shadows.iter_mut().zip(&mut server.shadow_opts) {
            let trace = shadow.forward_train(&x)?;
            let d = disagreement(LossKind::Kl, &teacher_logits, &[trace.output().clone()])?;
            let grads = shadow.backward(&trace, &d.devices[0])?;
            opt.learning_rate = lr;
            opt.step(shadow.params_mut(), &grads.params)?;
            iter_loss += d.value;
        }
        stats.loss_k.push(iter_loss / server.shadows.len() as f64);
    }

    Ok(stats)
}

fn image_shape3(ds: &LabeledDataset) -> Result<[usize; 3]> {
    let shape = ds.image_shape();
    Ok([shape[0], shape[1], shape[2]])
}

fn check_dataset_pair(train: &LabeledDataset, test: &LabeledDataset) -> Result<()> {
    if train.image_shape() != test.image_shape() {
        return Err(Error::InvalidArgument(format!(
            "train images are {:?} but test images are {:?}",
            train.image_shape(),
            test.image_shape()
        )));
    }
    if train.classes() != test.classes() {
        return Err(Error::InvalidArgument(format!(
            "train has {} classes but test has {}",
            train.classes(),
            test.classes()
        )));
    }
    Ok(())
}

fn build_devices(
    cfg: &FederationConfig,
    train: &LabeledDataset,
    assignments: &[Vec<usize>],
) -> Result<Vec<DeviceState>> {
    let shape = image_shape3(train)?;
    let mut devices = Vec::with_capacity(cfg.device_count);
    for (k, name) in cfg.device_models.iter().enumerate() {
        if assignments[k].is_empty() {
            return Err(Error::Device {
                device: k,
                reason: format!("partition {:?} assigned no samples", cfg.partition),
            });
        }
        let model = build_classifier(
            name,
            &shape,
            train.classes(),
            derive_seed(cfg.seed, SALT_DEVICE + k as u64),
        )?;
        let optimizer = Optimizer::sgd(cfg.device_lr, cfg.weight_decay, model.param_count());
        devices.push(DeviceState {
            id: k,
            anchor_params: model.params().to_vec(),
            local_data: assignments[k].clone(),
            optimizer,
            rng: stream_rng(cfg.seed, STREAM_DEVICE + k as u64),
            model,
        });
    }
    Ok(devices)
}

fn build_server(cfg: &FederationConfig, train: &LabeledDataset, devices: &[DeviceState]) -> Result<ServerState> {
    let shape = image_shape3(train)?;
    let global = build_classifier(
        &cfg.global_model,
        &shape,
        train.classes(),
        derive_seed(cfg.seed, SALT_GLOBAL),
    )?;
    let generator = build_generator(
        &GeneratorSpec {
            latent_dim: cfg.latent_dim,
            output_shape: shape,
            base_channels: cfg.generator_channels,
        },
        derive_seed(cfg.seed, SALT_GENERATOR),
    )?;
    let shadows: Vec<NeuralNet> = devices.iter().map(|d| d.model.clone()).collect();
    let shadow_opts = shadows
        .iter()
        .map(|s| Optimizer::sgd(cfg.server_lr, cfg.weight_decay, s.param_count()))
        .collect();
    Ok(ServerState {
        global_opt: Optimizer::sgd(cfg.server_lr, cfg.weight_decay, global.param_count()),
        generator_opt: Optimizer::adam(cfg.generator_lr, 0.0, generator.param_count()),
        shadow_opts,
        rng: stream_rng(cfg.seed, STREAM_SERVER),
        global,
        generator,
        shadows,
    })
}

fn gradient_norm_medians(
    server: &ServerState,
    cfg: &FederationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GradNormMedians> {
    let z = sample_latent(cfg.gradnorm_batch, cfg.latent_dim, rng)?;
    let x = server
        .generator
        .forward_traced(&z, Mode::Train)?
        .output()
        .clone();
    let shadows: Vec<&NeuralNet> = server.shadows.iter().collect();
    let mut out = [0.0; 3];
    for (slot, kind) in out.iter_mut().zip(LossKind::ALL) {
        let mut norms = loss::input_gradient_norms(kind, &server.global, &shadows, &x)?;
        // The loss is batch-mean reduced; rescale to per-sample norms.
        for n in &mut norms {
            *n *= cfg.gradnorm_batch as f64;
        }
        *slot = loss::median(&norms);
    }
    Ok(GradNormMedians {
        kl: out[0],
        sl: out[1],
        l1: out[2],
    })
}

/// Runs the full protocol for `cfg.rounds` rounds and returns the metrics
/// stream plus final states.
pub fn run_fedzkt(
    cfg: &FederationConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<FedRun> {
    cfg.validate()?;
    check_dataset_pair(train, test)?;
    let plan = make_partition(train, &cfg.partition, cfg.device_count, cfg.seed)?;
    let mut devices = build_devices(cfg, train, &plan.assignments)?;
    let mut server = build_server(cfg, train, &devices)?;
    let mut diag_rng = stream_rng(cfg.seed, STREAM_DIAGNOSTIC);

    let mut metrics = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let started = Instant::now();
        let actives = sample_active_devices(cfg.device_count, cfg.active_fraction, &mut server.rng);

        for &k in &actives {
            device_update(
                &mut devices[k],
                train,
                cfg.local_epochs,
                cfg.prox_coefficient,
                cfg.device_batch,
            )
            .map_err(|e| e.in_round(round))?;
        }

        let uploads: Vec<DeviceUpload> = actives
            .iter()
            .map(|&k| DeviceUpload {
                device: k,
                params: devices[k].model.params().to_vec(),
            })
            .collect();
        let stats = server_update(&mut server, &uploads, cfg, round).map_err(|e| e.in_round(round))?;

        for &k in &actives {
            let shadow = &server.shadows[k];
            devices[k].model.params_mut().copy_from_slice(shadow.params());
            devices[k].model.state_mut().copy_from_slice(shadow.state());
            devices[k].anchor_params.copy_from_slice(shadow.params());
        }

        let mut device_accuracy = Vec::with_capacity(cfg.device_count);
        for dev in &devices {
            device_accuracy.push(evaluate(&dev.model, test).map_err(|e| e.in_round(round))?);
        }
        let global_accuracy = evaluate(&server.global, test).map_err(|e| e.in_round(round))?;
        let grad_norm_medians = if cfg.log_gradient_norms {
            Some(gradient_norm_medians(&server, cfg, &mut diag_rng).map_err(|e| e.in_round(round))?)
        } else {
            None
        };

        metrics.push(RoundMetrics {
            round,
            device_accuracy,
            global_accuracy,
            mean_loss_g: mean(&stats.loss_g),
            mean_loss_s: mean(&stats.loss_s),
            mean_loss_k: mean(&stats.loss_k),
            grad_norm_medians,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        });
    }

    Ok(FedRun {
        metrics,
        server,
        devices,
    })
}

/// KL from fixed target probabilities to the row softmax of `logits`,
/// batch-mean reduced, with the logit gradient.
fn soft_target_kl(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    if logits.shape() != targets.shape() {
        return Err(Error::LengthMismatch {
            context: "soft_target_kl",
            left: logits.len(),
            right: targets.len(),
        });
    }
    let batch = logits.batch() as f64;
    let probs = softmax(logits);
    let mut value = 0.0;
    for (&t, &p) in targets.values().iter().zip(probs.values()) {
        if t > 0.0 {
            value += t * (t / p.max(1e-12)).ln();
        }
    }
    let grad = Tensor::from_values(
        logits.shape(),
        probs
            .values()
            .iter()
            .zip(targets.values())
            .map(|(&p, &t)| (p - t) / batch)
            .collect(),
    )?;
    Ok((value / batch, grad))
}

/// Data-dependent baseline: devices train locally, publish softmax scores
/// on a fixed public batch, and distill toward the averaged consensus.
/// The global-accuracy column reports the average device accuracy since
/// this baseline has no global model.
pub fn run_fedmd_baseline(
    cfg: &FederationConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    public: &LabeledDataset,
) -> Result<Vec<RoundMetrics>> {
    cfg.validate()?;
    check_dataset_pair(train, test)?;
    if public.image_shape() != train.image_shape() {
        return Err(Error::InvalidArgument(format!(
            "public images are {:?} but device inputs are {:?}",
            public.image_shape(),
            train.image_shape()
        )));
    }
    let plan = make_partition(train, &cfg.partition, cfg.device_count, cfg.seed)?;
    let mut devices = build_devices(cfg, train, &plan.assignments)?;
    let mut rng = stream_rng(cfg.seed, STREAM_SERVER);

    let public_count = cfg.distill_batch.min(public.len());
    let mut public_indices = rand::seq::index::sample(&mut rng, public.len(), public_count).into_vec();
    public_indices.sort_unstable();
    let (x_public, _) = public.gather(&public_indices)?;

    let mut metrics = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let started = Instant::now();
        let actives = sample_active_devices(cfg.device_count, cfg.active_fraction, &mut rng);

        for &k in &actives {
            device_update(&mut devices[k], train, cfg.local_epochs, 0.0, cfg.device_batch)
                .map_err(|e| e.in_round(round))?;
        }

        let active_models: Vec<&NeuralNet> = actives.iter().map(|&k| &devices[k].model).collect();
        let consensus = ensemble_predict(&active_models, &x_public).map_err(|e| e.in_round(round))?;

        let mut distill_losses = Vec::with_capacity(actives.len() * cfg.n_s);
        for &k in &actives {
            let dev = &mut devices[k];
            for _ in 0..cfg.n_s {
                let trace = dev.model.forward_train(&x_public)?;
                let (value, dlogits) = soft_target_kl(trace.output(), &consensus)?;
                let grads = dev.model.backward(&trace, &dlogits)?;
                dev.optimizer.step(dev.model.params_mut(), &grads.params)?;
                distill_losses.push(value);
            }
        }

        let mut device_accuracy = Vec::with_capacity(cfg.device_count);
        for dev in &devices {
            device_accuracy.push(evaluate(&dev.model, test).map_err(|e| e.in_round(round))?);
        }
        let average = mean(&device_accuracy);
        metrics.push(RoundMetrics {
            round,
            device_accuracy,
            global_accuracy: average,
            mean_loss_g: 0.0,
            mean_loss_s: 0.0,
            mean_loss_k: mean(&distill_losses),
            grad_norm_medians: None,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(metrics)
}
