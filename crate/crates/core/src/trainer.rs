//! Training loops: the rain-removal network (L1 − λ·SSIM objective) and the
//! universal flow generator (minimizing SSIM-based attack loss through the
//! frozen rain-removal network).

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, PairedSample};
use crate::metrics::{self, SsimParams};
use crate::nets::{DerainNet, Generator};
use crate::nn::{Grads, ModelParams, Tensor};
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::seeds;
use crate::warp::{self, FlowField, FlowMapping};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DerainHyper {
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// SSIM weight in the objective.
    pub lambda: f64,
    pub seed: u64,
}

impl DerainHyper {
    /// Table values of the reference setup (100 epochs, batch 16).
    pub fn paper() -> Self {
        DerainHyper {
            learning_rate: 1e-3,
            min_learning_rate: 1e-5,
            epochs: 100,
            batch_size: 16,
            lambda: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_learning_rate > 0.0 && self.learning_rate >= self.min_learning_rate) {
            return Err(Error::Config(format!(
                "derain learning rates must satisfy lr >= min_lr > 0 (got {} / {})",
                self.learning_rate, self.min_learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("derain batch size must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("derain lambda must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for DerainHyper {
    /// Desk-scale defaults: Table learning rates, 50 epochs.
    fn default() -> Self {
        DerainHyper {
            epochs: 50,
            ..Self::paper()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Decoupled weight-decay coefficient.
    pub l2_weight: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Weight of the SSIM-to-background term in the attack loss.
    pub phi: f64,
    /// Seed of the fixed noise used to export the universal flow.
    pub canonical_z_seed: u64,
    pub seed: u64,
    pub mapping: FlowMapping,
    /// Maximum displacement in pixels for the centered mapping.
    pub budget_eps: f64,
}

impl AttackHyper {
    /// Table values of the reference setup (200 epochs, batch 100).
    pub fn paper() -> Self {
        AttackHyper {
            learning_rate: 0.01,
            epochs: 200,
            batch_size: 100,
            l2_weight: 1e-3,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            phi: 1.0,
            canonical_z_seed: 0,
            seed: 0,
            mapping: FlowMapping::Centered,
            budget_eps: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning rate", self.learning_rate),
            ("budget", self.budget_eps),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::Config(format!("attack {name} must be positive, got {v}")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("attack batch size must be >= 1".into()));
        }
        if !(self.l2_weight >= 0.0 && self.phi >= 0.0) {
            return Err(Error::Config("attack l2 weight and phi must be non-negative".into()));
        }
        for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("attack {name} must lie in (0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

impl Default for AttackHyper {
    /// Desk-scale defaults: Table optimizer settings, 50 epochs of batch 16.
    fn default() -> Self {
        AttackHyper {
            epochs: 50,
            batch_size: 16,
            ..Self::paper()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean training objective over the epoch's samples.
    pub loss: f64,
    /// Mean SSIM against the clean background on the probe set (NaN without one).
    pub probe_ssim: f64,
    /// Objective on the probe set (attack runs: with the canonical flow).
    #[serde(skip)]
    pub probe_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// CSV with columns `epoch,loss,probe_ssim,seconds`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Numeric(e.to_string()))?;
        }
        if self.records.is_empty() {
            w.write_record(["epoch", "loss", "probe_ssim", "seconds"])
                .map_err(|e| Error::Numeric(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("train log", e))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }
}

fn check_dataset<T: Scalar>(dataset: &[PairedSample<T>], h: Option<usize>, w: Option<usize>) -> Result<(usize, usize)> {
    let first = dataset.first().ok_or(Error::EmptyDataset)?;
    let (h, w) = (h.unwrap_or(first.height()), w.unwrap_or(first.width()));
    if let Some(s) = dataset.iter().find(|s| s.height() != h || s.width() != w) {
        return Err(Error::Geometry(format!(
            "sample {} is {}x{}, expected {h}x{w}",
            s.id,
            s.height(),
            s.width()
        )));
    }
    Ok((h, w))
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(seed, &format!("epoch-{epoch}")));
    order
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} is {v}")))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Mean rain-removal objective over `samples` and its parameter gradient.
pub fn derain_objective_grad<T: Scalar>(
    net: &DerainNet,
    params: &ModelParams<T>,
    samples: &[&PairedSample<T>],
    lambda: f64,
    ssim: &SsimParams,
) -> Result<(f64, Grads<T>)> {
    let lam = T::lit(lambda);
    let parts: Vec<(T, Grads<T>)> = samples
        .par_iter()
        .map(|s| {
            let (pred, trace) = net.forward_traced(params, &s.observation)?;
            let (loss, g) = metrics::derain_loss_grad(&pred, &s.background, lam, ssim)?;
            let mut grads = params.zeros_like();
            net.backward(params, &trace, &g, Some(&mut grads), false);
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l.as_f64();
        total.add(g);
    }
    let n = samples.len().max(1) as f64;
    total.scale(T::lit(1.0 / n));
    Ok((loss / n, total))
}

pub fn derain_objective<T: Scalar>(
    net: &DerainNet,
    params: &ModelParams<T>,
    samples: &[&PairedSample<T>],
    lambda: f64,
    ssim: &SsimParams,
) -> Result<f64> {
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let pred = net.forward(params, &s.observation)?;
            Ok(metrics::derain_loss(&pred, &s.background, T::lit(lambda), ssim)?.as_f64())
        })
        .collect::<Result<_>>()?;
    Ok(mean(losses.into_iter()))
}

/// Mean SSIM between the network's output and the clean background.
pub fn mean_restoration_ssim<T: Scalar>(
    net: &DerainNet,
    params: &ModelParams<T>,
    samples: &[PairedSample<T>],
    ssim: &SsimParams,
) -> Result<f64> {
    let v: Vec<f64> = samples
        .par_iter()
        .map(|s| Ok(metrics::ssim(&net.forward(params, &s.observation)?, &s.background, ssim)?.as_f64()))
        .collect::<Result<_>>()?;
    Ok(mean(v.into_iter()))
}

pub fn train_derain<T: Scalar>(
    net: &DerainNet,
    dataset: &[PairedSample<T>],
    probe: &[PairedSample<T>],
    hyper: &DerainHyper,
    ssim: &SsimParams,
) -> Result<(ModelParams<T>, TrainLog)> {
    train_derain_with(net, dataset, probe, hyper, ssim, |_, _| Ok(()))
}

/// [`train_derain`] calling `observer` after every epoch (logging,
/// checkpoints).
pub fn train_derain_with<T: Scalar>(
    net: &DerainNet,
    dataset: &[PairedSample<T>],
    probe: &[PairedSample<T>],
    hyper: &DerainHyper,
    ssim: &SsimParams,
    mut observer: impl FnMut(&EpochRecord, &ModelParams<T>) -> Result<()>,
) -> Result<(ModelParams<T>, TrainLog)> {
    hyper.validate()?;
    ssim.validate()?;
    check_dataset(dataset, None, None)?;
    let mut params = net.init(seeds::derive_seed(hyper.seed, "derain-init"));
    let mut opt = Adam::new(AdamConfig::default(), &params);
    let steps_per_epoch = dataset.len().div_ceil(hyper.batch_size);
    let total = hyper.epochs * steps_per_epoch;
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..hyper.epochs {
        let start = Instant::now();
        let order = epoch_order(dataset.len(), hyper.seed, epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let samples: Vec<&PairedSample<T>> = batch.iter().map(|&i| &dataset[i]).collect();
            let (loss, grads) = derain_objective_grad(net, &params, &samples, hyper.lambda, ssim)?;
            finite(loss, "derain loss")?;
            loss_sum += loss * samples.len() as f64;
            let lr = cosine_lr(hyper.learning_rate, hyper.min_learning_rate, step, total);
            opt.step(&mut params, &grads, lr);
            step += 1;
        }
        if !params.all_finite() {
            return Err(Error::Numeric("derain weights became non-finite".into()));
        }
        let probe_ssim = if probe.is_empty() {
            f64::NAN
        } else {
            mean_restoration_ssim(net, &params, probe, ssim)?
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / dataset.len() as f64,
            probe_ssim,
            probe_loss: f64::NAN,
            seconds: start.elapsed().as_secs_f64(),
        };
        observer(&record, &params)?;
        log.records.push(record);
    }
    Ok((params, log))
}

/// One training sample for the attack: observation, the frozen network's
/// output on it, and the clean background.
#[derive(Clone, Debug)]
pub struct AttackSample<T> {
    pub observation: Image<T>,
    pub restored: Image<T>,
    pub background: Image<T>,
}

/// Runs the frozen network over every observation once.
pub fn prepare_attack_samples<T: Scalar>(
    net: &DerainNet,
    theta: &ModelParams<T>,
    dataset: &[PairedSample<T>],
) -> Result<Vec<AttackSample<T>>> {
    dataset
        .par_iter()
        .map(|s| {
            Ok(AttackSample {
                observation: s.observation.clone(),
                restored: net.forward(theta, &s.observation)?,
                background: s.background.clone(),
            })
        })
        .collect()
}

/// Mean attack loss of `flow` over `samples` and its gradient w.r.t. the
/// raw flow values.
pub fn attack_loss_for_flow<T: Scalar>(
    net: &DerainNet,
    theta: &ModelParams<T>,
    flow: &FlowField<T>,
    samples: &[&AttackSample<T>],
    phi: f64,
    ssim: &SsimParams,
    want_grad: bool,
) -> Result<(f64, Vec<T>)> {
    let phi = T::lit(phi);
    let parts: Vec<(T, Vec<T>)> = samples
        .par_iter()
        .map(|s| {
            let adv = warp::spatial_transform(&s.observation, flow)?;
            if !want_grad {
                let pred = net.forward(theta, &adv)?;
                let loss = metrics::attack_loss(&pred, &s.restored, &s.background, phi, ssim)?;
                return Ok((loss, Vec::new()));
            }
            let (pred, trace) = net.forward_traced(theta, &adv)?;
            let (loss, g) = metrics::attack_loss_grad(&pred, &s.restored, &s.background, phi, ssim)?;
            let g_adv = net.backward(theta, &trace, &g, None, true).expect("input gradient requested");
            let wg = warp::spatial_transform_backward(&s.observation, flow, &g_adv)?;
            Ok((loss, wg.raw))
        })
        .collect::<Result<_>>()?;
    let n = samples.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = if want_grad { vec![T::zero(); flow.raw().len()] } else { Vec::new() };
    for (l, g) in &parts {
        loss += l.as_f64();
        for (a, &b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let inv = T::lit(1.0 / n);
    for a in &mut grad {
        *a *= inv;
    }
    Ok((loss / n, grad))
}

/// End-to-end attack objective for generator weights `gen_params` and noise
/// `z`, and its gradient w.r.t. the generator weights.
#[allow(clippy::too_many_arguments)]
pub fn attack_objective_grad<T: Scalar>(
    gen: &Generator,
    gen_params: &ModelParams<T>,
    z: &Tensor<T>,
    net: &DerainNet,
    theta: &ModelParams<T>,
    samples: &[&AttackSample<T>],
    hyper: &AttackHyper,
    ssim: &SsimParams,
) -> Result<(f64, Grads<T>)> {
    let (raw, trace) = gen.forward_traced(gen_params, z)?;
    let cfg = gen.config();
    let flow = FlowField::new(cfg.height, cfg.width, raw, hyper.mapping, T::lit(hyper.budget_eps))?;
    let (loss, g_raw) = attack_loss_for_flow(net, theta, &flow, samples, hyper.phi, ssim, true)?;
    let mut grads = gen_params.zeros_like();
    gen.backward(gen_params, &trace, &g_raw, &mut grads);
    Ok((loss, grads))
}

pub fn attack_objective<T: Scalar>(
    gen: &Generator,
    gen_params: &ModelParams<T>,
    z: &Tensor<T>,
    net: &DerainNet,
    theta: &ModelParams<T>,
    samples: &[&AttackSample<T>],
    hyper: &AttackHyper,
    ssim: &SsimParams,
) -> Result<f64> {
    let flow = flow_from_noise(gen, gen_params, z, hyper)?;
    Ok(attack_loss_for_flow(net, theta, &flow, samples, hyper.phi, ssim, false)?.0)
}

fn flow_from_noise<T: Scalar>(gen: &Generator, params: &ModelParams<T>, z: &Tensor<T>, hyper: &AttackHyper) -> Result<FlowField<T>> {
    let raw = gen.forward(params, z)?;
    let cfg = gen.config();
    FlowField::new(cfg.height, cfg.width, raw, hyper.mapping, T::lit(hyper.budget_eps))
}

/// The deterministic noise the universal flow is exported from.
pub fn canonical_noise<T: Scalar>(gen: &Generator, hyper: &AttackHyper) -> Tensor<T> {
    gen.sample_noise(&mut seeds::rng(hyper.canonical_z_seed, "canonical-z"))
}

/// Evaluates the generator on the canonical noise.
pub fn export_universal_flow<T: Scalar>(gen: &Generator, params: &ModelParams<T>, hyper: &AttackHyper) -> Result<FlowField<T>> {
    flow_from_noise(gen, params, &canonical_noise(gen, hyper), hyper)
}

pub fn train_attack<T: Scalar>(
    gen: &Generator,
    net: &DerainNet,
    theta: &ModelParams<T>,
    dataset: &[PairedSample<T>],
    probe: &[PairedSample<T>],
    hyper: &AttackHyper,
    ssim: &SsimParams,
) -> Result<(ModelParams<T>, TrainLog)> {
    train_attack_with(gen, net, theta, dataset, probe, hyper, ssim, |_, _| Ok(()))
}

/// Universal attack training: per minibatch, fresh standard-normal noise is
/// mapped to a flow, every observation in the batch is warped by it, and the
/// generator takes an Adam step on the mean attack loss. `theta` is only
/// read.
#[allow(clippy::too_many_arguments)]
pub fn train_attack_with<T: Scalar>(
    gen: &Generator,
    net: &DerainNet,
    theta: &ModelParams<T>,
    dataset: &[PairedSample<T>],
    probe: &[PairedSample<T>],
    hyper: &AttackHyper,
    ssim: &SsimParams,
    mut observer: impl FnMut(&EpochRecord, &ModelParams<T>) -> Result<()>,
) -> Result<(ModelParams<T>, TrainLog)> {
    hyper.validate()?;
    ssim.validate()?;
    net.check_params(theta)?;
    let cfg = gen.config();
    check_dataset(dataset, Some(cfg.height), Some(cfg.width))?;
    if !probe.is_empty() {
        check_dataset(probe, Some(cfg.height), Some(cfg.width))?;
    }
    let samples = prepare_attack_samples(net, theta, dataset)?;
    let probe_samples = prepare_attack_samples(net, theta, probe)?;
    let probe_refs: Vec<&AttackSample<T>> = probe_samples.iter().collect();

    let mut params = gen.init(seeds::derive_seed(hyper.seed, "generator-init"));
    let mut opt = Adam::new(
        AdamConfig {
            beta1: hyper.adam_beta1,
            beta2: hyper.adam_beta2,
            eps: 1e-8,
            weight_decay: hyper.l2_weight,
        },
        &params,
    );
    let mut noise_rng = seeds::rng(hyper.seed, "noise");
    let mut log = TrainLog::default();
    for epoch in 0..hyper.epochs {
        let start = Instant::now();
        let order = epoch_order(samples.len(), hyper.seed, epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let z = gen.sample_noise(&mut noise_rng);
            let refs: Vec<&AttackSample<T>> = batch.iter().map(|&i| &samples[i]).collect();
            let (loss, grads) = attack_objective_grad(gen, &params, &z, net, theta, &refs, hyper, ssim)?;
            finite(loss, "attack loss")?;
            loss_sum += loss * refs.len() as f64;
            opt.step(&mut params, &grads, hyper.learning_rate);
        }
        if !params.all_finite() {
            return Err(Error::Numeric("generator weights became non-finite".into()));
        }
        let (probe_ssim, probe_loss) = if probe_refs.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let flow = export_universal_flow(gen, &params, hyper)?;
            let loss = attack_loss_for_flow(net, theta, &flow, &probe_refs, hyper.phi, ssim, false)?.0;
            let s: Vec<f64> = probe_refs
                .par_iter()
                .map(|s| {
                    let adv = warp::spatial_transform(&s.observation, &flow)?;
                    Ok(metrics::ssim(&net.forward(theta, &adv)?, &s.background, ssim)?.as_f64())
                })
                .collect::<Result<_>>()?;
            (mean(s.into_iter()), loss)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / samples.len() as f64,
            probe_ssim,
            probe_loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        observer(&record, &params)?;
        log.records.push(record);
    }
    Ok((params, log))
}
