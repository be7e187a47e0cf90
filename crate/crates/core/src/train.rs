//! Two-update training loop: an identification update followed by a
//! within-sample invariance update on the same pairs.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{append_provenance, corrupt, draw_augmentation, make_pair, AugmentMode, AugmentPolicy, NoiseBank, PairSample, PairSource};
use crate::error::{Error, Result};
use crate::eval::Utterance;
use crate::features::{logmel, FbankConfig, FeatureMatrix};
use crate::losses::{mse_within, within_batch, WithinLoss};
use crate::nn::{features_to_batch, HeadKind, NetConfig, Network, ParamStore, Real};
use crate::rng::SeedKey;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier applied at every milestone.
    pub lr_decay: f64,
    /// Milestones as fractions of `epochs`; decay starts at epoch
    /// `round(fraction * epochs)` (0-based).
    pub lr_milestones: Vec<f64>,
    pub head: HeadKind,
    pub within: WithinLoss,
    pub alpha: f64,
    pub mode: AugmentMode,
    pub augment: AugmentPolicy,
    /// Training crop length in frames (`0` trains on whole utterances).
    pub crop_frames: usize,
    pub offline_copies: usize,
    pub lambda_start: f64,
    pub lambda_min: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 16,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay: 0.1,
            lr_milestones: vec![0.6, 0.8],
            head: HeadKind::Softmax,
            within: WithinLoss::None,
            alpha: 1.0,
            mode: AugmentMode::Online,
            augment: AugmentPolicy::default(),
            crop_frames: 100,
            offline_copies: 1,
            lambda_start: 1000.0,
            lambda_min: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.epochs == 0 || self.batch_size < 2 {
            return bad("epochs must be positive and batch_size at least 2");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("need lr > 0, momentum in [0, 1) and weight_decay >= 0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("lr_decay must be in (0, 1] and milestones in [0, 1]");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be nonnegative");
        }
        if self.within != WithinLoss::None && self.mode == AugmentMode::Clean {
            return bad("a within-sample loss needs clean/noisy pairs; use offline or online augmentation");
        }
        if self.offline_copies == 0 {
            return bad("offline_copies must be at least 1");
        }
        if !(self.lambda_start >= self.lambda_min && self.lambda_min >= 0.0) {
            return bad("need lambda_start >= lambda_min >= 0");
        }
        self.augment.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| epoch >= (m * self.epochs as f64).round() as usize).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }

    /// A-softmax annealing weight, decaying geometrically from
    /// `lambda_start` to `lambda_min` over the run.
    pub fn lambda_at(&self, step: usize, total_steps: usize) -> f64 {
        if total_steps <= 1 {
            return self.lambda_min;
        }
        let t = (step as f64 / (total_steps - 1) as f64).min(1.0);
        if self.lambda_min == 0.0 {
            // geometric decay cannot reach zero; fall back to linear
            return self.lambda_start * (1.0 - t);
        }
        self.lambda_start * (self.lambda_min / self.lambda_start).powf(t)
    }

    pub fn crop(&self) -> Option<usize> {
        (self.crop_frames > 0).then_some(self.crop_frames)
    }
}

/// `v <- momentum v + grad + weight_decay param; param <- param - lr v`.
pub fn sgd_update<T: Real>(param: &mut [T], grad: &[T], velocity: &mut [T], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::Shape(format!("sgd: {} params, {} grads, {} velocities", param.len(), grad.len(), velocity.len())));
    }
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD over the trainable parameters of a store.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
    pub applications: usize,
}

impl<T: Real> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: store.entries().iter().map(|p| vec![T::zero(); if p.trainable { p.tensor.numel() } else { 0 }]).collect(),
            applications: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for (p, v) in store.entries_mut().iter_mut().zip(self.velocity.iter_mut()) {
            if !p.trainable {
                continue;
            }
            let t = &mut p.tensor;
            let grad = t.grad.take().unwrap_or_else(|| vec![T::zero(); t.data.len()]);
            let r = sgd_update(&mut t.data, &grad, v, lr, self.momentum, self.weight_decay);
            t.grad = Some(grad);
            r?;
        }
        self.applications += 1;
        Ok(())
    }
}

/// Separate optimizer state for the two updates of a step. Weight decay is
/// applied once per step, by the identification update.
#[derive(Debug, Clone)]
pub struct Optimizers<T> {
    pub identification: Sgd<T>,
    pub within: Sgd<T>,
}

impl<T: Real> Optimizers<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        Optimizers { identification: Sgd::new(store, momentum, weight_decay), within: Sgd::new(store, momentum, 0.0) }
    }

    pub fn applications(&self) -> usize {
        self.identification.applications + self.within.applications
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepMetrics {
    pub id_loss: f64,
    pub within_loss: Option<f64>,
    pub optimizer_steps: usize,
}

/// Per-step inputs besides the batch.
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    pub lr: f64,
    pub lambda: f64,
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
}

fn diagnostic(batch: &[PairSample], ctx: &StepContext, what: &str) -> Error {
    let utts: Vec<String> = batch
        .iter()
        .map(|p| format!("{}[{:?}@{:?}]", p.provenance.utt_id, p.provenance.noise_type, p.provenance.snr_db))
        .collect();
    Error::NonFinite(format!(
        "{what} at epoch {} step {} (lr {}, lambda {}); batch: {}",
        ctx.epoch,
        ctx.step,
        ctx.lr,
        ctx.lambda,
        utts.join(", ")
    ))
}

/// One training step: the identification update, then (when configured)
/// the within-sample update computed from a fresh forward pass through the
/// updated parameters.
pub fn train_step(net: &mut Network<f32>, opt: &mut Optimizers<f32>, batch: &[PairSample], cfg: &TrainConfig, ctx: &StepContext) -> Result<StepMetrics> {
    if batch.len() < 2 {
        return Err(Error::Train("a batch needs at least two utterances".into()));
    }
    let paired = cfg.mode != AugmentMode::Clean;
    let views: Vec<&FeatureMatrix> = if paired {
        batch.iter().map(|p| &p.clean).chain(batch.iter().map(|p| &p.noisy)).collect()
    } else {
        batch.iter().map(|p| &p.clean).collect()
    };
    let labels: Vec<usize> = views.iter().enumerate().map(|(i, _)| batch[i % batch.len()].speaker_index).collect();
    let x = features_to_batch::<f32>(&views)?;

    // update 1: identification loss on every view
    let (emb, tape) = net.forward_train(&x).map_err(|_| diagnostic(batch, ctx, "embeddings"))?;
    net.update_running_stats(&tape);
    net.params.zero_grads();
    let mut drop_rng = SeedKey::new("dropout").u64(ctx.seed).u64(ctx.epoch as u64).u64(ctx.step as u64).stream();
    let (id_loss, d_emb) = net.head_loss(&emb, &labels, Some(&mut drop_rng), ctx.lambda)?;
    if !id_loss.is_finite() {
        return Err(diagnostic(batch, ctx, "identification loss"));
    }
    net.backward(&tape, &d_emb)?;
    if net.params.entries().iter().any(|p| p.tensor.grad.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
        return Err(diagnostic(batch, ctx, "identification gradient"));
    }
    opt.identification.step(&mut net.params, ctx.lr)?;
    net.renormalize_class_weights();
    let mut metrics = StepMetrics { id_loss, within_loss: None, optimizer_steps: 1 };

    if cfg.within == WithinLoss::None {
        return Ok(metrics);
    }
    // update 2: re-forward the same pairs through the updated network
    let (emb, tape) = net.forward_train(&x).map_err(|_| diagnostic(batch, ctx, "embeddings"))?;
    let half = emb.len() / 2;
    let loss = within_batch(cfg.within, &emb[..half], &emb[half..], net.config.embedding_dim)?;
    let value = loss.value as f64;
    if !value.is_finite() {
        return Err(diagnostic(batch, ctx, "within-sample loss"));
    }
    metrics.within_loss = Some(value);
    if value == 0.0 || cfg.alpha == 0.0 {
        return Ok(metrics);
    }
    let a = cfg.alpha as f32;
    let d: Vec<f32> = loss.grads[0].iter().chain(&loss.grads[1]).map(|g| a * g).collect();
    net.params.zero_grads();
    net.backward(&tape, &d)?;
    opt.within.step(&mut net.params, ctx.lr)?;
    net.renormalize_class_weights();
    metrics.optimizer_steps = 2;
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub id_loss: f64,
    pub within_loss: Option<f64>,
    pub lr: f64,
    pub wall_time_s: f64,
    pub reference_mse: Option<f64>,
}

/// `epoch,id_loss,within_loss,lr,reference_mse`; wall time is left out so
/// logs of identical runs compare equal byte for byte.
pub fn write_epoch_logs(logs: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    let mut body = String::from("epoch,id_loss,within_loss,lr,reference_mse\n");
    for l in logs {
        body.push_str(&format!("{},{:?},{},{:?},{}\n", l.epoch, l.id_loss, opt(l.within_loss), l.lr, opt(l.reference_mse)));
    }
    let path = path.as_ref();
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_epoch_logs(path: impl AsRef<Path>) -> Result<Vec<EpochLog>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let perr = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(perr(format!("expected 5 columns, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| perr(format!("'{s}': {e}")));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        out.push(EpochLog {
            epoch: f[0].parse().map_err(|e| perr(format!("epoch: {e}")))?,
            id_loss: num(f[1])?,
            within_loss: opt(f[2])?,
            lr: num(f[3])?,
            wall_time_s: 0.0,
            reference_mse: opt(f[4])?,
        });
    }
    Ok(out)
}

/// Fixed clean/noisy feature pairs for measuring embedding invariance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairedSet {
    pub pairs: Vec<(FeatureMatrix, FeatureMatrix)>,
}

impl PairedSet {
    /// Each utterance is corrupted once by a policy draw from `bank`,
    /// seeded by `(seed, utt_id)`.
    pub fn build(utterances: &[Utterance], bank: &NoiseBank, policy: &AugmentPolicy, fbank: &FbankConfig, seed: u64) -> Result<Self> {
        let pairs = utterances
            .par_iter()
            .map(|(utt, _, wave)| {
                let mut rng = SeedKey::new("paired-set").u64(seed).str(utt).stream();
                let draw = draw_augmentation(policy, bank, &mut rng)?;
                let (noisy, _) = corrupt(wave, bank, &draw, &mut rng)?;
                Ok((logmel(wave, fbank)?, logmel(&noisy, fbank)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PairedSet { pairs })
    }
}

/// Mean within-sample MSE between eval-mode embeddings of each pair.
pub fn reference_mse<T: Real>(net: &Network<T>, set: &PairedSet) -> Result<f64> {
    if set.pairs.is_empty() {
        return Err(Error::Train("empty paired set".into()));
    }
    let values = set
        .pairs
        .par_iter()
        .map(|(c, n)| {
            let ec = net.forward_eval(&features_to_batch::<T>(&[c])?)?;
            let en = net.forward_eval(&features_to_batch::<T>(&[n])?)?;
            Ok(mse_within(&ec, &en)?.value.f64())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network<f32>,
    pub logs: Vec<EpochLog>,
}

/// Optional side outputs of a run.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainHooks<'a> {
    /// Appends every pair's provenance as JSON lines.
    pub provenance_log: Option<&'a Path>,
    /// Measured at the end of every epoch.
    pub reference: Option<&'a PairedSet>,
    pub verbose: bool,
}

/// Trains a fresh network on `src`. Output is a pure function of the
/// configuration and seed; the thread count does not change it.
pub fn run_training(src: &PairSource, net_cfg: &NetConfig, cfg: &TrainConfig, hooks: TrainHooks<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net_cfg = NetConfig { head: cfg.head, n_classes: src.speakers.len(), n_mels: src.fbank.n_mels, ..net_cfg.clone() };
    let mut net = Network::<f32>::new(net_cfg, cfg.seed)?;
    net.renormalize_class_weights();
    let mut opt = Optimizers::new(&net.params, cfg.momentum, cfg.weight_decay);
    let n = src.items.len();
    if n < 2 {
        return Err(Error::Train("need at least two training utterances".into()));
    }
    let bs = cfg.batch_size.min(n);
    let steps_per_epoch = n / bs;
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut global = 0usize;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut SeedKey::new("shuffle").u64(cfg.seed).u64(epoch as u64).stream());
        let (mut id_sum, mut within_sum, mut within_n) = (0.0, 0.0, 0usize);
        for step in 0..steps_per_epoch {
            let idx = &order[step * bs..(step + 1) * bs];
            let batch = idx
                .par_iter()
                .map(|&i| make_pair(src, &src.items[i].utt_id, epoch, step, &cfg.augment, cfg.mode, cfg.seed))
                .collect::<Result<Vec<_>>>()?;
            if let Some(path) = hooks.provenance_log {
                append_provenance(batch.iter().map(|p| &p.provenance), path)?;
            }
            let ctx = StepContext { lr, lambda: cfg.lambda_at(global, total_steps), seed: cfg.seed, epoch, step };
            let m = train_step(&mut net, &mut opt, &batch, cfg, &ctx)?;
            id_sum += m.id_loss;
            if let Some(w) = m.within_loss {
                within_sum += w;
                within_n += 1;
            }
            global += 1;
        }
        let reference_mse = match hooks.reference {
            Some(set) => Some(reference_mse(&net, set)?),
            None => None,
        };
        let log = EpochLog {
            epoch,
            id_loss: id_sum / steps_per_epoch as f64,
            within_loss: (within_n > 0).then(|| within_sum / within_n as f64),
            lr,
            wall_time_s: start.elapsed().as_secs_f64(),
            reference_mse,
        };
        if hooks.verbose {
            eprintln!(
                "epoch {:>3}  id {:.4}  within {}  lr {:.4}  {:.1}s",
                log.epoch,
                log.id_loss,
                log.within_loss.map(|w| format!("{w:.5}")).unwrap_or_else(|| "-".into()),
                log.lr,
                log.wall_time_s
            );
        }
        logs.push(log);
    }
    Ok(TrainOutcome { net, logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::tests::toy_source;

    #[test]
    fn sgd_examples() {
        let mut p = vec![1.0f64, -2.0];
        let mut v = vec![0.0; 2];
        sgd_update(&mut p, &[0.5, 1.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p, vec![1.0 - 0.05, -2.0 - 0.1]);
        let mut q = vec![3.0f64];
        let mut w = vec![0.0];
        sgd_update(&mut q, &[0.0], &mut w, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(q, vec![3.0]);
        assert!(sgd_update(&mut q, &[0.0, 1.0], &mut w, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn sgd_two_step_recurrence() {
        let (lr, mu, wd) = (0.1, 0.9, 1e-2);
        let (g1, g2) = (0.3, -0.7);
        let mut p = vec![2.0f64];
        let mut v = vec![0.0];
        sgd_update(&mut p, &[g1], &mut v, lr, mu, wd).unwrap();
        sgd_update(&mut p, &[g2], &mut v, lr, mu, wd).unwrap();
        let v1 = g1 + wd * 2.0;
        let p1 = 2.0 - lr * v1;
        let v2 = mu * v1 + g2 + wd * p1;
        let p2 = p1 - lr * v2;
        assert_eq!(p[0], p2);
        assert_eq!(v[0], v2);
    }

    #[test]
    fn schedules() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.1);
        assert_eq!(cfg.lr_at(8), 0.1);
        assert!((cfg.lr_at(9) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(12) - 0.001).abs() < 1e-15);
        assert_eq!(cfg.lambda_at(0, 100), 1000.0);
        assert!((cfg.lambda_at(99, 100) - 5.0).abs() < 1e-9);
        assert!(cfg.lambda_at(50, 100) < 1000.0 && cfg.lambda_at(50, 100) > 5.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { within: WithinLoss::Mse, mode: AugmentMode::Clean, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { alpha: -1.0, ..Default::default() }.validate().is_err());
    }

    fn tiny_net(n_classes: usize, head: HeadKind) -> Network<f32> {
        let cfg = NetConfig { stage_channels: vec![2, 4], stage_blocks: vec![1, 1], embedding_dim: 8, head, ..NetConfig::desk(n_classes) };
        Network::new(cfg, 3).unwrap()
    }

    fn batch(cfg: &TrainConfig, epoch: usize) -> (PairSource, Vec<PairSample>) {
        let src = toy_source(Some(20));
        let b = src.items.iter().map(|it| make_pair(&src, &it.utt_id, epoch, 0, &cfg.augment, cfg.mode, 1).unwrap()).collect();
        (src, b)
    }

    fn ctx() -> StepContext {
        StepContext { lr: 0.05, lambda: 10.0, seed: 1, epoch: 0, step: 0 }
    }

    #[test]
    fn step_counts_optimizer_applications() {
        for (within, expected) in [(WithinLoss::None, 1), (WithinLoss::Mse, 2), (WithinLoss::Cosine, 2)] {
            let cfg = TrainConfig { within, ..Default::default() };
            let (_, b) = batch(&cfg, 0);
            let mut net = tiny_net(2, HeadKind::Softmax);
            let mut opt = Optimizers::new(&net.params, 0.9, 1e-4);
            let m = train_step(&mut net, &mut opt, &b, &cfg, &ctx()).unwrap();
            assert_eq!(m.optimizer_steps, expected);
            assert_eq!(opt.applications(), expected);
            assert_eq!(m.within_loss.is_some(), within != WithinLoss::None);
        }
    }

    #[test]
    fn second_update_moves_parameters() {
        let cfg = TrainConfig { within: WithinLoss::Mse, ..Default::default() };
        let (_, b) = batch(&cfg, 0);
        let mut a = tiny_net(2, HeadKind::Softmax);
        let mut opt_a = Optimizers::new(&a.params, 0.9, 1e-4);
        let mut only_id = a.clone();
        let mut opt_b = Optimizers::new(&only_id.params, 0.9, 1e-4);
        train_step(&mut a, &mut opt_a, &b, &cfg, &ctx()).unwrap();
        train_step(&mut only_id, &mut opt_b, &b, &TrainConfig { within: WithinLoss::None, ..cfg.clone() }, &ctx()).unwrap();
        assert_ne!(a.params.flat_values(), only_id.params.flat_values());
    }

    #[test]
    fn alpha_zero_second_update_is_a_no_op() {
        let cfg = TrainConfig { within: WithinLoss::Mse, alpha: 0.0, ..Default::default() };
        let (_, b) = batch(&cfg, 0);
        let mut a = tiny_net(2, HeadKind::Softmax);
        let mut opt_a = Optimizers::new(&a.params, 0.9, 1e-4);
        let mut r = a.clone();
        let mut opt_r = Optimizers::new(&r.params, 0.9, 1e-4);
        let m = train_step(&mut a, &mut opt_a, &b, &cfg, &ctx()).unwrap();
        assert_eq!(m.optimizer_steps, 1);
        train_step(&mut r, &mut opt_r, &b, &TrainConfig { within: WithinLoss::None, ..cfg.clone() }, &ctx()).unwrap();
        assert_eq!(a.params.flat_values(), r.params.flat_values());
    }

    #[test]
    fn identical_views_skip_the_second_update() {
        let cfg = TrainConfig { within: WithinLoss::Mse, ..Default::default() };
        let (_, mut b) = batch(&cfg, 0);
        for p in b.iter_mut() {
            p.noisy = p.clean.clone();
        }
        let mut net = tiny_net(2, HeadKind::Softmax);
        let mut opt = Optimizers::new(&net.params, 0.9, 1e-4);
        let m = train_step(&mut net, &mut opt, &b, &cfg, &ctx()).unwrap();
        assert_eq!(m.within_loss, Some(0.0));
        assert_eq!(m.optimizer_steps, 1);
    }

    #[test]
    fn a_softmax_head_trains() {
        let cfg = TrainConfig { head: HeadKind::ASoftmax, within: WithinLoss::Cosine, ..Default::default() };
        let (_, b) = batch(&cfg, 0);
        let mut net = tiny_net(2, HeadKind::ASoftmax);
        let mut opt = Optimizers::new(&net.params, 0.9, 1e-4);
        let m = train_step(&mut net, &mut opt, &b, &cfg, &ctx()).unwrap();
        assert!(m.id_loss.is_finite());
        assert!(net.params.entries().iter().all(|p| p.tensor.all_finite()));
    }

    #[test]
    fn epoch_log_round_trip() {
        let logs = vec![
            EpochLog { epoch: 0, id_loss: 2.5, within_loss: Some(0.125), lr: 0.1, wall_time_s: 3.0, reference_mse: None },
            EpochLog { epoch: 1, id_loss: 1.5, within_loss: None, lr: 0.01, wall_time_s: 2.0, reference_mse: Some(0.3) },
        ];
        let dir = tempfile::tempdir().unwrap();
        write_epoch_logs(&logs, dir.path().join("log.csv")).unwrap();
        let back = read_epoch_logs(dir.path().join("log.csv")).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].within_loss, Some(0.125));
        assert_eq!(back[1].reference_mse, Some(0.3));
        assert_eq!(back[1].wall_time_s, 0.0);
    }

    #[test]
    fn short_run_is_deterministic_and_reference_is_stable() {
        let src = toy_source(Some(20));
        let net_cfg = NetConfig { stage_channels: vec![2, 4], stage_blocks: vec![1, 1], embedding_dim: 8, ..NetConfig::desk(2) };
        let cfg = TrainConfig { epochs: 2, batch_size: 2, within: WithinLoss::Mse, ..Default::default() };
        let utts: Vec<Utterance> = src.items.iter().map(|i| (i.utt_id.clone(), String::new(), i.waveform.clone())).collect();
        let set = PairedSet::build(&utts, &src.bank, &cfg.augment, &src.fbank, 4).unwrap();
        let hooks = TrainHooks { reference: Some(&set), ..Default::default() };
        let a = run_training(&src, &net_cfg, &cfg, hooks).unwrap();
        let b = run_training(&src, &net_cfg, &cfg, hooks).unwrap();
        assert_eq!(a.net.params, b.net.params);
        assert_eq!(a.logs.len(), 2);
        for (x, y) in a.logs.iter().zip(&b.logs) {
            assert_eq!((x.id_loss, x.within_loss, x.reference_mse), (y.id_loss, y.within_loss, y.reference_mse));
            assert!(x.id_loss.is_finite());
        }
        assert_eq!(reference_mse(&a.net, &set).unwrap(), reference_mse(&a.net, &set).unwrap());
        let clean_pairs = PairedSet { pairs: set.pairs.iter().map(|(c, _)| (c.clone(), c.clone())).collect() };
        assert_eq!(reference_mse(&a.net, &clean_pairs).unwrap(), 0.0);
    }
}
