//! Training loop: ADAM, learning-rate schedules, gradient clipping,
//! early stopping, per-epoch history and best-checkpoint tracking.
//!
//! One training step: gather the batch, run the graph forward in train
//! mode on a fresh tape, record the masked objective, replay backward,
//! clip, apply ADAM, and blend batchnorm batch statistics into the
//! running buffers. Shuffling, initialization and everything else draw
//! from counter-based streams, so a `(config, seed)` pair reproduces the
//! run bit for bit.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

#[allow(unused_imports)]
use num_traits::Float as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, Tape};
use crate::graph::{
    bn_mean_key, bn_var_key, forward_on_tape, register_params, ArchSpec, ParamStore, BN_MOMENTUM,
};
use crate::loss::{argmax_labels, f1_score, pearson, LossCfg};
use crate::rng::StreamRng;
use crate::tensor::{Element, LabelMap, PixelMask, Tensor4};
use crate::{Error, Result};

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

/// Optimizer selection (ADAM is the only implemented family).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

/// Per-epoch learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scheduler {
    #[default]
    None,
    Step {
        period: usize,
        factor: f64,
    },
    Cosine {
        min_lr: f64,
    },
}

/// Stop when the best validation loss has not improved by `min_delta`
/// for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
}

/// Full training-run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub scheduler: Scheduler,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop: Option<EarlyStop>,
    pub loss: LossCfg,
    pub seed: u64,
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<TrainConfig> {
        serde_json::from_str(text)
            .map_err(|e| Error::config(format!("cannot parse train config: {e}")))
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::config("learning_rate must be >= 0"));
        }
        let Optimizer::Adam { beta1, beta2, .. } = self.optimizer;
        if !(0.0 < beta1 && beta1 < 1.0 && 0.0 < beta2 && beta2 < 1.0) {
            return Err(Error::config("adam betas must lie strictly in (0, 1)"));
        }
        if let Scheduler::Step { period, .. } = self.scheduler {
            if period == 0 {
                return Err(Error::config("scheduler period must be >= 1"));
            }
        }
        if let Some(clip) = self.clip_norm {
            if clip <= 0.0 {
                return Err(Error::config("clip_norm must be positive"));
            }
        }
        if let Some(es) = &self.early_stop {
            if es.patience == 0 {
                return Err(Error::config("early_stop patience must be >= 1"));
            }
        }
        Ok(())
    }
}

/// First/second moment estimates per parameter plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }
}

/// One ADAM update over every trainable parameter.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Element>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor4<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - num_traits::Float::powi(beta1, t);
    let bc2 = 1.0 - num_traits::Float::powi(beta2, t);
    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
    let one = T::one();
    let lr_t = T::from_f64(lr);
    let eps_t = T::from_f64(eps);
    let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
    for (key, p) in params.params.iter_mut() {
        let g = grads
            .get(key)
            .ok_or_else(|| Error::dim(format!("missing gradient for {key}")))?;
        if g.shape() != p.shape() {
            return Err(Error::dim(format!(
                "gradient shape {:?} != parameter shape {:?} for {key}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state
            .m
            .entry(key.clone())
            .or_insert_with(|| vec![T::zero(); p.numel()]);
        let v = state
            .v
            .entry(key.clone())
            .or_insert_with(|| vec![T::zero(); p.numel()]);
        for ((pv, &gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv = *pv - lr_t * m_hat / (v_hat.sqrt() + eps_t);
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm<T: Element>(
    grads: &mut BTreeMap<String, Tensor4<T>>,
    max_norm: f64,
) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &v in g.iter() {
            let f = v.to_f64();
            sq += f * f;
        }
    }
    let norm = num_traits::Float::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

/// Learning rate for a 0-based epoch index under the given schedule.
pub fn lr_at(scheduler: &Scheduler, base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    match *scheduler {
        Scheduler::None => base_lr,
        Scheduler::Step { period, factor } => {
            base_lr * num_traits::Float::powi(factor, (epoch / period.max(1)) as i32)
        }
        Scheduler::Cosine { min_lr } => {
            if total_epochs == 0 {
                return base_lr;
            }
            let frac = (epoch.min(total_epochs)) as f64 / total_epochs as f64;
            min_lr
                + 0.5 * (base_lr - min_lr) * (1.0 + num_traits::Float::cos(core::f64::consts::PI * frac))
        }
    }
}

/// Early-stopping rule over the validation-loss trajectory: improvements
/// are measured against the best loss seen so far.
pub fn should_stop(val_losses: &[f64], patience: usize, min_delta: f64) -> bool {
    let mut best = f64::INFINITY;
    let mut since_improvement = 0usize;
    for &loss in val_losses {
        if loss < best && best - loss >= min_delta {
            best = loss;
            since_improvement = 0;
        } else {
            since_improvement += 1;
        }
    }
    since_improvement >= patience
}

/// Wall-clock source; the core stays clock-agnostic.
pub trait Clock {
    fn now_secs(&self) -> f64;
}

/// Clock that always reads zero (deterministic tests, `no_std`).
pub struct NullClock;

impl Clock for NullClock {
    fn now_secs(&self) -> f64 {
        0.0
    }
}

/// Training target: integer class labels (optionally masked) or a
/// same-shape regression tensor.
pub enum Target<'a, T: Element> {
    Labels {
        labels: &'a LabelMap,
        mask: Option<&'a PixelMask>,
    },
    Tensor(&'a Tensor4<T>),
}

/// Images plus their target.
pub struct DataSet<'a, T: Element> {
    pub images: &'a Tensor4<T>,
    pub target: Target<'a, T>,
}

/// One epoch row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub metric: f64,
    pub lr: f64,
    pub wall_secs: f64,
}

/// Per-epoch trajectories plus the best epoch index (1-based).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    /// CSV rendering: `epoch,train_loss,val_loss,metric,lr`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,metric,lr\n");
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_loss, r.metric, r.lr
            ));
        }
        s
    }
}

/// Everything a finished run produces.
#[derive(Debug)]
pub struct TrainOutcome<T: Element> {
    pub history: TrainHistory,
    pub final_params: ParamStore<T>,
    pub best_params: ParamStore<T>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn gather_target<'a, T: Element>(
    target: &Target<'a, T>,
    indices: &[usize],
) -> Result<OwnedTarget<T>> {
    Ok(match target {
        Target::Labels { labels, mask } => OwnedTarget::Labels {
            labels: labels.gather_batch(indices)?,
            mask: mask.map(|m| m.gather_batch(indices)).transpose()?,
        },
        Target::Tensor(t) => OwnedTarget::Tensor(t.gather_batch(indices)?),
    })
}

enum OwnedTarget<T: Element> {
    Labels {
        labels: LabelMap,
        mask: Option<PixelMask>,
    },
    Tensor(Tensor4<T>),
}

/// Batch index plan: sequential chunks of `order`; when the trailing
/// chunk would hold a single item and batchnorm is in play, it is merged
/// into its predecessor.
fn plan_batches(order: &[usize], batch_size: usize, merge_singleton_tail: bool) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if merge_singleton_tail && batches.len() >= 2 && batches.last().map_or(0, |b| b.len()) == 1 {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

fn check_compat<T: Element>(spec: &ArchSpec, cfg: &TrainConfig, data: &DataSet<T>) -> Result<()> {
    match (&data.target, cfg.loss.is_classification()) {
        (Target::Labels { labels, .. }, true) => {
            if let Some(max) = labels.max_class() {
                if max as usize >= spec.c_out {
                    return Err(Error::dim(format!(
                        "labels contain class {max} but the network has {} outputs",
                        spec.c_out
                    )));
                }
            }
            Ok(())
        }
        (Target::Tensor(t), false) => {
            if t.shape() != data.images.shape() && t.channels() != spec.c_out {
                return Err(Error::dim("regression target shape mismatch"));
            }
            Ok(())
        }
        (Target::Labels { .. }, false) => Err(Error::config(
            "mse objective needs a tensor target, got labels",
        )),
        (Target::Tensor(_), true) => Err(Error::config(
            "classification objective needs labels, got a tensor target",
        )),
    }
}

/// Forward pass over `images` in batches, returning raw network output
/// (or softmax probabilities when `softmax` is set).
pub fn predict<T: Element>(
    spec: &ArchSpec,
    store: &ParamStore<T>,
    images: &Tensor4<T>,
    batch_size: usize,
    softmax: bool,
) -> Result<Tensor4<T>> {
    let n = images.batch();
    let mut out: Option<Tensor4<T>> = None;
    let mut frozen = store.clone();
    for t in frozen.params.values_mut() {
        t.requires_grad = false;
    }
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = images.gather_batch(chunk)?;
        let mut tape = Tape::new();
        let vars = register_params(&mut tape, &frozen);
        let input = tape.leaf(batch);
        let trace = forward_on_tape(&mut tape, spec, &vars, &frozen.buffers, input, BnMode::Eval)?;
        let y = if softmax {
            tape.softmax_channels(trace.output)
        } else {
            trace.output
        };
        let value = tape.value(y);
        match &mut out {
            None => {
                let [_, c, h, w] = value.shape();
                let mut full = Tensor4::zeros([n, c, h, w]);
                full.data_mut()[..value.numel()].copy_from_slice(value.data());
                out = Some(full);
            }
            Some(full) => {
                let [_, c, h, w] = full.shape();
                let offset = chunk[0] * c * h * w;
                full.data_mut()[offset..offset + value.numel()].copy_from_slice(value.data());
            }
        }
    }
    out.ok_or_else(|| Error::usage("predict on an empty image set"))
}

/// Loss and metric of a parameter store on a dataset, in eval mode.
/// The metric is macro F1 for classification and Pearson correlation for
/// regression.
pub fn evaluate<T: Element>(
    spec: &ArchSpec,
    store: &ParamStore<T>,
    data: &DataSet<T>,
    loss_cfg: &LossCfg,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let n = data.images.batch();
    if n == 0 {
        return Err(Error::usage("evaluate on an empty dataset"));
    }
    let mut frozen = store.clone();
    for t in frozen.params.values_mut() {
        t.requires_grad = false;
    }
    let indices: Vec<usize> = (0..n).collect();
    let mut loss_sum = 0.0f64;
    let mut weight_sum = 0.0f64;
    let mut pred_all: Vec<f64> = Vec::new();
    let mut tgt_all: Vec<f64> = Vec::new();
    let mut pred_labels: Vec<i32> = Vec::new();
    for chunk in indices.chunks(batch_size.max(1)) {
        let images = data.images.gather_batch(chunk)?;
        let target = gather_target(&data.target, chunk)?;
        let mut tape = Tape::new();
        let vars = register_params(&mut tape, &frozen);
        let input = tape.leaf(images);
        let trace = forward_on_tape(&mut tape, spec, &vars, &frozen.buffers, input, BnMode::Eval)?;
        let loss_var = match &target {
            OwnedTarget::Labels { labels, mask } => {
                cfgd_loss(&mut tape, loss_cfg, trace.output, labels, mask.as_ref())?
            }
            OwnedTarget::Tensor(t) => tape.mse_loss(trace.output, t, None)?,
        };
        let l = tape.value(loss_var).item()?.to_f64();
        loss_sum += l * chunk.len() as f64;
        weight_sum += chunk.len() as f64;
        match &target {
            OwnedTarget::Labels { .. } => {
                let probs = tape.softmax_channels(trace.output);
                pred_labels.extend(argmax_labels(tape.value(probs)).data());
            }
            OwnedTarget::Tensor(t) => {
                pred_all.extend(tape.value(trace.output).iter().map(|&v| v.to_f64()));
                tgt_all.extend(t.iter().map(|&v| v.to_f64()));
            }
        }
    }
    let loss = loss_sum / weight_sum;
    let metric = match &data.target {
        Target::Labels { labels, mask } => {
            let [_, h, w] = labels.shape();
            let pred = LabelMap::new([n, h, w], pred_labels)?;
            f1_score(&pred, labels, *mask, spec.c_out)?.macro_f1
        }
        Target::Tensor(_) => pearson(&pred_all, &tgt_all).unwrap_or(0.0),
    };
    Ok((loss, metric))
}

fn cfgd_loss<T: Element>(
    tape: &mut Tape<T>,
    cfg: &LossCfg,
    logits: crate::autodiff::VarId,
    labels: &LabelMap,
    mask: Option<&PixelMask>,
) -> Result<crate::autodiff::VarId> {
    cfg.apply_class_loss(tape, logits, labels, mask)
}

/// Runs the full training loop, returning history plus final and
/// best-validation parameter snapshots.
pub fn train<T: Element>(
    spec: &ArchSpec,
    store: ParamStore<T>,
    train_set: &DataSet<T>,
    val_set: &DataSet<T>,
    cfg: &TrainConfig,
    clock: &dyn Clock,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    spec.ensure_valid()?;
    check_compat(spec, cfg, train_set)?;
    check_compat(spec, cfg, val_set)?;
    let n_train = train_set.images.batch();
    if n_train == 0 {
        return Err(Error::usage("training set is empty"));
    }
    let has_bn = spec.any_batchnorm();
    let Optimizer::Adam { beta1, beta2, eps } = cfg.optimizer;

    let mut store = store;
    let mut adam = AdamState::<T>::new();
    let mut history = TrainHistory::default();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = store.clone();
    let mut val_losses: Vec<f64> = Vec::new();

    for epoch in 1..=cfg.epochs {
        let epoch_start = clock.now_secs();
        let lr = lr_at(&cfg.scheduler, cfg.learning_rate, epoch - 1, cfg.epochs);
        let mut order: Vec<usize> = (0..n_train).collect();
        StreamRng::keyed(cfg.seed, "shuffle", epoch as u64).shuffle(&mut order);
        let batches = plan_batches(&order, cfg.batch_size, has_bn);

        let mut train_loss_sum = 0.0f64;
        let mut train_weight = 0.0f64;
        for (batch_idx, batch) in batches.iter().enumerate() {
            let images = train_set.images.gather_batch(batch)?;
            let target = gather_target(&train_set.target, batch)?;
            let mut tape = Tape::new();
            let vars = register_params(&mut tape, &store);
            let input = tape.leaf(images);
            let trace =
                forward_on_tape(&mut tape, spec, &vars, &store.buffers, input, BnMode::Train)?;
            let with_diag = |e: Error| match e {
                Error::Numeric(m) => Error::numeric(format!(
                    "{m} (epoch {epoch}, batch {batch_idx}, lr {lr})"
                )),
                other => other,
            };
            let loss_var = match &target {
                OwnedTarget::Labels { labels, mask } => {
                    cfgd_loss(&mut tape, &cfg.loss, trace.output, labels, mask.as_ref())
                        .map_err(with_diag)?
                }
                OwnedTarget::Tensor(t) => {
                    tape.mse_loss(trace.output, t, None).map_err(with_diag)?
                }
            };
            let loss_value = tape.value(loss_var).item()?.to_f64();
            if !loss_value.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss {loss_value} (epoch {epoch}, batch {batch_idx}, lr {lr})"
                )));
            }
            train_loss_sum += loss_value * batch.len() as f64;
            train_weight += batch.len() as f64;

            tape.backward(loss_var)?;
            let mut grads: BTreeMap<String, Tensor4<T>> = BTreeMap::new();
            for (key, &var) in &vars.vars {
                let (_, grad) = tape.take(var);
                let grad = grad
                    .ok_or_else(|| Error::numeric(format!("no gradient produced for {key}")))?;
                grads.insert(key.clone(), grad);
            }
            if let Some(max_norm) = cfg.clip_norm {
                clip_grad_norm(&mut grads, max_norm);
            }
            adam_step(&mut store, &grads, &mut adam, lr, beta1, beta2, eps)?;

            // blend batch statistics into the running buffers
            let momentum = T::from_f64(BN_MOMENTUM);
            let keep = T::one() - momentum;
            for hook in &trace.bn_hooks {
                let (mean, var) = tape
                    .bn_batch_stats(hook.op)
                    .expect("train-mode batchnorm records stats");
                let mean = mean.to_vec();
                let var = var.to_vec();
                let rm = store
                    .buffers
                    .get_mut(&bn_mean_key(hook.node))
                    .expect("buffer exists");
                for (r, &m) in rm.data_mut().iter_mut().zip(mean.iter()) {
                    *r = keep * *r + momentum * m;
                }
                let rv = store
                    .buffers
                    .get_mut(&bn_var_key(hook.node))
                    .expect("buffer exists");
                for (r, &v) in rv.data_mut().iter_mut().zip(var.iter()) {
                    *r = keep * *r + momentum * v;
                }
            }
        }

        let (val_loss, metric) = evaluate(spec, &store, val_set, &cfg.loss, cfg.batch_size)?;
        val_losses.push(val_loss);
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = store.clone();
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: train_loss_sum / train_weight,
            val_loss,
            metric,
            lr,
            wall_secs: clock.now_secs() - epoch_start,
        });
        if let Some(es) = &cfg.early_stop {
            if should_stop(&val_losses, es.patience, es.min_delta) {
                break;
            }
        }
    }
    history.best_epoch = best_epoch;
    Ok(TrainOutcome {
        history,
        final_params: store,
        best_params,
        best_epoch,
        best_val_loss: best_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builders::{build_msdnet, BuilderConfig, MsdConfig};
    use crate::graph::{node_bias_key, weight_key, Aggregation, ArchMeta, EdgeSpec, NodeSpec};

    fn linear_spec() -> ArchSpec {
        // I -> O via a single 1x1 conv: y = w*x + b
        ArchSpec {
            nodes: vec![
                NodeSpec {
                    index: 0,
                    channels: 1,
                    aggregation: Aggregation::Sum,
                    post_ops: vec![],
                },
                NodeSpec {
                    index: 1,
                    channels: 1,
                    aggregation: Aggregation::Sum,
                    post_ops: vec![],
                },
            ],
            edges: vec![EdgeSpec::conv(0, 1, 1, 1, 1)],
            c_in: 1,
            c_out: 1,
            metadata: ArchMeta {
                config: BuilderConfig::Msdnet(MsdConfig {
                    depth: 1,
                    max_dilation: Some(1),
                    custom_dilations: None,
                    width: 1,
                    c_in: 1,
                    c_out: 1,
                }),
                latent_node: None,
            },
        }
    }

    fn scalar_grads(value: f32) -> BTreeMap<String, Tensor4<f32>> {
        let mut grads = BTreeMap::new();
        grads.insert("p".into(), Tensor4::full([1, 1, 1, 1], value));
        grads
    }

    fn scalar_params(value: f32) -> ParamStore<f32> {
        let mut params = BTreeMap::new();
        params.insert("p".into(), Tensor4::full([1, 1, 1, 1], value).with_grad());
        ParamStore {
            params,
            buffers: BTreeMap::new(),
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut store = scalar_params(1.5);
        let mut state = AdamState::new();
        adam_step(&mut store, &scalar_grads(0.0), &mut state, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(store.params["p"].data(), &[1.5]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_first_step_plugin_value() {
        // bias corrections cancel at t=1 for a constant gradient:
        // p <- 1 - 0.1 * 1/(1 + 1e-8)
        let mut store = scalar_params(1.0);
        let mut state = AdamState::new();
        adam_step(&mut store, &scalar_grads(1.0), &mut state, 0.1, 0.9, 0.999, 1e-8).unwrap();
        let got = store.params["p"].data()[0];
        assert!((got - 0.9).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn adam_descends_quadratic_and_matches_independent_simulation() {
        // f(p) = p^2, grad 2p, from p=1 with lr 0.05
        let mut store = scalar_params(1.0);
        let mut state = AdamState::new();
        // independent scalar re-implementation
        let (b1, b2, eps, lr) = (0.9f64, 0.999, 1e-8, 0.05);
        let mut sim_p = 1.0f64;
        let mut sim_m = 0.0f64;
        let mut sim_v = 0.0f64;
        for t in 1..=50 {
            let g = 2.0 * store.params["p"].data()[0] as f64;
            adam_step(
                &mut store,
                &scalar_grads(g as f32),
                &mut state,
                lr,
                b1,
                b2,
                eps,
            )
            .unwrap();
            let sg = 2.0 * sim_p;
            sim_m = b1 * sim_m + (1.0 - b1) * sg;
            sim_v = b2 * sim_v + (1.0 - b2) * sg * sg;
            let mh = sim_m / (1.0 - b1.powi(t));
            let vh = sim_v / (1.0 - b2.powi(t));
            sim_p -= lr * mh / (vh.sqrt() + eps);
        }
        let got = store.params["p"].data()[0] as f64;
        assert!(got.abs() < 0.5, "|p| = {got}");
        assert!((got - sim_p).abs() < 1e-4, "{got} vs {sim_p}");
    }

    #[test]
    fn lr_schedules() {
        assert_eq!(lr_at(&Scheduler::None, 0.3, 7, 10), 0.3);
        let step = Scheduler::Step {
            period: 2,
            factor: 0.1,
        };
        assert!((lr_at(&step, 1.0, 4, 10) - 0.01).abs() < 1e-12);
        assert!((lr_at(&step, 1.0, 0, 10) - 1.0).abs() < 1e-12);
        let cosine = Scheduler::Cosine { min_lr: 0.001 };
        assert!((lr_at(&cosine, 1.0, 0, 10) - 1.0).abs() < 1e-12);
        assert!((lr_at(&cosine, 1.0, 10, 10) - 0.001).abs() < 1e-12);
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        // two grads of 6 and 8: norm 10
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor4::<f32>::full([1, 1, 1, 1], 6.0));
        grads.insert("b".to_string(), Tensor4::<f32>::full([1, 1, 1, 1], 8.0));
        let pre = clip_grad_norm(&mut grads, 5.0);
        assert!((pre - 10.0).abs() < 1e-6);
        assert!((grads["a"].data()[0] - 3.0).abs() < 1e-6);
        assert!((grads["b"].data()[0] - 4.0).abs() < 1e-6);

        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor4::<f32>::full([1, 1, 1, 1], 3.0));
        let pre = clip_grad_norm(&mut grads, 5.0);
        assert!((pre - 3.0).abs() < 1e-6);
        assert_eq!(grads["a"].data(), &[3.0]);
    }

    #[test]
    fn clip_post_norm_never_exceeds_threshold() {
        let mut rng = crate::rng::StreamRng::new(8, "clip");
        for case in 0..20 {
            let mut grads = BTreeMap::new();
            for k in 0..3 {
                grads.insert(
                    format!("g{k}"),
                    Tensor4::<f64>::random_uniform([1, 2, 3, 3], -5.0, 5.0, &mut rng),
                );
            }
            clip_grad_norm(&mut grads, 2.5);
            let mut sq = 0.0;
            for g in grads.values() {
                for &v in g.iter() {
                    sq += v * v;
                }
            }
            assert!(sq.sqrt() <= 2.5 + 1e-6, "case {case}");
        }
    }

    #[test]
    fn early_stopping_cases() {
        // strictly decreasing: never stops
        let losses: Vec<f64> = (0..10).map(|i| 1.0 - 0.05 * i as f64).collect();
        assert!(!should_stop(&losses, 3, 1e-4));
        // constant: stops once patience epochs passed without improvement
        assert!(!should_stop(&[1.0, 1.0, 1.0], 3, 1e-4));
        assert!(should_stop(&[1.0, 1.0, 1.0, 1.0], 3, 1e-4));
        // sawtooth improving every other epoch by 2*min_delta: never stops
        let delta = 0.01;
        let saw = [1.0, 1.0, 1.0 - 2.0 * delta, 1.0 - 2.0 * delta, 1.0 - 4.0 * delta];
        assert!(!should_stop(&saw, 2, delta));
    }

    #[test]
    fn plan_batches_merges_singleton_tail() {
        let order: Vec<usize> = (0..5).collect();
        let plain = plan_batches(&order, 2, false);
        assert_eq!(plain.iter().map(|b| b.len()).collect::<Vec<_>>(), [2, 2, 1]);
        let merged = plan_batches(&order, 2, true);
        assert_eq!(merged.iter().map(|b| b.len()).collect::<Vec<_>>(), [2, 3]);
    }

    fn regression_data(n: usize) -> (Tensor4<f32>, Tensor4<f32>) {
        let mut rng = crate::rng::StreamRng::new(40, "reg");
        let x = Tensor4::<f32>::random_uniform([n, 1, 4, 4], -1.0, 1.0, &mut rng);
        let y = Tensor4::new(x.shape(), x.iter().map(|&v| 2.0 * v).collect()).unwrap();
        (x, y)
    }

    fn train_cfg(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            learning_rate: lr,
            optimizer: Optimizer::default(),
            scheduler: Scheduler::None,
            clip_norm: None,
            early_stop: None,
            loss: LossCfg::Mse,
            seed: 11,
        }
    }

    #[test]
    fn zero_learning_rate_preserves_params_bit_exactly() {
        let spec = linear_spec();
        let store: ParamStore<f32> = spec.init_params(3).unwrap();
        let before = store.clone();
        let (x, y) = regression_data(8);
        let data = DataSet {
            images: &x,
            target: Target::Tensor(&y),
        };
        let out = train(&spec, store, &data, &data, &train_cfg(1, 0.0), &NullClock).unwrap();
        assert_eq!(out.history.epochs.len(), 1);
        assert_eq!(out.final_params.params, before.params);
    }

    #[test]
    fn linear_regression_converges() {
        let spec = linear_spec();
        let store: ParamStore<f32> = spec.init_params(3).unwrap();
        let (x, y) = regression_data(16);
        let data = DataSet {
            images: &x,
            target: Target::Tensor(&y),
        };
        let out = train(&spec, store, &data, &data, &train_cfg(200, 0.05), &NullClock).unwrap();
        let last = out.history.epochs.last().unwrap();
        assert!(last.train_loss < 1e-3, "train loss {}", last.train_loss);
        let w = out.final_params.params[&weight_key(0)].data()[0];
        let b = out.final_params.params[&node_bias_key(1)].data()[0];
        assert!((w - 2.0).abs() < 0.05, "w = {w}");
        assert!(b.abs() < 0.05, "b = {b}");
    }

    #[test]
    fn fixed_batch_loss_is_nonincreasing_for_convex_problem() {
        let spec = linear_spec();
        let store: ParamStore<f32> = spec.init_params(3).unwrap();
        let (x, y) = regression_data(8);
        let data = DataSet {
            images: &x,
            target: Target::Tensor(&y),
        };
        let mut cfg = train_cfg(10, 0.01);
        cfg.batch_size = 8; // single full batch per epoch
        let out = train(&spec, store, &data, &data, &cfg, &NullClock).unwrap();
        for pair in out.history.epochs.windows(2) {
            assert!(
                pair[1].train_loss <= pair[0].train_loss + 1e-7,
                "loss went up: {} -> {}",
                pair[0].train_loss,
                pair[1].train_loss
            );
        }
    }

    #[test]
    fn same_seed_reproduces_history_bit_for_bit() {
        let spec = build_msdnet(&MsdConfig {
            depth: 3,
            max_dilation: Some(2),
            custom_dilations: None,
            width: 2,
            c_in: 1,
            c_out: 2,
        })
        .unwrap();
        let samples = crate::data::gen_shapes(12, 16, 0.05, 21).unwrap();
        let batch = crate::data::stack_samples(&samples).unwrap();
        let binary = LabelMap::new(
            batch.seg.shape(),
            batch
                .seg
                .data()
                .iter()
                .map(|&v| if v > 0 { 1 } else { 0 })
                .collect(),
        )
        .unwrap();
        let masks = crate::data::split_pixels(&binary, (0.8, 0.2, 0.0), 5, true).unwrap();
        let run = || {
            let store: ParamStore<f32> = spec.init_params(9).unwrap();
            let data = DataSet {
                images: &batch.images,
                target: Target::Labels {
                    labels: &binary,
                    mask: Some(&masks.train),
                },
            };
            let val = DataSet {
                images: &batch.images,
                target: Target::Labels {
                    labels: &binary,
                    mask: Some(&masks.val),
                },
            };
            let mut cfg = TrainConfig {
                epochs: 2,
                batch_size: 4,
                learning_rate: 0.01,
                optimizer: Optimizer::default(),
                scheduler: Scheduler::None,
                clip_norm: Some(1.0),
                early_stop: None,
                loss: LossCfg::CrossEntropy,
                seed: 33,
            };
            cfg.validate().unwrap();
            train(&spec, store, &data, &val, &cfg, &NullClock).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.history, b.history);
        assert_eq!(a.final_params.params, b.final_params.params);
        assert_eq!(a.final_params.buffers, b.final_params.buffers);
    }

    #[test]
    fn nan_loss_aborts_with_diagnostics() {
        let spec = linear_spec();
        let store: ParamStore<f32> = spec.init_params(3).unwrap();
        let (x, _) = regression_data(4);
        let mut bad = x.clone();
        bad.data_mut()[0] = f32::NAN;
        let data = DataSet {
            images: &x,
            target: Target::Tensor(&bad),
        };
        let err = train(&spec, store, &data, &data, &train_cfg(1, 0.01), &NullClock).unwrap_err();
        match err {
            Error::Numeric(msg) => {
                assert!(msg.contains("epoch 1"), "{msg}");
                assert!(msg.contains("lr"), "{msg}");
            }
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn train_config_json_is_strict_with_defaults() {
        let json = r#"{
            "epochs": 3, "batch_size": 4, "learning_rate": 0.001,
            "loss": {"type": "cross_entropy"}, "seed": 7
        }"#;
        let cfg = TrainConfig::from_json(json).unwrap();
        assert_eq!(cfg.optimizer, Optimizer::default());
        assert_eq!(cfg.scheduler, Scheduler::None);
        let bad = r#"{
            "epochs": 3, "batch_size": 4, "learning_rate": 0.001,
            "loss": {"type": "cross_entropy"}, "seed": 7, "typo": 1
        }"#;
        assert!(TrainConfig::from_json(bad).is_err());
    }
}
