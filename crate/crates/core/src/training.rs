//! Mean-squared-error training with Adam and a one-cycle learning rate.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{mix_seed, Record};
use crate::error::{Error, Result};
use crate::model::{
    Batch, EncodedGraph, GaussianPeak, HeadKind, HeadParams, ModelConfig, ModelState,
};
use crate::nn::{Array, Gradients, ParamStore, Tape, SIGMA_FLOOR};
use crate::graphs::{BondRules, GraphBundle};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_init: f64,
    pub lr_max: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Fraction of all steps spent ramping from `lr_init` to `lr_max`.
    pub warmup_fraction: f64,
    /// Stop once the validation loss is at or below this value.
    pub stop_at_val_loss: Option<f64>,
    /// Worker threads per mini-batch. Results depend on this value only
    /// through floating-point summation order.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 1000,
            lr_init: 1e-4,
            lr_max: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            warmup_fraction: 0.3,
            stop_at_val_loss: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.threads == 0 {
            return Err(Error::Config("batch size, epochs and threads must be positive".into()));
        }
        if !(self.lr_init > 0.0 && self.lr_max >= self.lr_init) {
            return Err(Error::Config("need 0 < lr_init <= lr_max".into()));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("Adam beta {b} not in [0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup fraction not in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Mean over samples and the three peak parameters of squared differences.
pub fn mse_loss(pred: &[GaussianPeak], target: &[GaussianPeak]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Empty("loss over an empty batch".into()));
    }
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    let total: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(p, t)| {
            let (p, t) = (p.to_array(), t.to_array());
            (0..3).map(move |k| (p[k] - t[k]).powi(2))
        })
        .sum();
    Ok(total / (3 * pred.len()) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Array> = store.iter().map(|p| Array::zeros(p.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
) -> Result<()> {
    if grads.0.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Shape("gradient or moment count differs from parameter count".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (k, p) in store.iter_mut().enumerate() {
        let g = grads.0[k].data();
        if g.len() != p.value.len() {
            return Err(Error::Shape(format!("gradient shape mismatch for `{}`", p.name)));
        }
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Linear ramp `lr_init -> lr_max` over the first `warmup_fraction` of the
/// steps, then cosine decay reaching `lr_init / 10` at the final step.
pub fn one_cycle_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Config(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    if total_steps == 1 {
        return Ok(cfg.lr_init);
    }
    let last = (total_steps - 1) as f64;
    let ramp_end = cfg.warmup_fraction * last;
    let s = step as f64;
    if s <= ramp_end && ramp_end > 0.0 {
        return Ok(cfg.lr_init + (cfg.lr_max - cfg.lr_init) * s / ramp_end);
    }
    let floor = cfg.lr_init / 10.0;
    let progress = if last > ramp_end {
        (s - ramp_end) / (last - ramp_end)
    } else {
        1.0
    };
    Ok(floor + 0.5 * (cfg.lr_max - floor) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Validation MSE of each output column.
    pub val_components: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn best(&self) -> Option<&EpochStats> {
        self.epochs
            .iter()
            .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
    }

    /// `epoch,train_loss,val_loss,lr` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{:e},{:e},{:e}", e.epoch, e.train_loss, e.val_loss, e.lr);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the epoch with the lowest validation loss.
    pub best: ModelState,
    pub last: ModelState,
    pub history: TrainHistory,
}

/// Pre-encoded sample with its target row.
#[derive(Debug, Clone)]
pub struct Sample {
    pub graph: EncodedGraph,
    pub target: Vec<f64>,
}

pub fn prepare(records: &[Record], cfg: &ModelConfig) -> Result<Vec<Sample>> {
    let rules = BondRules::default();
    let enc = cfg.encoder();
    records
        .iter()
        .map(|r| {
            let bundle = GraphBundle::build(&r.structure, cfg.representation, &rules)
                .map_err(|e| Error::Data(format!("{}: {e}", r.id)))?;
            let target = match cfg.head {
                HeadKind::Gaussian => r.target.to_array().to_vec(),
                HeadKind::Interpretable => vec![r.target.amplitude],
            };
            Ok(Sample {
                graph: EncodedGraph::new(&bundle, &enc)?,
                target,
            })
        })
        .collect()
}

fn target_array(samples: &[&Sample]) -> Result<Array> {
    let width = samples[0].target.len();
    let data = samples.iter().flat_map(|s| s.target.iter().copied()).collect();
    Array::from_vec(&[samples.len(), width], data)
}

/// Gradient of `weight * mse(chunk)` plus that loss value.
fn chunk_gradient(model: &ModelState, chunk: &[&Sample], weight: f64) -> Result<(f64, Gradients)> {
    let graphs: Vec<&EncodedGraph> = chunk.iter().map(|s| &s.graph).collect();
    let batch = Batch::new(&graphs)?;
    let mut tape = Tape::new(model.params());
    let out = model.forward_batch(&mut tape, &batch)?;
    let loss = tape.mse_loss(out, target_array(chunk)?)?;
    let loss = tape.scale(loss, weight);
    let value = tape.value(loss).item();
    Ok((value, tape.backward(loss)?))
}

fn batch_gradient(model: &ModelState, batch: &[&Sample], threads: usize) -> Result<(f64, Gradients)> {
    let n = batch.len();
    let parts = threads.min(n);
    if parts <= 1 {
        return chunk_gradient(model, batch, 1.0);
    }
    let size = n.div_ceil(parts);
    let results: Vec<Result<(f64, Gradients)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = batch
            .chunks(size)
            .map(|c| scope.spawn(move || chunk_gradient(model, c, c.len() as f64 / n as f64)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("gradient worker panicked"))
            .collect()
    });
    let mut iter = results.into_iter();
    let (mut loss, mut grads) = iter.next().expect("at least one chunk")?;
    for r in iter {
        let (l, g) = r?;
        loss += l;
        for (acc, part) in grads.0.iter_mut().zip(g.0) {
            for (a, b) in acc.data_mut().iter_mut().zip(part.data()) {
                *a += b;
            }
        }
    }
    Ok((loss, grads))
}

/// Head outputs for `samples`, evaluated `batch_size` graphs at a time.
pub fn predict_samples(model: &ModelState, samples: &[Sample], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let graphs: Vec<&EncodedGraph> = chunk.iter().map(|s| &s.graph).collect();
        let pred = model.predict_encoded(&graphs)?;
        out.extend((0..pred.rows()).map(|r| pred.row(r).to_vec()));
    }
    Ok(out)
}

/// Overall and per-column MSE of `model` on `samples`.
pub fn evaluate(model: &ModelState, samples: &[Sample], batch_size: usize) -> Result<(f64, [f64; 3])> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    let pred = predict_samples(model, samples, batch_size)?;
    let width = samples[0].target.len();
    let mut cols = [0.0; 3];
    for (p, s) in pred.iter().zip(samples) {
        for k in 0..width {
            cols[k] += (p[k] - s.target[k]).powi(2);
        }
    }
    let n = samples.len() as f64;
    let total = cols.iter().sum::<f64>() / (n * width as f64);
    for c in &mut cols {
        *c /= n;
    }
    Ok((total, cols))
}

fn inverse_softplus(y: f64) -> f64 {
    let y = y.max(1e-12);
    y + (-(-y).exp_m1()).ln()
}

/// Shifts the Gaussian head's output bias so the mean prediction over (up
/// to 512 of) `samples` matches the mean target in each column.
pub fn align_output_bias(model: &mut ModelState, samples: &[Sample]) -> Result<()> {
    let HeadParams::Gaussian { out_b, .. } = *model.head() else {
        return Err(Error::Config("output-bias alignment needs the Gaussian head".into()));
    };
    let subset = &samples[..samples.len().min(512)];
    if subset.is_empty() {
        return Err(Error::Empty("no samples to align the output bias on".into()));
    }
    let n = subset.len() as f64;
    let mut target = [0.0; 3];
    for s in subset {
        for (t, v) in target.iter_mut().zip(&s.target) {
            *t += v / n;
        }
    }
    // softplus is nonlinear, so a few passes tighten the match
    for _ in 0..3 {
        let pred = predict_samples(model, subset, 256)?;
        let mut mean = [0.0; 3];
        for p in &pred {
            for k in 0..3 {
                mean[k] += p[k] / n;
            }
        }
        let b = model.params_mut().get_mut(out_b).value.data_mut();
        b[0] += target[0] - mean[0];
        b[1] += inverse_softplus(target[1] - SIGMA_FLOOR) - inverse_softplus(mean[1] - SIGMA_FLOOR);
        b[2] += inverse_softplus(target[2]) - inverse_softplus(mean[2]);
    }
    Ok(())
}

/// Trains a fresh model (initialized from `train_cfg.seed`, output bias
/// aligned with the target means) on `train` and tracks the best validation loss. `observer` sees every finished epoch.
pub fn train_with(
    train: &[Record],
    val: &[Record],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training and validation sets must be non-empty".into()));
    }
    let train_s = prepare(train, model_cfg)?;
    let val_s = prepare(val, model_cfg)?;
    let mut model = ModelState::init(*model_cfg, train_cfg.seed)?;
    if model_cfg.head == HeadKind::Gaussian {
        align_output_bias(&mut model, &train_s)?;
    }
    train_prepared(model, &train_s, &val_s, train_cfg, observer)
}

pub fn train(
    train: &[Record],
    val: &[Record],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(train, val, model_cfg, train_cfg, &mut |_| {})
}

/// Training loop over already-encoded samples, starting from `model`.
pub fn train_prepared(
    mut model: ModelState,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training and validation sets must be non-empty".into()));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut adam = AdamState::new(model.params());
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelState)> = None;
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64)));
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr_init;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_gradient(&model, &batch, cfg.threads)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            lr = one_cycle_lr(step, total_steps, cfg)?;
            adam_step(model.params_mut(), &grads, &mut adam, lr, cfg.beta1, cfg.beta2)?;
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        let (val_loss, val_components) = evaluate(&model, val, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            lr,
            val_components,
        };
        history.epochs.push(stats);
        observer(&stats);
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.clone()));
        }
        if cfg.stop_at_val_loss.is_some_and(|t| val_loss <= t) {
            break;
        }
    }
    let (_, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        last: model,
        history,
    })
}
