//! AdamW, learning-rate schedules, the training loop and evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::checkpoint;
use crate::config::{parse_value, ModelConfig};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::{seeded_rng, Model, SampleGrad};
use crate::params::ParamStore;
use crate::tasks::{read_jsonl, TaskSample};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy,lr,seconds";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// `lr0 · gamma^epoch`.
    Multiplicative,
    /// `lr0 · (1 − epoch / epochs)`.
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr0: 4e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            gamma: 0.8,
            weight_decay: 0.01,
            epochs: 20,
            batch_size: 32,
            schedule: Schedule::Multiplicative,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr0 > 0.0) || !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::Config("need lr0 > 0 and 0 < beta1, beta2 < 1".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr0", self.lr0.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("gamma", self.gamma.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            (
                "schedule",
                match self.schedule {
                    Schedule::Multiplicative => "multiplicative",
                    Schedule::Linear => "linear",
                }
                .to_string(),
            ),
        ]
    }

    pub fn apply(&mut self, map: &std::collections::BTreeMap<String, String>) -> Result<()> {
        for (k, v) in map {
            match k.as_str() {
                "lr0" => self.lr0 = parse_value(k, v)?,
                "beta1" => self.beta1 = parse_value(k, v)?,
                "beta2" => self.beta2 = parse_value(k, v)?,
                "eps" => self.eps = parse_value(k, v)?,
                "gamma" => self.gamma = parse_value(k, v)?,
                "weight_decay" => self.weight_decay = parse_value(k, v)?,
                "epochs" => self.epochs = parse_value(k, v)?,
                "batch_size" => self.batch_size = parse_value(k, v)?,
                "schedule" => {
                    self.schedule = match v.as_str() {
                        "multiplicative" => Schedule::Multiplicative,
                        "linear" => Schedule::Linear,
                        _ => return Err(Error::Config(format!("unknown schedule `{v}`"))),
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

pub fn lr_at(epoch: usize, config: &OptimConfig) -> f64 {
    match config.schedule {
        Schedule::Multiplicative => config.lr0 * config.gamma.powi(epoch as i32),
        Schedule::Linear => config.lr0 * (1.0 - epoch as f64 / config.epochs as f64).max(0.0),
    }
}

/// Optimizer state; moment tensors mirror the parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    /// Number of completed epochs.
    pub epoch: u64,
    pub best_val_accuracy: Option<f64>,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl TrainState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, p)| Tensor::zeros_like(p)).collect();
        Self { step: 0, epoch: 0, best_val_accuracy: None, first_moment: zeros(), second_moment: zeros() }
    }
}

/// One decoupled-weight-decay Adam step at learning rate `lr`.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut TrainState,
    config: &OptimConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Dimension { op: "adamw_step", lhs: vec![params.len()], rhs: vec![grads.len()] });
    }
    for (id, g) in grads.iter().enumerate() {
        if !g.all_finite() {
            return Err(Error::NonFinite(params.name(id).to_string()));
        }
        if g.shape() != params.get(id).shape() {
            return Err(Error::Dimension {
                op: "adamw_step",
                lhs: params.get(id).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (id, g) in grads.iter().enumerate() {
        let p = params.get_mut(id).data_mut();
        let m = state.first_moment[id].data_mut();
        let v = state.second_moment[id].data_mut();
        for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *p -= lr * config.weight_decay * *p;
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

/// Worker count from `BLRP_THREADS`, defaulting to the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("BLRP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Applies `f` to every item on up to `threads` scoped workers, keeping input order.
fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Per-sample gradients, summed in sample order and divided by the count.
pub fn batch_gradient(model: &Model, batch: &[&TaskSample], threads: usize) -> Result<(Vec<Tensor>, Vec<SampleGrad>)> {
    let per_sample = par_map(batch, threads, |s| model.loss_and_grad(&s.tokens, s.label))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut total: Vec<Tensor> = per_sample[0].grads.clone();
    for s in &per_sample[1..] {
        for (acc, g) in total.iter_mut().zip(&s.grads) {
            acc.add_assign(g);
        }
    }
    let n = batch.len() as f64;
    for acc in &mut total {
        acc.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok((total, per_sample))
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn sample_loss(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

#[derive(Clone, Debug, PartialEq)]
pub struct LengthBucket {
    pub min_len: usize,
    pub max_len: usize,
    pub count: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub count: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Samples sorted by length and split into (up to) ten near-equal groups.
    pub buckets: Vec<LengthBucket>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket,min_len,max_len,count,loss,accuracy\n");
        for (i, b) in self.buckets.iter().enumerate() {
            writeln!(out, "{i},{},{},{},{},{}", b.min_len, b.max_len, b.count, b.loss, b.accuracy).unwrap();
        }
        let (lo, hi) = (
            self.buckets.first().map_or(0, |b| b.min_len),
            self.buckets.last().map_or(0, |b| b.max_len),
        );
        writeln!(out, "all,{lo},{hi},{},{},{}", self.count, self.loss, self.accuracy).unwrap();
        out
    }
}

/// Scores precomputed predictions; `outcomes[i] = (loss, correct)` for `samples[i]`.
pub fn summarize(samples: &[TaskSample], outcomes: &[(f64, bool)]) -> EvalReport {
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (samples[i].tokens.len(), i));
    let groups = n.min(10);
    let mut buckets = Vec::with_capacity(groups);
    for b in 0..groups {
        let idx = &order[b * n / groups..(b + 1) * n / groups];
        let count = idx.len();
        let correct = idx.iter().filter(|&&i| outcomes[i].1).count();
        buckets.push(LengthBucket {
            min_len: samples[idx[0]].tokens.len(),
            max_len: samples[idx[count - 1]].tokens.len(),
            count,
            loss: idx.iter().map(|&i| outcomes[i].0).sum::<f64>() / count as f64,
            accuracy: correct as f64 / count as f64,
        });
    }
    let correct = outcomes.iter().filter(|o| o.1).count();
    EvalReport {
        count: n,
        loss: outcomes.iter().map(|o| o.0).sum::<f64>() / n.max(1) as f64,
        accuracy: correct as f64 / n.max(1) as f64,
        buckets,
    }
}

pub fn evaluate_model(model: &Model, samples: &[TaskSample], threads: usize) -> Result<EvalReport> {
    evaluate_with(samples, threads, |s| model.logits(&s.tokens))
}

/// Evaluates any predictor returning logits.
pub fn evaluate_with(
    samples: &[TaskSample],
    threads: usize,
    predict: impl Fn(&TaskSample) -> Result<Vec<f64>> + Sync,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Spec("cannot evaluate an empty dataset".into()));
    }
    let outcomes = par_map(samples, threads, |s| {
        predict(s).map(|logits| (sample_loss(&logits, s.label), argmax(&logits) == s.label))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(summarize(samples, &outcomes))
}

pub fn evaluate_checkpoint(
    checkpoint_path: &Path,
    dataset: &Path,
    expected: Option<&ModelConfig>,
    threads: usize,
) -> Result<EvalReport> {
    let (model, _) = checkpoint::load_expecting(checkpoint_path, expected)?;
    let cfg = model.config();
    let samples = read_jsonl(dataset, cfg.vocab_size, cfg.classes)?;
    evaluate_model(&model, &samples, threads)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val: EvalReport,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub threads: usize,
    /// Write wall-clock seconds into the metrics. Off by default: the column
    /// is then 0 and reruns are byte-identical.
    pub timing: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { threads: worker_threads(), timing: false }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub metrics: PathBuf,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub reports: Vec<EpochReport>,
    pub model: Model,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Trains on `train`, validating on `val` after every epoch. Writes
/// `metrics.csv`, `best.ckpt` (highest validation accuracy, earliest on ties)
/// and `last.ckpt` into `out_dir`. `on_epoch` may stop training early.
pub fn train(
    model_config: &ModelConfig,
    optim: &OptimConfig,
    train_set: &[TaskSample],
    val_set: &[TaskSample],
    out_dir: &Path,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochReport) -> Control,
) -> Result<TrainOutputs> {
    optim.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Spec("training and validation sets must be non-empty".into()));
    }
    let mut model = Model::new(model_config.clone())?;
    let mut state = TrainState::new(model.params());
    let metrics = out_dir.join(METRICS_FILE);
    let best_checkpoint = out_dir.join(BEST_CHECKPOINT);
    let last_checkpoint = out_dir.join(LAST_CHECKPOINT);
    let mut csv = format!("{METRICS_HEADER}\n");
    let mut reports = Vec::new();

    for epoch in 0..optim.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, optim);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut seeded_rng(model_config.seed ^ (0x9e37_79b9_7f4a_7c15_u64.wrapping_mul(epoch as u64 + 1))));

        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(optim.batch_size) {
            let batch: Vec<&TaskSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (grads, per_sample) = batch_gradient(&model, &batch, opts.threads)?;
            for (s, sample) in per_sample.iter().zip(&batch) {
                loss_sum += s.loss;
                correct += usize::from(argmax(&s.logits) == sample.label);
            }
            adamw_step(model.params_mut(), &grads, &mut state, optim, lr)?;
        }
        let val = evaluate_model(&model, val_set, opts.threads)?;
        state.epoch = epoch as u64 + 1;
        let seconds = if opts.timing { started.elapsed().as_secs_f64() } else { 0.0 };
        let report = EpochReport {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val,
            lr,
            seconds,
        };
        writeln!(csv, "{epoch},train,{},{},{lr},{seconds}", report.train_loss, report.train_accuracy).unwrap();
        writeln!(csv, "{epoch},val,{},{},{lr},{seconds}", report.val.loss, report.val.accuracy).unwrap();
        write_atomic(&metrics, csv.as_bytes())?;

        if state.best_val_accuracy.map_or(true, |best| report.val.accuracy > best) {
            state.best_val_accuracy = Some(report.val.accuracy);
            checkpoint::save(&best_checkpoint, &model, Some(&state))?;
        }
        checkpoint::save(&last_checkpoint, &model, Some(&state))?;
        let control = on_epoch(&report);
        reports.push(report);
        if control == Control::Stop {
            break;
        }
    }
    Ok(TrainOutputs { metrics, best_checkpoint, last_checkpoint, reports, model })
}
