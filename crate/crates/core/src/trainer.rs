//! Mini-batch training with Adam, evaluation and per-epoch logging.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{epoch_seed, iterate_batches, DatasetManifest, SampleLoader, Split};
use crate::error::{Error, Result};
use crate::swin::{save_checkpoint, ModelParams, ParamTree, SwinModel};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds parameter init and every epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { adam: AdamConfig::default(), batch_size: 32, epochs: 5, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", a.learning_rate)));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(a.eps > 0.0) {
            return Err(Error::Config("adam eps must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates for a list of parameter buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn for_params(params: &ModelParams<T>) -> Self {
        let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.len()).collect();
        Self::new(&sizes)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn check(&self, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        for (i, (g, m)) in grads.iter().zip(&self.m).enumerate() {
            if g.len() != m.len() {
                return Err(Error::Contract(format!("gradient {i} has {} values, expected {}", g.len(), m.len())));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric("adam step", format!("non-finite gradient in parameter {i}")));
            }
        }
        Ok(())
    }

    fn update(&mut self, i: usize, p: &mut [T], g: &[T], cfg: &AdamConfig) {
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let t = self.step as i32;
        let c1 = T::of(1.0 - cfg.beta1.powi(t));
        let c2 = T::of(1.0 - cfg.beta2.powi(t));
        let (lr, eps) = (T::of(cfg.learning_rate), T::of(cfg.eps));
        let one = T::one();
        for (((p, &g), m), v) in p.iter_mut().zip(g).zip(&mut self.m[i]).zip(&mut self.v[i]) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }

    /// One bias-corrected step over plain buffers. A non-finite gradient
    /// aborts before anything changes.
    pub fn step_slices(&mut self, params: &mut [&mut [T]], grads: &[Vec<T>], cfg: &AdamConfig) -> Result<()> {
        self.check(grads)?;
        if params.len() != grads.len() {
            return Err(Error::Contract(format!("{} buffers for {} gradients", params.len(), grads.len())));
        }
        self.step += 1;
        for (i, p) in params.iter_mut().enumerate() {
            self.update(i, p, &grads[i], cfg);
        }
        Ok(())
    }

    /// One step over model parameters; `grads` follow the leaf order of
    /// [`ModelParams::named`].
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &[Vec<T>], cfg: &AdamConfig) -> Result<()> {
        self.check(grads)?;
        self.step += 1;
        let mut i = 0;
        params.visit_mut("", &mut |_, t| {
            self.update(i, t.data_mut(), &grads[i], cfg);
            i += 1;
        });
        Ok(())
    }
}

/// Mean softmax cross-entropy of `[B, 2]` logits against binary labels.
pub fn cross_entropy_loss<T: Float>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Contract(format!("label {l} is not binary")));
    }
    tape.cross_entropy(logits, labels)
}

/// Predicted class from two logits; a tie goes to class 0.
pub fn argmax2<T: Float>(row: &[T]) -> usize {
    usize::from(row[1] > row[0])
}

/// Softmax probability of class 1.
pub fn class1_probability<T: Float>(row: &[T]) -> f64 {
    let (a, b) = (row[0].as_f64(), row[1].as_f64());
    1.0 / (1.0 + (a - b).exp())
}

/// Loss and number of correct predictions of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
}

/// Forward, backward and one Adam update on a single batch. The loss and
/// accuracy are measured before the update.
pub fn train_step<T: Float>(
    model: &SwinModel,
    params: &mut ModelParams<T>,
    adam: &mut AdamState<T>,
    inputs: &Tensor<T>,
    labels: &[usize],
    cfg: &AdamConfig,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let w = model.bind(&mut tape, params, true);
    let x = tape.constant(inputs.clone());
    let logits = model.forward(&mut tape, &w, x, None)?;
    let loss = cross_entropy_loss(&mut tape, logits, labels)?;
    let correct = tape
        .data(logits)
        .chunks(2)
        .zip(labels)
        .filter(|(row, &l)| argmax2(row) == l)
        .count();
    let loss_value = tape.data(loss)[0].as_f64();
    tape.backward(loss)?;
    let grads: Vec<Vec<T>> = w
        .named()
        .into_iter()
        .map(|(_, &v)| tape.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); tape.data(v).len()]))
        .collect();
    adam.step(params, &grads, cfg)?;
    Ok(StepStats { loss: loss_value, correct })
}

/// Predictions of a split in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    /// Softmax probability of class 1 (`Real`).
    pub scores: Vec<f64>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        let hits = self.predictions.iter().zip(&self.labels).filter(|(p, l)| p == l).count();
        hits as f64 / self.labels.len() as f64
    }
}

pub fn evaluate<T: Float>(
    model: &SwinModel,
    params: &ModelParams<T>,
    manifest: &DatasetManifest,
    split: Split,
    loader: &SampleLoader,
    batch_size: usize,
) -> Result<Evaluation> {
    let mut out = Evaluation { loss: 0.0, labels: Vec::new(), predictions: Vec::new(), scores: Vec::new() };
    let mut loss_sum = 0.0;
    for batch in iterate_batches(manifest, split, batch_size, None, loader)? {
        let batch = batch?;
        let mut tape = Tape::new();
        let w = model.bind(&mut tape, params, false);
        let x = tape.constant(batch.inputs.cast::<T>());
        let logits = model.forward(&mut tape, &w, x, None)?;
        let loss = cross_entropy_loss(&mut tape, logits, &batch.labels)?;
        loss_sum += tape.data(loss)[0].as_f64() * batch.labels.len() as f64;
        for row in tape.data(logits).chunks(2) {
            out.predictions.push(argmax2(row));
            out.scores.push(class1_probability(row));
        }
        out.labels.extend_from_slice(&batch.labels);
    }
    out.loss = loss_sum / out.labels.len() as f64;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Wall-clock seconds of the training pass and of validation.
    pub train_seconds: f64,
    pub val_seconds: f64,
}

pub const EPOCHS_CSV_HEADER: &str = "epoch,split,loss,accuracy";

impl EpochLog {
    /// The two CSV rows (train, val) of this epoch, without timings.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{},train,{},{}", self.epoch, self.train_loss, self.train_accuracy);
        let _ = writeln!(s, "{},val,{},{}", self.epoch, self.val_loss, self.val_accuracy);
        s
    }

    pub fn timing_line(&self) -> String {
        format!("epoch {} train {:.3}s val {:.3}s\n", self.epoch, self.train_seconds, self.val_seconds)
    }
}

/// Where a run writes its log and checkpoints.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    /// Copied into every checkpoint header.
    pub meta: BTreeMap<String, String>,
}

impl RunOutput {
    pub fn epochs_csv(&self) -> PathBuf {
        self.dir.join("epochs.csv")
    }
    pub fn timing_log(&self) -> PathBuf {
        self.dir.join("timing.log")
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn last_checkpoint(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub logs: Vec<EpochLog>,
    /// Epoch with the highest validation accuracy (first on ties).
    pub best_epoch: Option<usize>,
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Trains `params` on the train split, validating after every epoch.
///
/// With `output` set, the epoch log is appended to `epochs.csv` (timings to
/// `timing.log`) as it is produced, `best.ckpt` tracks the best validation
/// accuracy and `last.ckpt` is rewritten after each epoch. A numeric failure
/// aborts the run and leaves the checkpoints of the last completed epoch in
/// place.
pub fn train<T: Float>(
    model: &SwinModel,
    mut params: ModelParams<T>,
    manifest: &DatasetManifest,
    loader: &SampleLoader,
    cfg: &TrainConfig,
    output: Option<&RunOutput>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    for split in [Split::Train, Split::Val] {
        if manifest.split(split).is_empty() {
            return Err(Error::Contract(format!("{split} split is empty")));
        }
    }
    if let Some(out) = output {
        fs::create_dir_all(&out.dir)?;
        fs::write(out.epochs_csv(), format!("{EPOCHS_CSV_HEADER}\n"))?;
        fs::write(out.timing_log(), "")?;
    }
    let mut adam = AdamState::for_params(&params);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let batches = iterate_batches(manifest, Split::Train, cfg.batch_size, Some(epoch_seed(cfg.seed, epoch)), loader)?;
        for (bi, batch) in batches.enumerate() {
            let batch = batch?;
            let stats = train_step(model, &mut params, &mut adam, &batch.inputs.cast::<T>(), &batch.labels, &cfg.adam)
                .map_err(|e| e.in_context(format!("epoch {epoch} batch {bi}")))?;
            loss_sum += stats.loss * batch.labels.len() as f64;
            correct += stats.correct;
            seen += batch.labels.len();
        }
        let train_seconds = started.elapsed().as_secs_f64();
        let started = Instant::now();
        let val = evaluate(model, &params, manifest, Split::Val, loader, cfg.batch_size)?;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            val_loss: val.loss,
            val_accuracy: val.accuracy(),
            train_seconds,
            val_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4} | val loss {:.4} acc {:.4}",
            log.train_loss,
            log.train_accuracy,
            log.val_loss,
            log.val_accuracy
        );
        let improved = best.map_or(true, |(_, acc)| log.val_accuracy > acc);
        if improved {
            best = Some((epoch, log.val_accuracy));
        }
        if let Some(out) = output {
            let mut meta = out.meta.clone();
            meta.insert("epoch".into(), epoch.to_string());
            meta.insert("val_accuracy".into(), log.val_accuracy.to_string());
            if improved {
                save_checkpoint(&out.best_checkpoint(), model.config(), &meta, &params)?;
            }
            save_checkpoint(&out.last_checkpoint(), model.config(), &meta, &params)?;
            append(&out.epochs_csv(), &log.csv_rows())?;
            append(&out.timing_log(), &log.timing_line())?;
        }
        logs.push(log);
    }
    Ok(TrainOutcome { params, logs, best_epoch: best.map(|(e, _)| e) })
}
