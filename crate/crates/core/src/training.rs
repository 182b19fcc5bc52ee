//! Adam, the step-decay schedule and the epoch loop.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{random_crop, Dataset, RecordingPair, Split};
use crate::error::{Error, Result};
use crate::inference::{evaluate_recordings, TailPolicy};
use crate::model::DecoderModel;
use crate::nn::{Graph, ParamStore};
use crate::objective::{total_loss, LossConfig};
use crate::rng::{stream, RngState, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off when `None`.
    pub clip_grad_norm: Option<f64>,
    /// Validation runs every this many epochs and after the last one.
    pub eval_every_epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr0: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            decay_factor: 0.9,
            decay_every_epochs: 100,
            epochs: 1000,
            batch_size: 64,
            seed: 0,
            clip_grad_norm: None,
            eval_every_epochs: 1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::config("lr0 must be > 0"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("decay_factor must be in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1 and beta2 must be in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps must be > 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every_epochs == 0 || self.eval_every_epochs == 0 {
            return Err(Error::config(
                "epochs, batch_size, decay_every_epochs and eval_every_epochs must be >= 1",
            ));
        }
        if matches!(self.clip_grad_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::config("clip_grad_norm must be > 0"));
        }
        Ok(())
    }
}

/// `lr0 · decay_factor^⌊epoch / decay_every_epochs⌋`, rounded to 15
/// significant digits so decimal configs give decimal rates.
pub fn scheduler_lr(cfg: &OptimConfig, epoch: usize) -> f64 {
    let k = (epoch / cfg.decay_every_epochs) as i32;
    let lr = cfg.lr0 * cfg.decay_factor.powi(k);
    format!("{lr:.14e}").parse().expect("formatted float parses")
}

/// Adam with bias correction. Moments are indexed like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: &OptimConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Steps taken so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradient slots in `params`.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        for i in 0..params.len() {
            if params.tensor_at(i).grad().is_none() {
                let name = params.iter().nth(i).map(|(n, _)| n.to_string()).unwrap_or_default();
                return Err(Error::contract(format!("no gradient for parameter {name}")));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let p = params.tensor_at_mut(i);
            let g = p.grad().unwrap().to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, theta) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

fn clip_gradients(params: &mut ParamStore, max_norm: f64) {
    let sq: f64 = params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter().map(|v| v * v))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainStateMeta {
    optim: OptimConfig,
    loss: LossConfig,
    epoch: usize,
    t: u64,
    lr: f64,
    crop_rng: RngState,
    dropout_rng: RngState,
    loss_history: Vec<f64>,
}

const MOMENT_M: &str = "optim.m/";
const MOMENT_V: &str = "optim.v/";
const HISTORY_IN_ERROR: usize = 20;

/// Model, optimizer state and the random streams that drive training.
pub struct Trainer {
    model: DecoderModel,
    optim: OptimConfig,
    loss: LossConfig,
    adam: Adam,
    epoch: usize,
    crop_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    loss_history: Vec<f64>,
}

impl Trainer {
    pub fn new(model: DecoderModel, optim: OptimConfig, loss: LossConfig) -> Result<Self> {
        optim.validate()?;
        loss.validate()?;
        let adam = Adam::new(model.params(), &optim);
        Ok(Trainer {
            crop_rng: stream(optim.seed, Stream::Crop),
            dropout_rng: stream(optim.seed, Stream::Dropout),
            model,
            optim,
            loss,
            adam,
            epoch: 0,
            loss_history: Vec::new(),
        })
    }

    pub fn model(&self) -> &DecoderModel {
        &self.model
    }

    pub fn into_model(self) -> DecoderModel {
        self.model
    }

    pub fn optim(&self) -> &OptimConfig {
        &self.optim
    }

    /// Changes the total epoch target, e.g. to extend a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.optim.epochs = epochs;
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> u64 {
        self.adam.t()
    }

    /// Training loss of every step so far.
    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    pub fn current_lr(&self) -> f64 {
        scheduler_lr(&self.optim, self.epoch)
    }

    /// One optimizer step on `eeg: [batch, time, channels]` against
    /// `target: [batch, time]`. Returns the loss before the update.
    pub fn step(&mut self, eeg: &Tensor, target: &Tensor, subject_ids: &[usize]) -> Result<f64> {
        let lr = self.current_lr();
        let ids = self.model.config().use_conditioner.then_some(subject_ids);
        let (tape, loss_var) = {
            let mut g = Graph::training(self.model.params(), &mut self.dropout_rng);
            let x = g.tape.constant(eeg.clone());
            let y = g.tape.constant(target.clone());
            let pred = self.model.forward(&mut g, x, ids)?;
            let loss = total_loss(&mut g.tape, pred, y, &self.loss)?;
            (g.into_tape(), loss)
        };
        let loss = tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            let from = self.loss_history.len().saturating_sub(HISTORY_IN_ERROR);
            return Err(Error::NonFiniteLoss {
                step: self.adam.t() + 1,
                lr,
                loss,
                history: self.loss_history[from..].to_vec(),
            });
        }
        let grads = tape.backward(loss_var)?;
        let params = self.model.params_mut();
        params.zero_grad();
        params.accumulate_grads(&tape, &grads)?;
        if let Some(c) = self.optim.clip_grad_norm {
            clip_gradients(params, c);
        }
        self.adam.step(params, lr)?;
        self.loss_history.push(loss);
        Ok(loss)
    }

    /// Shuffles the recordings, takes one random crop from each and steps
    /// through them in batches. Returns the mean step loss.
    pub fn run_epoch(&mut self, recordings: &[&RecordingPair]) -> Result<f64> {
        if recordings.is_empty() {
            return Err(Error::config("no training recordings"));
        }
        let segment = self.model.config().segment_samples()?;
        let mut order: Vec<usize> = (0..recordings.len()).collect();
        order.shuffle(&mut self.crop_rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(self.optim.batch_size) {
            let mut eeg = Vec::with_capacity(batch.len());
            let mut env = Vec::with_capacity(batch.len());
            let mut ids = Vec::with_capacity(batch.len());
            for &i in batch {
                let crop = random_crop(recordings[i], segment, &mut self.crop_rng)?;
                eeg.push(crop.eeg);
                env.push(crop.envelope);
                ids.push(recordings[i].subject_id);
            }
            total += self.step(&Tensor::stack(&eeg)?, &Tensor::stack(&env)?, &ids)?;
            steps += 1;
        }
        self.epoch += 1;
        Ok(total / steps as f64)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_model(&self.model)?;
        let state = TrainStateMeta {
            optim: self.optim.clone(),
            loss: self.loss.clone(),
            epoch: self.epoch,
            t: self.adam.t,
            lr: self.current_lr(),
            crop_rng: RngState::capture(&self.crop_rng),
            dropout_rng: RngState::capture(&self.dropout_rng),
            loss_history: self.loss_history.clone(),
        };
        ck.meta["train_state"] = serde_json::to_value(state)?;
        let names: Vec<(String, Vec<usize>)> = self
            .model
            .params()
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        for (i, (name, shape)) in names.iter().enumerate() {
            ck.tensors.push((format!("{MOMENT_M}{name}"), Tensor::new(shape.clone(), self.adam.m[i].clone())?));
            ck.tensors.push((format!("{MOMENT_V}{name}"), Tensor::new(shape.clone(), self.adam.v[i].clone())?));
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.to_model()?;
        let state: TrainStateMeta = serde_json::from_value(
            ck.meta
                .get("train_state")
                .cloned()
                .ok_or_else(|| Error::config("checkpoint has no training state"))?,
        )?;
        let mut adam = Adam::new(model.params(), &state.optim);
        adam.t = state.t;
        for (i, (name, t)) in model.params().iter().enumerate() {
            for (prefix, slot) in [(MOMENT_M, &mut adam.m[i]), (MOMENT_V, &mut adam.v[i])] {
                let key = format!("{prefix}{name}");
                let stored = ck
                    .get(&key)
                    .ok_or_else(|| Error::config(format!("checkpoint lacks {key}")))?;
                if stored.shape() != t.shape() {
                    return Err(Error::dim(format!("{key}: shape {:?}, expected {:?}", stored.shape(), t.shape())));
                }
                slot.copy_from_slice(stored.data());
            }
        }
        let mut trainer = Trainer::new(model, state.optim, state.loss)?;
        trainer.adam = adam;
        trainer.epoch = state.epoch;
        trainer.crop_rng = state.crop_rng.restore()?;
        trainer.dropout_rng = state.dropout_rng.restore()?;
        trainer.loss_history = state.loss_history;
        Ok(trainer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Recordings long enough for one training segment; the rest are skipped
/// with a warning.
pub fn usable_recordings<'a>(recs: &[&'a RecordingPair], segment: usize) -> Vec<&'a RecordingPair> {
    recs.iter()
        .copied()
        .filter(|r| {
            let ok = r.len() >= segment;
            if !ok {
                log::warn!(
                    "skipping subject {} recording: {} samples, segment needs {segment}",
                    r.subject_id,
                    r.len()
                );
            }
            ok
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_r: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Receives `metrics.jsonl`, `best.ckpt` and `last.ckpt`.
    pub out_dir: Option<PathBuf>,
    pub tail_policy: TailPolicy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub metrics: Vec<EpochMetrics>,
    pub best_val_r: Option<f64>,
    pub best_epoch: Option<usize>,
    pub steps: u64,
}

/// Runs the remaining epochs on the train split, validating on the val
/// split. Resumes from `trainer.epoch()`.
pub fn train(trainer: &mut Trainer, dataset: &Dataset, opts: &TrainOptions) -> Result<TrainSummary> {
    let segment = trainer.model.config().segment_samples()?;
    let train_recs = usable_recordings(&dataset.split(Split::Train), segment);
    if train_recs.is_empty() {
        return Err(Error::config(format!(
            "no train recording has the {segment} samples one segment needs"
        )));
    }
    let val_recs: Vec<&RecordingPair> = dataset.split(Split::Val).into_iter().filter(|r| r.len() >= 2).collect();
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            let file = if trainer.epoch == 0 {
                File::create(&path)
            } else {
                OpenOptions::new().append(true).create(true).open(&path)
            };
            Some((file.map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut summary = TrainSummary {
        metrics: Vec::new(),
        best_val_r: None,
        best_epoch: None,
        steps: 0,
    };
    while trainer.epoch < trainer.optim.epochs {
        let lr = trainer.current_lr();
        let train_loss = trainer.run_epoch(&train_recs)?;
        let epoch = trainer.epoch - 1;
        let due = trainer.epoch.is_multiple_of(trainer.optim.eval_every_epochs) || trainer.epoch == trainer.optim.epochs;
        let val_r = if due && !val_recs.is_empty() {
            let eps = trainer.loss.epsilon_denominator;
            Some(evaluate_recordings(&trainer.model, &val_recs, segment, opts.tail_policy, eps)?.overall_mean)
        } else {
            None
        };
        let m = EpochMetrics {
            epoch,
            train_loss,
            val_r,
            lr,
        };
        log::info!("epoch {epoch}: loss {train_loss:.5}, val r {val_r:?}, lr {lr}");
        if let Some((file, path)) = &mut log_file {
            writeln!(file, "{}", serde_json::to_string(&m)?).map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(r) = val_r {
            if summary.best_val_r.is_none_or(|b| r > b) {
                summary.best_val_r = Some(r);
                summary.best_epoch = Some(epoch);
                if let Some(dir) = &opts.out_dir {
                    trainer.save(&dir.join("best.ckpt"))?;
                }
            }
        }
        summary.metrics.push(m);
    }
    if let Some(dir) = &opts.out_dir {
        trainer.save(&dir.join("last.ckpt"))?;
    }
    summary.steps = trainer.steps();
    Ok(summary)
}
