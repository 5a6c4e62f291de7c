//! Adam optimization with plateau learning-rate reduction, validation
//! tracking and checkpointing.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::datapipe::PairSet;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::real::Real;
use crate::tensor::Tensor3;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
/// Segments per inference batch during validation.
const VAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub lr_reduce_factor: f64,
    pub min_lr: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 100,
            max_epochs: 20,
            plateau_patience: 3,
            lr_reduce_factor: 10.0,
            min_lr: 1e-7,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::config("Adam betas must lie strictly between 0 and 1"));
        }
        if !(self.lr > 0.0) || !(self.eps > 0.0) {
            return Err(Error::config("learning rate and epsilon must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.lr_reduce_factor >= 1.0) || !(self.min_lr >= 0.0) {
            return Err(Error::config("reduce factor must be >= 1 and min_lr non-negative"));
        }
        Ok(())
    }
}

/// First and second moment buffers, shaped like the parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![T::zero(); n], vec![T::zero(); n])).unzip();
        AdamState { m, v, step: 0 }
    }

    pub fn for_model(model: &Model<T>) -> Self {
        Self::new(model.param_groups().iter().map(|(_, p)| p.len()))
    }
}

/// One bias-corrected Adam update at learning rate `hp.lr`. A non-finite or
/// mis-shaped gradient aborts the step before anything is modified.
pub fn adam_step<T: Real>(
    params: &mut [&mut Vec<T>],
    grads: &[&[T]],
    state: &mut AdamState<T>,
    hp: &Hyperparams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::config(format!(
            "{} parameter groups, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::config(format!("gradient group {i} has the wrong size")));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric(format!("non-finite gradient in group {i}; step aborted")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(hp.beta1), T::of(hp.beta2));
    let c1 = T::of(1.0 - hp.beta1.powi(t));
    let c2 = T::of(1.0 - hp.beta2.powi(t));
    let (lr, eps) = (T::of(hp.lr), T::of(hp.eps));
    let one = T::one();
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Divides the learning rate when validation loss has not strictly improved
/// on its running best for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    best: f64,
    wait: usize,
}

impl Default for PlateauScheduler {
    fn default() -> Self {
        PlateauScheduler {
            best: f64::INFINITY,
            wait: 0,
        }
    }
}

impl PlateauScheduler {
    /// Records one epoch's validation loss and returns the rate for the next
    /// epoch.
    pub fn observe(&mut self, val_loss: f64, lr: f64, hp: &Hyperparams) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= hp.plateau_patience {
            self.wait = 0;
            return (lr / hp.lr_reduce_factor).max(hp.min_lr);
        }
        lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Rate used during this epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_val: Option<f64>,
    /// 1-based epoch of `best_val`.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn push(&mut self, rec: EpochRecord) -> bool {
        let improved = self.best_val.is_none_or(|b| rec.val_loss < b);
        if improved {
            self.best_val = Some(rec.val_loss);
            self.best_epoch = Some(rec.epoch);
        }
        self.records.push(rec);
        improved
    }

    /// Equality ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &TrainHistory) -> bool {
        self.best_val == other.best_val
            && self.best_epoch == other.best_epoch
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                (a.epoch, a.train_loss, a.val_loss, a.lr) == (b.epoch, b.train_loss, b.val_loss, b.lr)
            })
    }
}

/// Learning rate after replaying the scheduler over every recorded epoch,
/// starting from `hp.lr`.
pub fn reduce_on_plateau(history: &TrainHistory, hp: &Hyperparams) -> Result<f64> {
    if history.records.is_empty() {
        return Err(Error::config("no epochs recorded"));
    }
    let mut sched = PlateauScheduler::default();
    Ok(history
        .records
        .iter()
        .fold(hp.lr, |lr, r| sched.observe(r.val_loss, lr, hp)))
}

/// Copies the pairs at `idx` into input and target tensors.
pub fn gather<T: Real>(pairs: &PairSet, idx: &[usize]) -> Result<(Tensor3<T>, Tensor3<T>)> {
    let cast = |rows: &Vec<Vec<f64>>| -> Vec<T> { idx.iter().flat_map(|&i| rows[i].iter().map(|&x| T::of(x))).collect() };
    let x = Tensor3::from_vec(idx.len(), pairs.in_channels, pairs.seg_len, cast(&pairs.inputs))?;
    let y = Tensor3::from_vec(idx.len(), pairs.out_channels, pairs.seg_len, cast(&pairs.targets))?;
    Ok((x, y))
}

/// Mean per-segment L1 loss in inference mode. The model is not modified.
pub fn validate<T: Real>(model: &Model<T>, pairs: &PairSet) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    let all: Vec<usize> = (0..pairs.len()).collect();
    let mut total = 0.0;
    for chunk in all.chunks(VAL_CHUNK) {
        let (x, y) = gather::<T>(pairs, chunk)?;
        let out = model.forward_infer(&x)?;
        if out.shape() != y.shape() {
            return Err(Error::config(format!(
                "targets have shape {:?}, model output is {:?}",
                y.shape(),
                out.shape()
            )));
        }
        total += out
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .sum::<f64>();
    }
    let loss = total / pairs.len() as f64;
    if !loss.is_finite() {
        return Err(Error::numeric("validation loss is not finite"));
    }
    Ok(loss)
}

/// Where `fit` writes checkpoints and its epoch log.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub checkpoint_dir: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

fn append_log(dir: &Path, rec: &EpochRecord) -> Result<()> {
    let path = dir.join(TRAIN_LOG);
    let mut f = File::options()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let line = serde_json::to_string(rec).expect("record serializes");
    writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
}

/// Trains for `hp.max_epochs` epochs and returns the model with the lowest
/// validation loss together with the per-epoch history.
///
/// Each batch contributes its L1 loss averaged over batch elements. Batches
/// are drawn in a seeded shuffled order; the last partial batch is kept.
pub fn fit<T: Real>(
    model: Model<T>,
    train: &PairSet,
    val: &PairSet,
    hp: &Hyperparams,
    opts: &FitOptions,
) -> Result<(Model<T>, TrainHistory)> {
    hp.validate()?;
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if val.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    let mut history = TrainHistory::default();
    if hp.max_epochs == 0 {
        return Ok((model, history));
    }
    if let Some(dir) = &opts.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log = dir.join(TRAIN_LOG);
        if log.exists() {
            fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
        }
    }

    let mut model = model;
    let mut best = model.clone();
    let mut state = AdamState::for_model(&model);
    let mut sched = PlateauScheduler::default();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step_hp = hp.clone();

    for epoch in 1..=hp.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(hp.batch_size) {
            let (x, y) = gather::<T>(train, batch)?;
            let scale = T::one() / T::of(batch.len() as f64);
            let (loss, grads) = model.loss_and_gradients_scaled(&x, &y, scale).map_err(|e| match e {
                Error::Numeric(m) => Error::numeric(format!("epoch {epoch}: {m}; training aborted")),
                other => other,
            })?;
            loss_sum += loss.as_f64();
            let g: Vec<&[T]> = grads.groups.iter().map(|(_, g)| g.as_slice()).collect();
            adam_step(&mut model.param_groups_mut(), &g, &mut state, &step_hp)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = validate(&model, val)?;
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: step_hp.lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        if opts.verbose {
            eprintln!(
                "epoch {epoch:>3}  train {train_loss:.6}  val {val_loss:.6}  lr {:.1e}  {:.1}s",
                rec.lr, rec.seconds
            );
        }
        let improved = history.push(rec.clone());
        if improved {
            best = model.clone();
        }
        if let Some(dir) = &opts.checkpoint_dir {
            if improved {
                save_checkpoint(&best, dir.join(BEST_CHECKPOINT))?;
            }
            save_checkpoint(&model, dir.join(LAST_CHECKPOINT))?;
            append_log(dir, &rec)?;
        }
        step_hp.lr = sched.observe(val_loss, step_hp.lr, hp);
    }
    Ok((best, history))
}
