//! Minibatch Adam training with validation-driven learning-rate decay and
//! early stopping.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Adam, BatchNorm, DenseMatrix, Tape, Var};
use crate::error::{Error, Result};
use crate::neural::network::{BnMode, NetInput, Network};
use crate::rng::rng_from;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stagnant epochs before stopping.
    pub patience: usize,
    /// Stagnant epochs before the learning rate is multiplied by `lr_factor`.
    pub lr_patience: usize,
    pub lr_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 100,
            max_epochs: 1000,
            patience: 12,
            lr_patience: 10,
            lr_factor: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.lr_patience == 0 {
            return Err(Error::Config("patience values must be positive".into()));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config(format!("lr_factor must lie in (0, 1), got {}", self.lr_factor)));
        }
        if self.batch_size < 2 || self.max_epochs == 0 || !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "batch size ≥ 2, at least one epoch, positive learning rate and non-negative decay required".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpochOutcome {
    Improved,
    Stagnant,
    DecayLr,
    Stop,
}

/// Tracks validation loss across epochs.
#[derive(Clone, Debug)]
pub struct Plateau {
    patience: usize,
    lr_patience: usize,
    best: f64,
    since_best: usize,
    since_decay: usize,
}

impl Plateau {
    pub fn new(patience: usize, lr_patience: usize) -> Self {
        Self {
            patience,
            lr_patience,
            best: f64::INFINITY,
            since_best: 0,
            since_decay: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, val: f64) -> EpochOutcome {
        if val < self.best {
            self.best = val;
            self.since_best = 0;
            self.since_decay = 0;
            return EpochOutcome::Improved;
        }
        self.since_best += 1;
        self.since_decay += 1;
        if self.since_best >= self.patience {
            EpochOutcome::Stop
        } else if self.since_decay >= self.lr_patience {
            self.since_decay = 0;
            EpochOutcome::DecayLr
        } else {
            EpochOutcome::Stagnant
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub final_lr: f64,
    pub val_history: Vec<f64>,
}

/// Inputs and targets for training or validation.
#[derive(Clone, Debug)]
pub struct TrainData<T> {
    pub input: NetInput<T>,
    pub y: Vec<T>,
}

impl<T: Scalar> TrainData<T> {
    pub fn new(input: NetInput<T>, y: Vec<T>) -> Result<Self> {
        if input.rows() != y.len() {
            return Err(Error::shape("train_data", format!("{} rows, {} targets", input.rows(), y.len())));
        }
        Ok(Self { input, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

fn mse<T: Scalar>(pred: &[T], y: &[T]) -> f64 {
    pred.iter().zip(y).map(|(&p, &t)| ((p - t) * (p - t)).as_f64()).sum::<f64>() / y.len().max(1) as f64
}

/// Trains `net` in place; on return it holds the best-validation weights.
pub fn train<T: Scalar>(net: &mut Network<T>, train: &TrainData<T>, val: &TrainData<T>, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train.len() < 2 || val.is_empty() {
        return Err(Error::Contract(format!(
            "training needs at least 2 training rows and 1 validation row, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let arch = net.arch;
    let prepared = net.prepare(&train.input);
    let mut opt = Adam::new(&net.params, T::lit(cfg.lr), T::lit(cfg.weight_decay));
    let mut plateau = Plateau::new(cfg.patience, cfg.lr_patience);
    let mut rng = rng_from(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: (Vec<DenseMatrix<T>>, Option<BatchNorm<T>>) = (net.params.clone(), net.bn.clone());
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut epochs = 0;

    for epoch in 1..=cfg.max_epochs {
        epochs = epoch;
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let input = prepared.select_rows(batch);
            let target = DenseMatrix::column_vector(batch.iter().map(|&i| train.y[i]).collect());
            let mut tape = Tape::new();
            let vars: Vec<Var> = net.params.iter().map(|p| tape.param(p.clone())).collect();
            let out = Network::forward(&arch, &mut tape, &vars, &input, net.bn.as_mut().map(BnMode::Train))?;
            let t = tape.constant(target);
            let loss = tape.mse(out, t)?;
            let lv = tape.value(loss)[(0, 0)];
            if !lv.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("training loss became {lv}"),
                });
            }
            let grads = tape.backward(loss)?;
            let g: Vec<DenseMatrix<T>> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();
            opt.step(&mut net.params, &g).map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::Divergence { epoch, detail },
                other => other,
            })?;
        }
        let val_mse = mse(&net.predict(&val.input)?, &val.y);
        if !val_mse.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("validation loss became {val_mse}"),
            });
        }
        history.push(val_mse);
        match plateau.observe(val_mse) {
            EpochOutcome::Improved => {
                best = (net.params.clone(), net.bn.clone());
                best_epoch = epoch;
            }
            EpochOutcome::Stagnant => {}
            EpochOutcome::DecayLr => opt.lr = opt.lr * T::lit(cfg.lr_factor),
            EpochOutcome::Stop => break,
        }
    }
    net.params = best.0;
    net.bn = best.1;
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_val_mse: plateau.best(),
        final_lr: opt.lr.as_f64(),
        val_history: history,
    })
}
