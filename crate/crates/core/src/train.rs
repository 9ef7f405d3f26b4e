//! Mini-batch SGD loop with minimum-validation-loss checkpoint selection,
//! shared by base-model and fusion-head training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{NnError, ParamSet, Sgd, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
}

impl TrainingLog {
    /// Epoch with the lowest validation loss; ties go to the earlier epoch.
    pub fn argmin_val(&self) -> Option<usize> {
        let mut best: Option<&EpochRecord> = None;
        for r in &self.epochs {
            if best.is_none_or(|b| r.val_loss < b.val_loss) {
                best = Some(r);
            }
        }
        best.map(|r| r.epoch)
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    DivergedLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// A model the loop can optimise: its parameter groups (frozen groups are
/// allowed and stay untouched) and a recorded batch → logits map.
pub trait Trainable {
    fn param_sets(&self) -> Vec<&ParamSet>;
    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet>;
    fn logits(&self, tape: &mut Tape, bound: &[Vec<Var>], batch: Var) -> Result<Var, NnError>;
}

/// Per-sample inputs and class-index targets.
#[derive(Debug, Clone, Copy)]
pub struct Dataset<'a> {
    pub inputs: &'a [Tensor],
    pub targets: &'a [usize],
}

impl<'a> Dataset<'a> {
    pub fn new(inputs: &'a [Tensor], targets: &'a [usize]) -> Self {
        assert_eq!(
            inputs.len(),
            targets.len(),
            "inputs and targets differ in length"
        );
        Self { inputs, targets }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

fn gather(data: &Dataset<'_>, idx: &[usize]) -> Result<(Tensor, Vec<usize>), NnError> {
    let items: Vec<Tensor> = idx.iter().map(|&i| data.inputs[i].clone()).collect();
    Ok((
        Tensor::stack(&items)?,
        idx.iter().map(|&i| data.targets[i]).collect(),
    ))
}

/// Logits for every input, computed in batches without recording.
pub fn batched_logits<M: Trainable>(
    model: &M,
    inputs: &[Tensor],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>, NnError> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        let mut tape = Tape::inference();
        let bound: Vec<Vec<Var>> = model
            .param_sets()
            .iter()
            .map(|s| s.bind(&mut tape))
            .collect();
        let x = tape.input(Tensor::stack(chunk)?);
        let z = model.logits(&mut tape, &bound, x)?;
        let v = tape.value(z);
        let k = v.shape()[1];
        out.extend(v.data().chunks(k).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Weighted cross-entropy over the whole set (sample mean).
pub fn mean_loss<M: Trainable>(
    model: &M,
    data: Dataset<'_>,
    class_weights: &[f64],
    batch_size: usize,
) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptySet("evaluation"));
    }
    let mut total = 0.0;
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(batch_size.max(1)) {
        let (x, t) = gather(&data, idx)?;
        let mut tape = Tape::inference();
        let bound: Vec<Vec<Var>> = model
            .param_sets()
            .iter()
            .map(|s| s.bind(&mut tape))
            .collect();
        let xv = tape.input(x);
        let z = model.logits(&mut tape, &bound, xv)?;
        let l = tape.weighted_cross_entropy(z, &t, class_weights)?;
        total += tape.value(l).data()[0] * idx.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Trains for `cfg.epochs` epochs and restores the parameters of the epoch
/// with the lowest validation loss.
pub fn fit<M: Trainable>(
    model: &mut M,
    train: Dataset<'_>,
    val: Dataset<'_>,
    class_weights: &[f64],
    cfg: &TrainConfig,
) -> Result<TrainingLog, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(TrainError::BadConfig(format!("{cfg:?}")));
    }
    let opt = Sgd::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, Vec<ParamSet>)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, t) = gather(&train, idx)?;
            let mut tape = Tape::new();
            let bound: Vec<Vec<Var>> = model
                .param_sets()
                .iter()
                .map(|s| s.bind(&mut tape))
                .collect();
            let xv = tape.input(x);
            let z = model.logits(&mut tape, &bound, xv)?;
            let l = tape.weighted_cross_entropy(z, &t, class_weights)?;
            let loss = tape.value(l).data()[0];
            if !loss.is_finite() {
                return Err(TrainError::DivergedLoss {
                    epoch,
                    batch: bi,
                    loss,
                });
            }
            epoch_loss += loss * idx.len() as f64;
            let grads = tape.backward(l)?;
            for (set, b) in model.param_sets_mut().into_iter().zip(&bound) {
                if set.all_frozen() {
                    continue;
                }
                set.absorb(b, &grads)?;
                opt.step(set.as_mut_slice())?;
            }
        }
        let val_loss = mean_loss(model, val, class_weights, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(TrainError::DivergedLoss {
                epoch,
                batch: usize::MAX,
                loss: val_loss,
            });
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_loss,
        });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            let snapshot = model.param_sets().into_iter().cloned().collect();
            best = Some((val_loss, snapshot));
            log.selected_epoch = epoch;
        }
    }

    let (_, snapshot) = best.expect("at least one epoch");
    for (set, saved) in model.param_sets_mut().into_iter().zip(snapshot) {
        *set = saved;
    }
    Ok(log)
}
