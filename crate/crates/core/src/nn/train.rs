//! Mini-batch training with Adam and validation-based early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{batch_cross_entropy, cross_entropy_grad, loss_mse, mse_grad};
use super::matrix::Matrix;
use super::model::{Batch, HeadKind, SequenceModel};
use super::optim::Adam;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub random_seed: u64,
    pub loss: LossKind,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(NnError::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(NnError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Windows of feature vectors with next-vector targets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DenseWindows {
    pub steps: usize,
    pub features: usize,
    /// `len x steps x features`
    pub inputs: Vec<f64>,
    /// `len x features`
    pub targets: Vec<f64>,
}

/// Windows of token ids with next-token targets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenWindows {
    pub steps: usize,
    /// `len x steps`
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WindowData {
    Dense(DenseWindows),
    Tokens(TokenWindows),
}

impl DenseWindows {
    pub fn len(&self) -> usize {
        self.targets.len().checked_div(self.features).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, window: &[Vec<f64>], target: &[f64]) {
        for v in window {
            self.inputs.extend_from_slice(v);
        }
        self.targets.extend_from_slice(target);
    }

    fn gather(&self, idx: &[usize]) -> (Vec<f64>, Matrix) {
        let w = self.steps * self.features;
        let mut inputs = Vec::with_capacity(idx.len() * w);
        let mut targets = Vec::with_capacity(idx.len() * self.features);
        for &i in idx {
            inputs.extend_from_slice(&self.inputs[i * w..(i + 1) * w]);
            targets.extend_from_slice(&self.targets[i * self.features..(i + 1) * self.features]);
        }
        (inputs, Matrix::from_vec(idx.len(), self.features, targets))
    }
}

impl TokenWindows {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn push(&mut self, window: &[usize], target: usize) {
        self.inputs.extend_from_slice(window);
        self.targets.push(target);
    }

    fn gather(&self, idx: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let mut inputs = Vec::with_capacity(idx.len() * self.steps);
        for &i in idx {
            inputs.extend_from_slice(&self.inputs[i * self.steps..(i + 1) * self.steps]);
        }
        (inputs, idx.iter().map(|&i| self.targets[i]).collect())
    }
}

impl WindowData {
    pub fn len(&self) -> usize {
        match self {
            WindowData::Dense(d) => d.len(),
            WindowData::Tokens(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean loss over the windows `idx`, plus parameter gradients when `train`
/// is set.
fn batch_pass(
    model: &SequenceModel,
    data: &WindowData,
    idx: &[usize],
    train: bool,
) -> Result<(f64, Option<super::model::Gradients>), NnError> {
    match data {
        WindowData::Dense(d) => {
            let (inputs, targets) = d.gather(idx);
            let batch = Batch::Dense {
                data: &inputs,
                batch: idx.len(),
                steps: d.steps,
                features: d.features,
            };
            let (pred, cache) = model.forward(&batch)?;
            let loss = loss_mse(&pred.data, &targets.data);
            let grads = if train {
                Some(model.backward(&cache, &mse_grad(&pred, &targets))?)
            } else {
                None
            };
            Ok((loss, grads))
        }
        WindowData::Tokens(t) => {
            let (inputs, targets) = t.gather(idx);
            let batch = Batch::Tokens {
                ids: &inputs,
                batch: idx.len(),
                steps: t.steps,
            };
            let (probs, cache) = model.forward(&batch)?;
            let loss = batch_cross_entropy(&probs, &targets);
            let grads = if train {
                Some(model.backward(&cache, &cross_entropy_grad(&probs, &targets))?)
            } else {
                None
            };
            Ok((loss, grads))
        }
    }
}

/// Mean loss over all windows, evaluated in chunks of `chunk`.
pub fn evaluate_loss(model: &SequenceModel, data: &WindowData, chunk: usize) -> Result<f64, NnError> {
    let n = data.len();
    if n == 0 {
        return Ok(f64::NAN);
    }
    let idx: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for part in idx.chunks(chunk.max(1)) {
        let (loss, _) = batch_pass(model, data, part, false)?;
        total += loss * part.len() as f64;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,validation_loss\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.12e},{:.12e}\n",
                e.epoch, e.train_loss, e.validation_loss
            ));
        }
        out
    }
}

/// Train `model` in place and restore the parameters of the best epoch.
///
/// The monitored quantity is the validation loss, or the training loss when
/// `validation` is empty. Training stops once it has failed to improve for
/// `patience` consecutive epochs.
pub fn train(
    model: &mut SequenceModel,
    training: &WindowData,
    validation: &WindowData,
    config: &TrainConfig,
) -> Result<TrainHistory, NnError> {
    config.validate()?;
    if training.is_empty() {
        return Err(NnError::EmptyTrainingSet);
    }
    let expected = match model.spec.head {
        HeadKind::Regression => LossKind::Mse,
        HeadKind::Classification => LossKind::CrossEntropy,
    };
    if config.loss != expected {
        return Err(NnError::Config(format!(
            "{:?} loss does not fit a {:?} head",
            config.loss, model.spec.head
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.random_seed);
    let mut optimizer = Adam::new(model, config.learning_rate);
    let mut order: Vec<usize> = (0..training.len()).collect();
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best = f64::INFINITY;
    let mut best_model = model.clone();
    let mut wait = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for part in order.chunks(config.batch_size) {
            let (loss, grads) = batch_pass(model, training, part, true)?;
            if !loss.is_finite() {
                return Err(NnError::NonFinite(format!(
                    "training loss {loss} at epoch {epoch} (batch of {})",
                    part.len()
                )));
            }
            total += loss * part.len() as f64;
            optimizer.step(model, &grads.expect("training pass returns gradients"));
        }
        let train_loss = total / training.len() as f64;
        let validation_loss = if validation.is_empty() {
            evaluate_loss(model, training, config.batch_size)?
        } else {
            evaluate_loss(model, validation, config.batch_size)?
        };
        if !validation_loss.is_finite() {
            return Err(NnError::NonFinite(format!(
                "validation loss {validation_loss} at epoch {epoch}"
            )));
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            validation_loss,
        });
        if validation_loss < best {
            best = validation_loss;
            best_model.clone_from(model);
            history.best_epoch = epoch;
            wait = 0;
        } else {
            wait += 1;
            if wait > config.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    *model = best_model;
    Ok(history)
}
