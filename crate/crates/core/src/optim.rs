//! SGD with momentum and optional weight decay, plateau learning-rate decay
//! and best-validation checkpoint selection.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{self, LabelMask, MlpModel};
use crate::param::ParameterVector;
use crate::rng::sub_rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 16,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning rate must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// One momentum-SGD update: `g' = grad + wd * params`,
/// `v' = momentum * v + g'`, `params' = params - lr * v'`.
pub fn sgd_step(
    params: &ParameterVector,
    grad: &ParameterVector,
    velocity: &ParameterVector,
    cfg: &SgdConfig,
) -> Result<(ParameterVector, ParameterVector)> {
    if params.len() != grad.len() || params.len() != velocity.len() {
        return Err(Error::shape("params, grad and velocity must have equal lengths"));
    }
    let mut new_velocity = velocity.clone();
    new_velocity.scale(cfg.momentum);
    new_velocity.axpy(1.0, grad)?;
    if cfg.weight_decay != 0.0 {
        new_velocity.axpy(cfg.weight_decay, params)?;
    }
    let mut new_params = params.clone();
    new_params.axpy(-cfg.learning_rate, &new_velocity)?;
    Ok((new_params, new_velocity))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlateauConfig {
    /// Multiplier applied to the learning rate on plateau.
    pub factor: f64,
    /// Number of consecutive non-improving epochs before a decay.
    pub patience: u32,
    /// Improvement means `loss < best - min_delta`.
    pub min_delta: f64,
    /// Training stops once the learning rate falls below this value.
    pub lr_floor: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.1,
            patience: 1,
            min_delta: 0.0,
            lr_floor: 1e-6,
        }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::config("plateau factor must lie in (0, 1)"));
        }
        if self.patience == 0 {
            return Err(Error::config("plateau patience must be at least 1"));
        }
        if self.min_delta < 0.0 {
            return Err(Error::config("plateau min_delta must be nonnegative"));
        }
        Ok(())
    }
}

/// Reduce-on-plateau state. The learning rate never increases.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    cfg: PlateauConfig,
    current_lr: f64,
    best: Option<f64>,
    bad_epochs: u32,
}

impl PlateauSchedule {
    pub fn new(initial_lr: f64, cfg: PlateauConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(PlateauSchedule {
            cfg,
            current_lr: initial_lr,
            best: None,
            bad_epochs: 0,
        })
    }

    pub fn current_lr(&self) -> f64 {
        self.current_lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Feeds one epoch's validation loss. Strict improvement over the best
    /// value seen so far keeps the rate; otherwise, after `patience`
    /// consecutive non-improving epochs the rate is multiplied by `factor`.
    pub fn update(&mut self, val_loss: f64) -> Result<()> {
        if !val_loss.is_finite() {
            return Err(Error::numeric("validation loss is not finite"));
        }
        let improved = match self.best {
            None => true,
            Some(best) => val_loss < best - self.cfg.min_delta,
        };
        if improved {
            self.best = Some(val_loss);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.cfg.patience {
                self.current_lr *= self.cfg.factor;
                self.bad_epochs = 0;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Outcome of a training run; the best epoch attains the minimum recorded
/// validation loss, ties going to the earlier epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_parameters: ParameterVector,
}

impl TrainRecord {
    /// CSV with columns `epoch,train_loss,val_loss,lr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_loss, e.lr));
        }
        out
    }
}

/// A dataset prepared for training: one row per sample, with each sample's
/// own domain mask and its id (soft-target lookups key on the id).
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub inputs: Matrix,
    pub targets: Matrix,
    pub masks: Vec<LabelMask>,
    pub sample_ids: Vec<usize>,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            return Err(Error::config(format!("{what} set is empty")));
        }
        if self.targets.rows() != self.len()
            || self.masks.len() != self.len()
            || self.sample_ids.len() != self.len()
        {
            return Err(Error::shape(format!("{what} set fields disagree in length")));
        }
        Ok(())
    }

    fn gather(&self, indices: &[usize]) -> (Matrix, Matrix, Vec<LabelMask>, Vec<usize>) {
        (
            self.inputs.gather_rows(indices),
            self.targets.gather_rows(indices),
            indices.iter().map(|&i| self.masks[i].clone()).collect(),
            indices.iter().map(|&i| self.sample_ids[i]).collect(),
        )
    }
}

/// Additional loss attached to each training step (a regularizer).
///
/// Returns the penalty value and its exact gradient with respect to the
/// model parameters for this batch.
pub trait ExtraLoss: Sync {
    fn eval(
        &self,
        model: &MlpModel,
        batch_inputs: &Matrix,
        batch_sample_ids: &[usize],
    ) -> Result<(f64, ParameterVector)>;
}

/// Mean masked BCE of a model over a whole set (no regularizer).
pub fn evaluate_loss(model: &MlpModel, set: &TrainSet) -> Result<f64> {
    let probs = model.forward(&set.inputs)?;
    nn::masked_bce_per_row(&probs, &set.targets, &set.masks)
}

/// Seeded mini-batch training with momentum SGD, plateau decay and
/// best-validation selection.
///
/// Per step the objective is the per-row masked BCE plus `extra` when given;
/// the recorded validation loss is the plain data loss. On return the model
/// holds the best-epoch parameters (also stored in the record). Mini-batch
/// order is reshuffled every epoch from `shuffle_seed`. Training stops early
/// once plateau decay pushes the learning rate below the configured floor.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    model: &mut MlpModel,
    train: &TrainSet,
    val: &TrainSet,
    cfg: &SgdConfig,
    plateau_cfg: &PlateauConfig,
    epochs: usize,
    shuffle_seed: u64,
    extra: Option<&dyn ExtraLoss>,
) -> Result<TrainRecord> {
    cfg.validate()?;
    train.validate("train")?;
    val.validate("validation")?;
    if epochs == 0 {
        return Err(Error::config("epochs must be at least 1"));
    }

    let mut params = model.get_parameters();
    let mut velocity = ParameterVector::zeros(model.layout());
    let mut schedule = PlateauSchedule::new(cfg.learning_rate, plateau_cfg.clone())?;
    let mut stats = Vec::with_capacity(epochs);
    let mut best: Option<(usize, f64, ParameterVector)> = None;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..epochs {
        let lr = schedule.current_lr();
        let step_cfg = SgdConfig {
            learning_rate: lr,
            ..cfg.clone()
        };
        let mut rng = sub_rng(shuffle_seed, &format!("epoch-{epoch}"));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut cell_sum = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (inputs, targets, masks, ids) = train.gather(chunk);
            model.set_parameters(&params)?;
            let (data_loss, mut grad) =
                nn::backward_per_row(model, &inputs, &targets, &masks)?;
            let mut step_loss = data_loss;
            if let Some(hook) = extra {
                let (extra_loss, extra_grad) = hook.eval(model, &inputs, &ids)?;
                step_loss += extra_loss;
                grad.axpy(1.0, &extra_grad)?;
            }
            let cells: usize = masks.iter().map(LabelMask::num_active).sum();
            loss_sum += step_loss * cells as f64;
            cell_sum += cells;
            let (p, v) = sgd_step(&params, &grad, &velocity, &step_cfg)?;
            params = p;
            velocity = v;
        }
        model.set_parameters(&params)?;
        let train_loss = loss_sum / cell_sum as f64;
        let val_loss = evaluate_loss(model, val)?;
        stats.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            lr,
        });

        let is_better = best.as_ref().map_or(true, |(_, b, _)| val_loss < *b);
        if is_better {
            best = Some((epoch, val_loss, params.clone()));
        }

        schedule.update(val_loss)?;
        if schedule.current_lr() < plateau_cfg.lr_floor {
            break;
        }
    }

    let (best_epoch, best_val_loss, best_parameters) =
        best.expect("at least one epoch was recorded");
    model.set_parameters(&best_parameters)?;
    Ok(TrainRecord {
        epochs: stats,
        best_epoch,
        best_val_loss,
        best_parameters,
    })
}
