//! SGD with momentum and weight decay, learning-rate schedules, and early
//! stopping.
//!
//! The update is
//!
//! ```text
//! b_t     = mu * b_{t-1} + grad L(theta_{t-1}) + lambda * theta_{t-1}
//! theta_t = theta_{t-1} - gamma * b_t
//! ```
//!
//! with `b_0 = 0`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub momentum: f64,
    pub weight_decay: f64,
    pub learning_rate: f64,
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    theta: Vec<f64>,
    buffer: Vec<f64>,
    step_count: usize,
    hyper: Hyper,
}

impl OptimizerState {
    pub fn new(theta: Vec<f64>, hyper: Hyper) -> Result<Self> {
        hyper.validate()?;
        let buffer = vec![0.0; theta.len()];
        Ok(Self {
            theta,
            buffer,
            step_count: 0,
            hyper,
        })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn into_theta(self) -> Vec<f64> {
        self.theta
    }

    pub fn buffer(&self) -> &[f64] {
        &self.buffer
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn hyper(&self) -> Hyper {
        self.hyper
    }

    pub fn set_learning_rate(&mut self, gamma: f64) -> Result<()> {
        let hyper = Hyper {
            learning_rate: gamma,
            ..self.hyper
        };
        hyper.validate()?;
        self.hyper = hyper;
        Ok(())
    }

    /// Applies one update in place.
    pub fn step(&mut self, grad: &[f64]) -> Result<()> {
        if grad.len() != self.theta.len() {
            return Err(Error::DimensionMismatch(self.theta.len(), grad.len()));
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        let Hyper {
            momentum,
            weight_decay,
            learning_rate,
        } = self.hyper;
        for ((theta, b), &g) in self.theta.iter_mut().zip(&mut self.buffer).zip(grad) {
            *b = momentum * *b + g + weight_decay * *theta;
            *theta -= learning_rate * *b;
        }
        self.step_count += 1;
        Ok(())
    }
}

/// Value-returning form of [`OptimizerState::step`].
pub fn sgd_step(state: &OptimizerState, grad: &[f64]) -> Result<OptimizerState> {
    let mut next = state.clone();
    next.step(grad)?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    best: Option<f64>,
    bad_epochs: usize,
    multiplier: f64,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize, min_delta: f64) -> Self {
        Self {
            factor,
            patience,
            min_delta,
            best: None,
            bad_epochs: 0,
            multiplier: 1.0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    fn observe(&mut self, loss: f64) -> f64 {
        match self.best {
            Some(best) if loss.is_nan() || loss >= best - self.min_delta => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.multiplier *= self.factor;
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
            }
        }
        self.multiplier
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    /// Divide the rate by `1/factor` after `patience` epochs without strict
    /// improvement of the validation loss.
    Plateau(Plateau),
    /// Fixed schedule of `total` epochs, multiplied by `factor` at each
    /// milestone epoch (1-based; the milestone epoch already uses the
    /// reduced rate).
    OneX {
        total: usize,
        milestones: Vec<usize>,
        factor: f64,
    },
    Constant,
}

impl LrSchedule {
    pub fn plateau() -> Self {
        LrSchedule::Plateau(Plateau::new(0.1, 5, 0.0))
    }

    pub fn one_x() -> Self {
        LrSchedule::OneX {
            total: 12,
            milestones: vec![7, 10],
            factor: 0.1,
        }
    }

    /// Learning-rate multiplier for epoch `epoch` (1-based).
    ///
    /// For `OneX` the multiplier applies to that epoch. For `Plateau` it is
    /// the multiplier after observing that epoch's validation loss, i.e. the
    /// one to use from the next epoch on.
    pub fn schedule_epoch(&mut self, epoch: usize, val_loss: Option<f64>) -> Result<f64> {
        match self {
            LrSchedule::Plateau(p) => {
                let loss = val_loss.ok_or_else(|| {
                    Error::InvalidArgument("plateau schedule needs a validation loss".into())
                })?;
                Ok(p.observe(loss))
            }
            LrSchedule::OneX {
                total,
                milestones,
                factor,
            } => {
                if epoch == 0 || epoch > *total {
                    return Err(Error::InvalidArgument(format!(
                        "epoch {epoch} outside the 1..={total} schedule"
                    )));
                }
                let drops = milestones.iter().filter(|&&m| m <= epoch).count();
                Ok(factor.powi(drops as i32))
            }
            LrSchedule::Constant => Ok(1.0),
        }
    }

    /// Number of epochs for fixed schedules.
    pub fn total_epochs(&self) -> Option<usize> {
        match self {
            LrSchedule::OneX { total, .. } => Some(*total),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopVerdict {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Best<W> {
    pub loss: f64,
    pub epoch: usize,
    pub weights: W,
}

/// Tracks the best validation loss and its weights; stops after `patience`
/// epochs without strict improvement or at `max_epochs`.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper<W> {
    pub patience: usize,
    pub max_epochs: usize,
    pub min_delta: f64,
    best: Option<Best<W>>,
    bad_epochs: usize,
}

impl<W: Clone> Default for EarlyStopper<W> {
    fn default() -> Self {
        Self::new(10, 200)
    }
}

impl<W: Clone> EarlyStopper<W> {
    pub fn new(patience: usize, max_epochs: usize) -> Self {
        Self {
            patience,
            max_epochs,
            min_delta: 0.0,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn best(&self) -> Option<&Best<W>> {
        self.best.as_ref()
    }

    pub fn into_best(self) -> Option<Best<W>> {
        self.best
    }

    pub fn update(&mut self, epoch: usize, val_loss: f64, weights: &W) -> StopVerdict {
        let improved = match &self.best {
            None => val_loss.is_finite(),
            Some(b) => val_loss < b.loss - self.min_delta,
        };
        if improved {
            self.best = Some(Best {
                loss: val_loss,
                epoch,
                weights: weights.clone(),
            });
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs >= self.patience || epoch >= self.max_epochs {
            StopVerdict::Stop
        } else {
            StopVerdict::Continue
        }
    }
}

/// One line of a training trace:
/// `epoch<TAB>gamma<TAB>train_loss<TAB>val_loss<TAB>action`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub gamma: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub action: TraceAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceAction {
    Continue,
    LrDrop,
    Stop,
}

impl TraceAction {
    fn as_str(self) -> &'static str {
        match self {
            TraceAction::Continue => "continue",
            TraceAction::LrDrop => "lr_drop",
            TraceAction::Stop => "stop",
        }
    }
}

impl fmt::Display for TraceRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let val = self
            .val_loss
            .map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        write!(
            f,
            "{}\t{:.6e}\t{:.6}\t{}\t{}",
            self.epoch,
            self.gamma,
            self.train_loss,
            val,
            self.action.as_str()
        )
    }
}

impl FromStr for TraceRow {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = || Error::Schema(format!("malformed trace line {line:?}"));
        let f: Vec<&str> = line.split('\t').collect();
        let [epoch, gamma, train, val, action] = f.as_slice() else {
            return Err(bad());
        };
        let action = match *action {
            "continue" => TraceAction::Continue,
            "lr_drop" => TraceAction::LrDrop,
            "stop" => TraceAction::Stop,
            _ => return Err(bad()),
        };
        Ok(TraceRow {
            epoch: epoch.parse().map_err(|_| bad())?,
            gamma: gamma.parse().map_err(|_| bad())?,
            train_loss: train.parse().map_err(|_| bad())?,
            val_loss: match *val {
                "-" => None,
                v => Some(v.parse().map_err(|_| bad())?),
            },
            action,
        })
    }
}

/// `L(theta) = 0.5 * |A theta - y|^2`, the reference objective for gradient
/// and convergence checks.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub a: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl LeastSquares {
    pub fn loss(&self, theta: &[f64]) -> f64 {
        let r = &self.a * DVector::from_column_slice(theta) - &self.y;
        0.5 * r.norm_squared()
    }

    /// `A^T (A theta - y)`.
    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let r = &self.a * DVector::from_column_slice(theta) - &self.y;
        (self.a.transpose() * r).as_slice().to_vec()
    }

    /// Least-squares minimizer, when `A^T A` is invertible.
    pub fn minimizer(&self) -> Option<Vec<f64>> {
        let ata = self.a.transpose() * &self.a;
        let aty = self.a.transpose() * &self.y;
        ata.cholesky().map(|c| c.solve(&aty).as_slice().to_vec())
    }
}
