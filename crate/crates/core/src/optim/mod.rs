//! Optimizers, learning-rate schedules, augmentation and the training loop.

mod augment;
mod train;

pub use augment::{apply_transforms, augment, AugmentFlags, ImageTransform};
pub use train::{
    evaluate, train, train_observed, EvalResult, History, HistoryRow, TrainSet, Trainable,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptimizerKind {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr, .. } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Multiply by `factor` at each step listed in `drops`.
    Step {
        drops: Vec<usize>,
        factor: f64,
    },
    /// `lr₀·(1 + cos(π·t/T))/2`.
    Cosine {
        total_steps: usize,
    },
}

impl Schedule {
    pub fn lr_at(&self, base: f64, step: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Step { drops, factor } => {
                base * factor.powi(drops.iter().filter(|&&d| step >= d).count() as i32)
            }
            Schedule::Cosine { total_steps } => {
                let t = (step as f64 / (*total_steps).max(1) as f64).min(1.0);
                base * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
            }
        }
    }
}

/// Which parameters an optimizer may change.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "prefixes", rename_all = "snake_case")]
pub enum ParamFilter {
    #[default]
    All,
    StitcherOnly,
    /// Parameters whose name starts with one of these prefixes.
    Named(Vec<String>),
}

impl ParamFilter {
    pub fn matches(&self, name: &str) -> bool {
        match self {
            ParamFilter::All => true,
            ParamFilter::StitcherOnly => name.starts_with("stitch."),
            ParamFilter::Named(prefixes) => prefixes.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub augment: AugmentFlags,
    pub seed: u64,
    #[serde(default)]
    pub filter: ParamFilter,
    /// Evaluate on the held-out set every this many epochs (0: only at the end).
    #[serde(default)]
    pub eval_every_epochs: usize,
}

impl TrainConfig {
    /// SGD with momentum 0.9, weight decay 1e-4 and learning rate 0.05,
    /// dropped by 0.2 at half and three quarters of the budget.
    pub fn base(steps: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Sgd {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            schedule: Schedule::Step {
                drops: if steps >= 4 {
                    vec![steps / 2, steps * 3 / 4]
                } else {
                    Vec::new()
                },
                factor: 0.2,
            },
            steps,
            batch_size,
            augment: AugmentFlags::STANDARD,
            seed,
            filter: ParamFilter::All,
            eval_every_epochs: 0,
        }
    }

    /// Adam at 1e-3 with cosine decay over `steps`, stitcher parameters only,
    /// no augmentation.
    pub fn stitcher(steps: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            schedule: Schedule::Cosine { total_steps: steps },
            steps,
            batch_size,
            augment: AugmentFlags::NONE,
            seed,
            filter: ParamFilter::StitcherOnly,
            eval_every_epochs: 0,
        }
    }

    /// `steps` may be zero, which leaves a model untouched.
    pub fn validate(&self) -> Result<()> {
        let lr = self.optimizer.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(
                "train config",
                format!("learning rate must be positive, got {lr}"),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid(
                "train config",
                "batch size must be positive",
            ));
        }
        if let Schedule::Step { drops, factor } = &self.schedule {
            if drops.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(
                    "train config",
                    format!("drops {drops:?} are not strictly increasing"),
                ));
            }
            if drops.last().is_some_and(|&d| d >= self.steps) {
                return Err(Error::invalid(
                    "train config",
                    format!("drops {drops:?} reach past {} steps", self.steps),
                ));
            }
            if !(*factor > 0.0) {
                return Err(Error::invalid(
                    "train config",
                    "drop factor must be positive",
                ));
            }
        }
        if let OptimizerKind::Adam {
            beta1,
            beta2,
            epsilon,
            ..
        } = self.optimizer
        {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(epsilon > 0.0) {
                return Err(Error::invalid(
                    "train config",
                    "Adam needs betas in [0, 1) and epsilon > 0",
                ));
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("config serializes"),
        ))
    }
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
pub fn sgd_step(
    value: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_same_shape("sgd_step", value, grad)?;
    check_same_shape("sgd_step", value, velocity)?;
    let (lr, mu, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    for ((p, &g), v) in value
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        let d = if wd != 0.0 { g + wd * *p } else { g };
        *v = if mu != 0.0 { mu * *v + d } else { d };
        *p -= lr * *v;
    }
    Ok(())
}

/// Bias-corrected Adam; `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    value: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) -> Result<()> {
    check_same_shape("adam_step", value, grad)?;
    check_same_shape("adam_step", value, m)?;
    check_same_shape("adam_step", value, v)?;
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for (((p, &g), m), v) in value
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        let g = g as f64;
        let mm = beta1 * *m as f64 + (1.0 - beta1) * g;
        let vv = beta2 * *v as f64 + (1.0 - beta2) * g * g;
        *m = mm as f32;
        *v = vv as f32;
        *p = (*p as f64 - lr * (mm / c1) / ((vv / c2).sqrt() + epsilon)) as f32;
    }
    Ok(())
}

/// Per-parameter optimizer memory, in the order parameters are visited.
#[derive(Clone, Debug, Default)]
pub struct OptimState {
    slots: Vec<(Tensor, Tensor)>,
    t: u64,
}

impl OptimState {
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(
        &mut self,
        slot: usize,
        value: &mut Tensor,
        grad: &Tensor,
        kind: &OptimizerKind,
        lr: f64,
    ) -> Result<()> {
        if slot == self.slots.len() {
            self.slots
                .push((Tensor::zeros(value.shape()), Tensor::zeros(value.shape())));
        }
        let (a, b) = &mut self.slots[slot];
        match *kind {
            OptimizerKind::Sgd {
                momentum,
                weight_decay,
                ..
            } => sgd_step(value, grad, a, lr, momentum, weight_decay),
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
                ..
            } => adam_step(value, grad, a, b, self.t, lr, beta1, beta2, epsilon),
        }
    }
}
