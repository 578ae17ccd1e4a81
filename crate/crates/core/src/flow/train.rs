//! Rectified-flow training objective and the optimisation loop.

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Condition, MlpModel, Query, VelocityModel};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone)]
pub struct TrainExample {
    pub x0: Vec<f64>,
    pub cond: Condition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub schedule: Schedule,
    /// Momentum for SGD, first-moment decay for Adam.
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Probability of replacing a condition by the null condition.
    pub cond_dropout: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            schedule: Schedule::Cosine,
            momentum: 0.9,
            steps: 2000,
            batch_size: 32,
            cond_dropout: 0.1,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid(
                "learning rate, steps and batch size must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::invalid("condition dropout must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.grad_clip < 0.0 {
            return Err(Error::invalid(
                "momentum must lie in [0, 1) and clip must be non-negative",
            ));
        }
        Ok(())
    }
}

pub struct LossAndGrad {
    pub loss: f64,
    /// Gradient buffer with the model's shape.
    pub grad: MlpModel,
}

struct Draw {
    t: f64,
    x1: Vec<f64>,
    drop: bool,
}

fn draws(batch: &[TrainExample], dim: usize, seed: u64, dropout: f64) -> Vec<Draw> {
    let mut r = rng::rng(seed);
    batch
        .iter()
        .map(|_| {
            // (0, 1]
            let t = 1.0 - r.random::<f64>();
            let drop = dropout > 0.0 && r.random::<f64>() < dropout;
            let x1 = rng::normal_vec(&mut r, dim);
            Draw { t, x1, drop }
        })
        .collect()
}

fn forward_batch(
    mlp: &MlpModel,
    batch: &[TrainExample],
    draws: &[Draw],
) -> (super::mlp::Forward, Array2<f64>, Array2<f64>) {
    let dim = mlp.dim();
    let xs: Vec<Vec<f64>> = batch
        .iter()
        .zip(draws)
        .map(|(ex, d)| {
            ex.x0
                .iter()
                .zip(&d.x1)
                .map(|(a, b)| (1.0 - d.t) * a + d.t * b)
                .collect()
        })
        .collect();
    let nulls: Vec<Condition> = batch.iter().map(|ex| ex.cond.to_null()).collect();
    let queries: Vec<Query<'_>> = xs
        .iter()
        .zip(batch)
        .zip(draws)
        .zip(&nulls)
        .map(|(((x, ex), d), n)| Query {
            x,
            t: d.t,
            cond: if d.drop { n } else { &ex.cond },
        })
        .collect();
    let (x, t, c) = mlp.pack(&queries);
    let fw = mlp.forward(x, t, c);
    let v = mlp.velocities(&fw);
    let mut target = Array2::zeros((batch.len(), dim));
    for (r, (ex, d)) in batch.iter().zip(draws).enumerate() {
        for (k, dst) in target.row_mut(r).iter_mut().enumerate() {
            *dst = d.x1[k] - ex.x0[k];
        }
    }
    (fw, v, target)
}

fn check_batch(mlp: &MlpModel, batch: &[TrainExample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    if batch
        .iter()
        .any(|ex| ex.x0.len() != mlp.dim() || ex.cond.dim() != mlp.cond_dim())
    {
        return Err(Error::invalid(
            "training example does not match network shape",
        ));
    }
    Ok(())
}

/// Batch mean of `|v(x_t, t | c) - (x1 - x0)|²` with `t ~ U(0, 1]`,
/// `x1 ~ N(0, I)` and condition dropout, plus its parameter gradient.
pub fn flow_matching_loss(
    model: &VelocityModel,
    batch: &[TrainExample],
    seed: u64,
    dropout: f64,
) -> Result<LossAndGrad> {
    let VelocityModel::Mlp(mlp) = model else {
        return Err(Error::invalid(
            "analytic velocity fields have no trainable parameters",
        ));
    };
    check_batch(mlp, batch)?;
    let ds = draws(batch, mlp.dim(), seed, dropout);
    let (fw, v, target) = forward_batch(mlp, batch, &ds);
    let diff = v - target;
    let n = batch.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let dv = diff * (2.0 / n);
    let mut grad = mlp.zeros_like();
    mlp.backward(&fw, &dv, &mut grad);
    Ok(LossAndGrad { loss, grad })
}

/// (time, noise) draws per example in [`eval_loss`].
pub const EVAL_DRAWS: usize = 16;

/// Objective value without dropout or gradients, averaged over
/// [`EVAL_DRAWS`] seeded draws per example and evaluated in chunks.
pub fn eval_loss(model: &MlpModel, examples: &[TrainExample], seed: u64) -> Result<f64> {
    check_batch(model, examples)?;
    let mut total = 0.0;
    for rep in 0..EVAL_DRAWS {
        for (ci, chunk) in examples.chunks(64).enumerate() {
            let ds = draws(
                chunk,
                model.dim(),
                rng::derive(seed, &[rep as u64, ci as u64]),
                0.0,
            );
            let (_, v, target) = forward_batch(model, chunk, &ds);
            total += (v - target).iter().map(|d| d * d).sum::<f64>();
        }
    }
    Ok(total / (examples.len() * EVAL_DRAWS) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_heldout: f64,
    pub final_heldout: f64,
    /// Training loss per optimizer step.
    pub losses: Vec<f64>,
}

/// SGD with momentum or Adam on the flow-matching objective. Batches are drawn with
/// replacement from `data`; held-out loss uses a fixed evaluation seed.
pub fn train(
    model: &mut MlpModel,
    data: &[TrainExample],
    heldout: &[TrainExample],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    check_batch(model, data)?;
    let eval_seed = rng::derive(cfg.seed, &[u64::MAX]);
    let heldout_loss = |m: &MlpModel| -> Result<f64> {
        if heldout.is_empty() {
            Ok(f64::NAN)
        } else {
            eval_loss(m, heldout, eval_seed)
        }
    };
    let initial_heldout = heldout_loss(model)?;
    let mut velocity = model.zeros_like();
    let mut second = model.zeros_like();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut wrapped = VelocityModel::Mlp(model.clone());
    for step in 0..cfg.steps {
        let mut r = rng::rng(rng::derive(cfg.seed, &[step as u64, 0]));
        let batch: Vec<TrainExample> = (0..cfg.batch_size)
            .map(|_| data[r.random_range(0..data.len())].clone())
            .collect();
        let LossAndGrad { loss, grad } = flow_matching_loss(
            &wrapped,
            &batch,
            rng::derive(cfg.seed, &[step as u64, 1]),
            cfg.cond_dropout,
        )?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let norm = grad
            .params()
            .iter()
            .flat_map(|p| p.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            cfg.grad_clip / norm
        } else {
            1.0
        };
        let lr = match cfg.schedule {
            Schedule::Constant => cfg.learning_rate,
            Schedule::Cosine => {
                let phase = std::f64::consts::PI * step as f64 / cfg.steps as f64;
                cfg.learning_rate * 0.5 * (1.0 + phase.cos())
            }
        };
        let VelocityModel::Mlp(current) = &mut wrapped else {
            unreachable!()
        };
        match cfg.optimizer {
            Optimizer::Sgd => {
                for ((p, m), g) in current
                    .params_mut()
                    .into_iter()
                    .zip(velocity.params_mut())
                    .zip(grad.params())
                {
                    for ((pi, mi), gi) in p.iter_mut().zip(m.iter_mut()).zip(g) {
                        *mi = cfg.momentum * *mi + scale * gi;
                        *pi -= lr * *mi;
                    }
                }
            }
            Optimizer::Adam => {
                let n = (step + 1) as i32;
                let c1 = 1.0 - cfg.momentum.powi(n);
                let c2 = 1.0 - ADAM_BETA2.powi(n);
                for (((p, m), s), g) in current
                    .params_mut()
                    .into_iter()
                    .zip(velocity.params_mut())
                    .zip(second.params_mut())
                    .zip(grad.params())
                {
                    for (((pi, mi), si), gi) in
                        p.iter_mut().zip(m.iter_mut()).zip(s.iter_mut()).zip(g)
                    {
                        let g = scale * gi;
                        *mi = cfg.momentum * *mi + (1.0 - cfg.momentum) * g;
                        *si = ADAM_BETA2 * *si + (1.0 - ADAM_BETA2) * g * g;
                        *pi -= lr * (*mi / c1) / ((*si / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        losses.push(loss);
        progress(step, loss);
    }
    let VelocityModel::Mlp(trained) = wrapped else {
        unreachable!()
    };
    *model = trained;
    let final_heldout = heldout_loss(model)?;
    Ok(TrainReport {
        initial_heldout,
        final_heldout,
        losses,
    })
}

/// Scalar mean and standard deviation over all latent entries.
pub fn data_stats(examples: &[TrainExample]) -> (f64, f64) {
    let n: usize = examples.iter().map(|e| e.x0.len()).sum();
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = examples.iter().flat_map(|e| &e.x0).sum::<f64>() / n as f64;
    let var = examples
        .iter()
        .flat_map(|e| &e.x0)
        .map(|x| (x - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    (mean, var.sqrt().max(1e-6))
}
