//! Conditional rectified-flow velocity fields.
//!
//! Convention: `x(t) = (1 - t) x0 + t x1` with clean data at `t = 0` and
//! standard-normal noise at `t = 1`. Sampling integrates from 1 down to 0.

mod analytic;
mod mlp;
mod train;

pub use analytic::{
    analytic_velocity_mixture, analytic_velocity_pointmass, AnalyticMixture, AnalyticPointMass,
    Mixture,
};
pub use mlp::{Head, MlpConfig, MlpModel};
pub use train::{
    data_stats, eval_loss, flow_matching_loss, train, LossAndGrad, Optimizer, Schedule,
    TrainConfig, TrainExample, TrainReport,
};

use crate::error::{Error, Result};
use crate::rng;

/// Conditioning signal: a flattened raster (silhouette or color thumbnail),
/// or the null condition used for the unconditional guidance branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    values: Vec<f64>,
    null: bool,
}

impl Condition {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            null: false,
        }
    }

    pub fn null(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
            null: true,
        }
    }

    pub fn is_null(&self) -> bool {
        self.null
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Raster as seen by a network: all zeros when null.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_null(&self) -> Condition {
        Condition::null(self.values.len())
    }
}

/// A single velocity query.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub x: &'a [f64],
    pub t: f64,
    pub cond: &'a Condition,
}

#[derive(Debug, Clone)]
pub enum VelocityModel {
    Mlp(MlpModel),
    PointMass(AnalyticPointMass),
    Mixture(AnalyticMixture),
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("velocity time {t} outside (0, 1]")));
    }
    Ok(())
}

impl VelocityModel {
    pub fn dim(&self) -> usize {
        match self {
            VelocityModel::Mlp(m) => m.dim(),
            VelocityModel::PointMass(m) => m.dim(),
            VelocityModel::Mixture(m) => m.dim(),
        }
    }

    pub fn velocity(&self, x: &[f64], t: f64, cond: &Condition) -> Result<Vec<f64>> {
        let mut out = self.velocity_batch(&[Query { x, t, cond }])?;
        Ok(out.pop().expect("one query in, one velocity out"))
    }

    /// Evaluate many queries at once; the network variant shares one forward pass.
    pub fn velocity_batch(&self, queries: &[Query<'_>]) -> Result<Vec<Vec<f64>>> {
        for q in queries {
            check_time(q.t)?;
            if q.x.len() != self.dim() {
                return Err(Error::invalid(format!(
                    "latent of length {} given to a model of dimension {}",
                    q.x.len(),
                    self.dim()
                )));
            }
        }
        match self {
            VelocityModel::Mlp(m) => m.velocity_batch(queries),
            VelocityModel::PointMass(m) => queries
                .iter()
                .map(|q| m.velocity(q.x, q.t, q.cond))
                .collect(),
            VelocityModel::Mixture(m) => queries
                .iter()
                .map(|q| m.velocity(q.x, q.t, q.cond))
                .collect(),
        }
    }
}

/// `(1 - t) x0 + t x1`.
pub fn linear_path(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    if x0.len() != x1.len() {
        return Err(Error::invalid("linear_path endpoints differ in shape"));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("path time {t} outside [0, 1]")));
    }
    if t == 0.0 {
        return Ok(x0.to_vec());
    }
    if t == 1.0 {
        return Ok(x1.to_vec());
    }
    Ok(x0
        .iter()
        .zip(x1)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect())
}

/// A condition together with its guidance scale.
#[derive(Debug, Clone, Copy)]
pub struct Guided<'a> {
    pub x: &'a [f64],
    pub cond: &'a Condition,
    pub scale: f64,
}

/// `v_null + s (v_c - v_null)`. The endpoints `s = 0` and `s = 1` return the
/// corresponding branch untouched.
pub fn cfg_velocity(
    model: &VelocityModel,
    x: &[f64],
    t: f64,
    cond: &Condition,
    scale: f64,
) -> Result<Vec<f64>> {
    let mut out = cfg_velocity_batch(model, t, &[Guided { x, cond, scale }])?;
    Ok(out.pop().expect("one query"))
}

/// Guided velocities for several states at a shared time, evaluated in one batch.
pub fn cfg_velocity_batch(
    model: &VelocityModel,
    t: f64,
    items: &[Guided<'_>],
) -> Result<Vec<Vec<f64>>> {
    if let Some(g) = items.iter().find(|g| !(g.scale >= 0.0)) {
        return Err(Error::invalid(format!(
            "negative guidance scale {}",
            g.scale
        )));
    }
    let nulls: Vec<Condition> = items.iter().map(|g| g.cond.to_null()).collect();
    let mut queries = Vec::with_capacity(items.len() * 2);
    // slot[i] = (conditional query index, null query index)
    let mut slots = Vec::with_capacity(items.len());
    for (g, null) in items.iter().zip(&nulls) {
        let c = (g.scale != 0.0).then(|| {
            queries.push(Query {
                x: g.x,
                t,
                cond: g.cond,
            });
            queries.len() - 1
        });
        let n = (g.scale != 1.0).then(|| {
            queries.push(Query {
                x: g.x,
                t,
                cond: null,
            });
            queries.len() - 1
        });
        slots.push((c, n));
    }
    let vs = model.velocity_batch(&queries)?;
    Ok(items
        .iter()
        .zip(slots)
        .map(|(g, slot)| match slot {
            (Some(c), None) => vs[c].clone(),
            (None, Some(n)) => vs[n].clone(),
            (Some(c), Some(n)) => vs[n]
                .iter()
                .zip(&vs[c])
                .map(|(vn, vc)| vn + g.scale * (vc - vn))
                .collect(),
            (None, None) => unreachable!("scale cannot be both 0 and 1"),
        })
        .collect())
}

/// Uniform descending knots `t_i = i / T`, `i = T..=0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeGrid {
    steps: usize,
}

impl TimeGrid {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("time grid needs at least one step"));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn t(&self, i: usize) -> f64 {
        i as f64 / self.steps as f64
    }

    /// `(t_i, t_{i-1})` pairs from `i = T` down to `i = 1`.
    pub fn intervals(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        (1..=self.steps)
            .rev()
            .map(move |i| (i, self.t(i), self.t(i - 1)))
    }
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self { steps: 25 }
    }
}

/// Euler integration from noise (`t = 1`) to data (`t = 0`).
pub fn sample_euler(
    model: &VelocityModel,
    cond: &Condition,
    grid: TimeGrid,
    scale: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let x = rng::noise(seed, model.dim());
    integrate_euler(model, cond, grid, scale, x)
}

/// Euler integration starting from a given state at `t = 1`.
pub fn integrate_euler(
    model: &VelocityModel,
    cond: &Condition,
    grid: TimeGrid,
    scale: f64,
    mut x: Vec<f64>,
) -> Result<Vec<f64>> {
    for (_, t, t_prev) in grid.intervals() {
        let v = cfg_velocity(model, &x, t, cond, scale)?;
        let dt = t_prev - t;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
    }
    Ok(x)
}
