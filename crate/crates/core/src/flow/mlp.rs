//! Small fully connected velocity network with hand-written backpropagation.
//!
//! Inputs are the (scaled) latent, a sinusoidal time embedding and a condition
//! embedding produced by one hidden layer. The clean-estimate head wraps the
//! raw output in a denoiser parameterization
//! `D = μ + γ c_skip(t) (x - (1-t) μ) + (γ c_out(t) + 1 - γ) F(x, t, c)` and
//! returns `v = (x - D) / t`. With the gate `γ(t)` near one the network only
//! models the residual that a linear denoiser with data statistics `(μ, σ)`
//! cannot explain; near zero it predicts the clean latent directly, which is
//! what concentrated data (a single training example) needs. The gate is a
//! sigmoid of a linear function of the time features and starts near one.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;

use super::{Condition, Query};
use crate::error::{Error, Result};
use crate::rng;

/// Initial gate logit; `sigmoid(4) ≈ 0.98`.
const GATE_INIT: f64 = 4.0;
const MAGIC: &[u8; 6] = b"VFLOW2";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// The network output is the velocity.
    Velocity,
    /// The network output is a scaled residual of the clean estimate.
    CleanEstimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub dim: usize,
    pub cond_dim: usize,
    pub cond_hidden: usize,
    pub hidden: usize,
    pub depth: usize,
    pub time_freqs: usize,
    pub head: Head,
    pub data_mean: f64,
    pub data_std: f64,
}

impl MlpConfig {
    pub fn new(dim: usize, cond_dim: usize) -> Self {
        Self {
            dim,
            cond_dim,
            cond_hidden: 64,
            hidden: 256,
            depth: 3,
            time_freqs: 8,
            head: Head::CleanEstimate,
            data_mean: 0.0,
            data_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: Array2::zeros((inputs, outputs)),
            b: Array1::zeros(outputs),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    cfg: MlpConfig,
    /// `[condition embedding, input, hidden..., output]`
    layers: Vec<Dense>,
    /// time features to the gate logit
    gate: Dense,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    crate::grid::logistic(z)
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Denoiser coefficients `(c_in, c_skip, c_out)` at time `t`.
#[inline]
fn precondition(t: f64, sigma: f64) -> (f64, f64, f64) {
    let a = 1.0 - t;
    let d2 = a * a * sigma * sigma + t * t;
    let d = d2.sqrt();
    (1.0 / d, a * sigma * sigma / d2, t * sigma / d)
}

pub(crate) struct Forward {
    x: Array2<f64>,
    t: Vec<f64>,
    cond: Array2<f64>,
    ze: Array2<f64>,
    input: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    pub(crate) out: Array2<f64>,
}

impl MlpModel {
    pub fn new(cfg: MlpConfig, seed: u64) -> Result<Self> {
        if cfg.dim == 0 || cfg.hidden == 0 || cfg.depth == 0 || cfg.cond_hidden == 0 {
            return Err(Error::invalid("network dimensions must be positive"));
        }
        if !(cfg.data_std > 0.0) {
            return Err(Error::invalid("data standard deviation must be positive"));
        }
        let mut r = rng::rng(seed);
        let mut layers: Vec<Dense> = Self::shapes(&cfg)
            .into_iter()
            .map(|(i, o)| {
                let bound = (6.0 / (i + o) as f64).sqrt();
                let mut d = Dense::zeros(i, o);
                d.w.mapv_inplace(|_| r.random_range(-bound..bound));
                d
            })
            .collect();
        // start close to the linear denoiser
        if let Some(last) = layers.last_mut() {
            last.w.mapv_inplace(|w| w * 0.1);
        }
        let mut gate = Dense::zeros(2 * cfg.time_freqs, 1);
        gate.b[0] = GATE_INIT;
        Ok(Self { cfg, layers, gate })
    }

    fn shapes(cfg: &MlpConfig) -> Vec<(usize, usize)> {
        let mut s = vec![
            (cfg.cond_dim, cfg.cond_hidden),
            (cfg.dim + 2 * cfg.time_freqs + cfg.cond_hidden, cfg.hidden),
        ];
        s.extend((1..cfg.depth).map(|_| (cfg.hidden, cfg.hidden)));
        s.push((cfg.hidden, cfg.dim));
        s
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cfg.cond_dim
    }

    pub fn set_data_stats(&mut self, mean: f64, std: f64) -> Result<()> {
        if !(std > 0.0) || !mean.is_finite() {
            return Err(Error::invalid(
                "data statistics must be finite with positive spread",
            ));
        }
        self.cfg.data_mean = mean;
        self.cfg.data_std = std;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .chain([&self.gate])
            .map(|l| l.w.len() + l.b.len())
            .sum()
    }

    /// Parameters in declaration order (per layer: weights row-major, then bias),
    /// skip gate last.
    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .chain([&self.gate])
            .flat_map(|l| {
                [
                    l.w.as_slice().expect("standard layout"),
                    l.b.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .chain([&mut self.gate])
            .flat_map(|l| {
                [
                    l.w.as_slice_mut().expect("standard layout"),
                    l.b.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    /// A zero-valued model of identical shape, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            layers: Self::shapes(&self.cfg)
                .into_iter()
                .map(|(i, o)| Dense::zeros(i, o))
                .collect(),
            gate: Dense::zeros(2 * self.cfg.time_freqs, 1),
        }
    }

    fn time_features(&self, t: f64) -> impl Iterator<Item = f64> + '_ {
        (0..self.cfg.time_freqs).flat_map(move |k| {
            let w = std::f64::consts::PI * (1u64 << k) as f64 * t;
            [w.sin(), w.cos()]
        })
    }

    pub(crate) fn forward(&self, x: Array2<f64>, t: Vec<f64>, cond: Array2<f64>) -> Forward {
        let cfg = &self.cfg;
        let batch = x.nrows();
        let emb = &self.layers[0];
        let ze = cond.dot(&emb.w) + &emb.b;
        let e = ze.mapv(silu);

        let width = cfg.dim + 2 * cfg.time_freqs + cfg.cond_hidden;
        let mut input = Array2::zeros((batch, width));
        for (r, mut row) in input.axis_iter_mut(Axis(0)).enumerate() {
            let (c_in, _, _) = precondition(t[r], cfg.data_std);
            let shift = (1.0 - t[r]) * cfg.data_mean;
            let row = row.as_slice_mut().expect("row-major");
            for (dst, &xv) in row[..cfg.dim].iter_mut().zip(x.row(r).iter()) {
                *dst = c_in * (xv - shift);
            }
            for (dst, f) in row[cfg.dim..cfg.dim + 2 * cfg.time_freqs]
                .iter_mut()
                .zip(self.time_features(t[r]))
            {
                *dst = f;
            }
            for (dst, &ev) in row[cfg.dim + 2 * cfg.time_freqs..]
                .iter_mut()
                .zip(e.row(r).iter())
            {
                *dst = ev;
            }
        }

        let mut pre = Vec::with_capacity(cfg.depth);
        let mut post = Vec::with_capacity(cfg.depth);
        let mut h = input.clone();
        for layer in &self.layers[1..self.layers.len() - 1] {
            let z = h.dot(&layer.w) + &layer.b;
            h = z.mapv(silu);
            pre.push(z);
            post.push(h.clone());
        }
        let last = self.layers.last().expect("output layer");
        let out = h.dot(&last.w) + &last.b;
        Forward {
            x,
            t,
            cond,
            ze,
            input,
            pre,
            post,
            out,
        }
    }

    fn gate(&self, t: f64) -> f64 {
        let s = self
            .time_features(t)
            .zip(self.gate.w.iter())
            .map(|(f, w)| f * w)
            .sum::<f64>()
            + self.gate.b[0];
        sigmoid(s)
    }

    pub(crate) fn velocities(&self, fw: &Forward) -> Array2<f64> {
        match self.cfg.head {
            Head::Velocity => fw.out.clone(),
            Head::CleanEstimate => {
                let (mu, sigma) = (self.cfg.data_mean, self.cfg.data_std);
                let mut v = fw.out.clone();
                for (r, mut row) in v.axis_iter_mut(Axis(0)).enumerate() {
                    let t = fw.t[r];
                    let (_, c_skip, c_out) = precondition(t, sigma);
                    let g = self.gate(t);
                    let skip = g * c_skip;
                    let gain = g * c_out + 1.0 - g;
                    let shift = (1.0 - t) * mu;
                    for (vi, &xi) in row.iter_mut().zip(fw.x.row(r).iter()) {
                        let clean = mu + skip * (xi - shift) + gain * *vi;
                        *vi = (xi - clean) / t;
                    }
                }
                v
            }
        }
    }

    /// Accumulate parameter gradients for `dv = ∂L/∂v` into `grad`.
    pub(crate) fn backward(&self, fw: &Forward, dv: &Array2<f64>, grad: &mut MlpModel) {
        let cfg = &self.cfg;
        let mut d = dv.clone();
        if cfg.head == Head::CleanEstimate {
            let mu = cfg.data_mean;
            for (r, mut row) in d.axis_iter_mut(Axis(0)).enumerate() {
                let t = fw.t[r];
                let (_, c_skip, c_out) = precondition(t, cfg.data_std);
                let shift = (1.0 - t) * mu;
                let g = self.gate(t);
                let gain = g * c_out + 1.0 - g;
                // ∂D/∂γ = c_skip (x - shift) + (c_out - 1) F
                let dgamma: f64 = row
                    .iter()
                    .zip(fw.x.row(r))
                    .zip(fw.out.row(r))
                    .map(|((dvi, &xi), &fi)| {
                        -dvi * (c_skip * (xi - shift) + (c_out - 1.0) * fi) / t
                    })
                    .sum();
                let ds = dgamma * g * (1.0 - g);
                for (gw, f) in grad.gate.w.iter_mut().zip(self.time_features(t)) {
                    *gw += ds * f;
                }
                grad.gate.b[0] += ds;
                let s = -gain / t;
                row.mapv_inplace(|g| g * s);
            }
        }
        let n = self.layers.len();
        // output layer
        let h_last = fw.post.last().expect("hidden activations");
        grad.layers[n - 1].w += &h_last.t().dot(&d);
        grad.layers[n - 1].b += &d.sum_axis(Axis(0));
        let mut dh = d.dot(&self.layers[n - 1].w.t());
        // hidden stack, walking back to the input layer
        for l in (1..n - 1).rev() {
            let idx = l - 1;
            let dz = &dh * &fw.pre[idx].mapv(silu_grad);
            let below = if idx == 0 {
                &fw.input
            } else {
                &fw.post[idx - 1]
            };
            grad.layers[l].w += &below.t().dot(&dz);
            grad.layers[l].b += &dz.sum_axis(Axis(0));
            dh = dz.dot(&self.layers[l].w.t());
        }
        // condition embedding: the trailing columns of the input layer
        let off = cfg.dim + 2 * cfg.time_freqs;
        let de = dh.slice(ndarray::s![.., off..]).to_owned();
        let dze = &de * &fw.ze.mapv(silu_grad);
        grad.layers[0].w += &fw.cond.t().dot(&dze);
        grad.layers[0].b += &dze.sum_axis(Axis(0));
    }

    pub(crate) fn pack(&self, queries: &[Query<'_>]) -> (Array2<f64>, Vec<f64>, Array2<f64>) {
        let b = queries.len();
        let mut x = Array2::zeros((b, self.cfg.dim));
        let mut c = Array2::zeros((b, self.cfg.cond_dim));
        let mut t = Vec::with_capacity(b);
        for (r, q) in queries.iter().enumerate() {
            x.row_mut(r)
                .as_slice_mut()
                .expect("row-major")
                .copy_from_slice(q.x);
            if !q.cond.is_null() {
                c.row_mut(r)
                    .as_slice_mut()
                    .expect("row-major")
                    .copy_from_slice(q.cond.values());
            }
            t.push(q.t);
        }
        (x, t, c)
    }

    pub fn velocity_batch(&self, queries: &[Query<'_>]) -> Result<Vec<Vec<f64>>> {
        if let Some(q) = queries.iter().find(|q| q.cond.dim() != self.cfg.cond_dim) {
            return Err(Error::invalid(format!(
                "condition of length {} given to a network expecting {}",
                q.cond.dim(),
                self.cfg.cond_dim
            )));
        }
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let (x, t, c) = self.pack(queries);
        let fw = self.forward(x, t, c);
        let v = self.velocities(&fw);
        Ok(v.outer_iter().map(|r| r.to_vec()).collect())
    }

    pub fn velocity(&self, x: &[f64], t: f64, cond: &Condition) -> Result<Vec<f64>> {
        super::check_time(t)?;
        let mut v = self.velocity_batch(&[Query { x, t, cond }])?;
        Ok(v.pop().expect("single query"))
    }

    pub fn write_checkpoint(&self, w: &mut impl Write) -> std::io::Result<()> {
        let cfg = &self.cfg;
        w.write_all(MAGIC)?;
        let head = match cfg.head {
            Head::Velocity => 0u64,
            Head::CleanEstimate => 1,
        };
        for v in [
            head,
            cfg.dim as u64,
            cfg.cond_dim as u64,
            cfg.cond_hidden as u64,
            cfg.hidden as u64,
            cfg.depth as u64,
            cfg.time_freqs as u64,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&cfg.data_mean.to_le_bytes())?;
        w.write_all(&cfg.data_std.to_le_bytes())?;
        let shapes = Self::shapes(cfg);
        w.write_all(&(shapes.len() as u64).to_le_bytes())?;
        for (i, o) in shapes {
            w.write_all(&(i as u64).to_le_bytes())?;
            w.write_all(&(o as u64).to_le_bytes())?;
        }
        for p in self.params() {
            let mut buf = Vec::with_capacity(p.len() * 8);
            for v in p {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Parse(format!("checkpoint: {m}"));
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("missing VFLOW2 magic"));
        }
        let mut word = [0u8; 8];
        let mut read_u64 = |r: &mut dyn Read| -> Result<u64> {
            r.read_exact(&mut word)
                .map_err(|_| bad("truncated header"))?;
            Ok(u64::from_le_bytes(word))
        };
        let head = match read_u64(r)? {
            0 => Head::Velocity,
            1 => Head::CleanEstimate,
            h => return Err(bad(&format!("unknown head {h}"))),
        };
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = read_u64(r)? as usize;
        }
        let data_mean = f64::from_bits(read_u64(r)?);
        let data_std = f64::from_bits(read_u64(r)?);
        let cfg = MlpConfig {
            dim: dims[0],
            cond_dim: dims[1],
            cond_hidden: dims[2],
            hidden: dims[3],
            depth: dims[4],
            time_freqs: dims[5],
            head,
            data_mean,
            data_std,
        };
        let shapes = Self::shapes(&cfg);
        let n = read_u64(r)? as usize;
        if n != shapes.len() {
            return Err(bad("layer count does not match header"));
        }
        for &(i, o) in &shapes {
            if read_u64(r)? as usize != i || read_u64(r)? as usize != o {
                return Err(bad("layer shape does not match header"));
            }
        }
        let mut model = Self {
            layers: shapes.iter().map(|&(i, o)| Dense::zeros(i, o)).collect(),
            gate: Dense::zeros(2 * cfg.time_freqs, 1),
            cfg,
        };
        for p in model.params_mut() {
            let mut buf = vec![0u8; p.len() * 8];
            r.read_exact(&mut buf)
                .map_err(|_| bad("truncated parameters"))?;
            for (dst, chunk) in p.iter_mut().zip(buf.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|_| bad("read failure"))? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&mut bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(head: Head) -> MlpModel {
        let mut cfg = MlpConfig::new(5, 3);
        cfg.cond_hidden = 4;
        cfg.hidden = 6;
        cfg.depth = 3;
        cfg.time_freqs = 2;
        cfg.head = head;
        cfg.data_mean = -0.4;
        cfg.data_std = 1.7;
        MlpModel::new(cfg, 17).unwrap()
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let m = tiny(Head::CleanEstimate);
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..6], b"VFLOW2");
        let back = MlpModel::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        back.write_checkpoint(&mut again).unwrap();
        assert_eq!(again, buf);
        assert!(MlpModel::read_checkpoint(&mut &buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn velocity_is_finite_over_the_time_domain() {
        let m = tiny(Head::CleanEstimate);
        let c = Condition::new(vec![0.2, 0.9, 0.0]);
        for t in [1e-9, 1e-3, 0.5, 1.0] {
            let v = m.velocity(&[3.0, -2.0, 0.0, 1.0, 8.0], t, &c).unwrap();
            assert!(v.iter().all(|x| x.is_finite()));
        }
        assert!(m.velocity(&[0.0; 5], 0.0, &c).is_err());
    }

    #[test]
    fn batched_and_single_evaluation_agree() {
        let m = tiny(Head::CleanEstimate);
        let c = Condition::new(vec![0.2, 0.9, 0.0]);
        let n = c.to_null();
        let xa = [0.1, 0.2, 0.3, 0.4, 0.5];
        let xb = [-1.0, 0.0, 2.0, 0.5, 0.25];
        let batch = m
            .velocity_batch(&[
                Query {
                    x: &xa,
                    t: 0.3,
                    cond: &c,
                },
                Query {
                    x: &xb,
                    t: 0.8,
                    cond: &n,
                },
            ])
            .unwrap();
        let a = m.velocity(&xa, 0.3, &c).unwrap();
        let b = m.velocity(&xb, 0.8, &n).unwrap();
        for (u, v) in batch[0].iter().zip(&a).chain(batch[1].iter().zip(&b)) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn clean_head_at_small_time_is_near_identity_denoiser() {
        let mut m = tiny(Head::CleanEstimate);
        // fully open skip gate
        m.params_mut().last_mut().unwrap()[0] = 40.0;
        let c = Condition::new(vec![0.0; 3]);
        let x = [1.0, 2.0, 3.0, -4.0, 0.5];
        let t = 1e-6;
        let v = m.velocity(&x, t, &c).unwrap();
        // clean estimate x - t v should be within O(t) of x
        for (xi, vi) in x.iter().zip(&v) {
            assert!((t * vi).abs() < 1e-4, "{xi} {vi}");
        }
    }
}
