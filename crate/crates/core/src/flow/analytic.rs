//! Closed-form velocity fields for point-mass and finite-mixture data.

use super::{check_time, Condition};
use crate::error::{Error, Result};

/// Exact velocity for data concentrated at `x0`: `(x - x0) / t`.
pub fn analytic_velocity_pointmass(x: &[f64], t: f64, x0: &[f64]) -> Result<Vec<f64>> {
    check_time(t)?;
    if x.len() != x0.len() {
        return Err(Error::invalid("anchor and state differ in shape"));
    }
    Ok(x.iter().zip(x0).map(|(xi, ai)| (xi - ai) / t).collect())
}

/// Posterior-weighted point-mass velocities for data `Σ π_j δ(x0_j)`.
///
/// `w_j ∝ π_j exp(-|x - (1-t) x0_j|² / (2 t²))`, normalized with log-sum-exp.
pub fn analytic_velocity_mixture(
    x: &[f64],
    t: f64,
    anchors: &[Vec<f64>],
    priors: &[f64],
) -> Result<Vec<f64>> {
    check_time(t)?;
    if anchors.is_empty() {
        return Err(Error::invalid("mixture has no anchors"));
    }
    if anchors.len() != priors.len() {
        return Err(Error::invalid("mixture anchors and priors differ in count"));
    }
    let logw: Vec<f64> = anchors
        .iter()
        .zip(priors)
        .map(|(a, &p)| {
            let d2: f64 = x
                .iter()
                .zip(a)
                .map(|(xi, ai)| {
                    let d = xi - (1.0 - t) * ai;
                    d * d
                })
                .sum();
            p.ln() - d2 / (2.0 * t * t)
        })
        .collect();
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut v = vec![0.0; x.len()];
    for (a, wj) in anchors.iter().zip(&w) {
        let wj = wj / z;
        if wj == 0.0 {
            continue;
        }
        for ((vi, xi), ai) in v.iter_mut().zip(x).zip(a) {
            *vi += wj * (xi - ai) / t;
        }
    }
    Ok(v)
}

fn lookup<'a, T>(entries: &'a [(Condition, T)], null: &'a T, cond: &Condition) -> Result<&'a T> {
    if cond.is_null() {
        return Ok(null);
    }
    entries
        .iter()
        .find(|(c, _)| c.values() == cond.values())
        .map(|(_, v)| v)
        .ok_or_else(|| Error::invalid("condition not known to the analytic model"))
}

/// Point-mass data per condition, plus the anchor used for the null condition.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticPointMass {
    entries: Vec<(Condition, Vec<f64>)>,
    null_anchor: Vec<f64>,
}

impl AnalyticPointMass {
    pub fn new(entries: Vec<(Condition, Vec<f64>)>, null_anchor: Vec<f64>) -> Result<Self> {
        if entries.iter().any(|(_, a)| a.len() != null_anchor.len()) {
            return Err(Error::invalid("anchors differ in dimension"));
        }
        Ok(Self {
            entries,
            null_anchor,
        })
    }

    pub fn dim(&self) -> usize {
        self.null_anchor.len()
    }

    pub fn anchor(&self, cond: &Condition) -> Result<&[f64]> {
        lookup(&self.entries, &self.null_anchor, cond).map(Vec::as_slice)
    }

    pub fn velocity(&self, x: &[f64], t: f64, cond: &Condition) -> Result<Vec<f64>> {
        analytic_velocity_pointmass(x, t, self.anchor(cond)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    anchors: Vec<Vec<f64>>,
    priors: Vec<f64>,
}

impl Mixture {
    pub fn new(anchors: Vec<Vec<f64>>, priors: Vec<f64>) -> Result<Self> {
        if anchors.is_empty() || anchors.len() != priors.len() {
            return Err(Error::invalid("mixture needs one prior per anchor"));
        }
        if priors.iter().any(|&p| !(p >= 0.0)) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "mixture priors must be non-negative and sum to 1",
            ));
        }
        let d = anchors[0].len();
        if anchors.iter().any(|a| a.len() != d) {
            return Err(Error::invalid("mixture anchors differ in dimension"));
        }
        Ok(Self { anchors, priors })
    }

    pub fn dim(&self) -> usize {
        self.anchors[0].len()
    }
}

/// Finite-mixture data per condition, plus the mixture for the null condition.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticMixture {
    entries: Vec<(Condition, Mixture)>,
    null: Mixture,
}

impl AnalyticMixture {
    pub fn new(entries: Vec<(Condition, Mixture)>, null: Mixture) -> Result<Self> {
        if entries.iter().any(|(_, m)| m.dim() != null.dim()) {
            return Err(Error::invalid("mixtures differ in dimension"));
        }
        Ok(Self { entries, null })
    }

    pub fn dim(&self) -> usize {
        self.null.dim()
    }

    pub fn velocity(&self, x: &[f64], t: f64, cond: &Condition) -> Result<Vec<f64>> {
        let m = lookup(&self.entries, &self.null, cond)?;
        analytic_velocity_mixture(x, t, &m.anchors, &m.priors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointmass_known_values() {
        let x0 = [0.4, -1.0, 2.0];
        assert_eq!(
            analytic_velocity_pointmass(&x0, 0.37, &x0).unwrap(),
            vec![0.0; 3]
        );
        let v = analytic_velocity_pointmass(&[1.0, 0.0, 0.0], 0.5, &[0.0; 3]).unwrap();
        assert_eq!(v, vec![2.0, 0.0, 0.0]);
        assert!(analytic_velocity_pointmass(&x0, 0.0, &x0).is_err());
    }

    #[test]
    fn single_component_mixture_is_pointmass() {
        let a = vec![0.3, -0.2];
        let x = [1.5, 0.7];
        let m = analytic_velocity_mixture(&x, 0.42, std::slice::from_ref(&a), &[1.0]).unwrap();
        let p = analytic_velocity_pointmass(&x, 0.42, &a).unwrap();
        for (u, w) in m.iter().zip(&p) {
            assert!((u - w).abs() < 1e-15);
        }
        // a degenerate prior collapses onto its component too
        let m =
            analytic_velocity_mixture(&x, 0.42, &[a.clone(), vec![9.0, 9.0]], &[1.0, 0.0]).unwrap();
        assert_eq!(m, p);
    }

    #[test]
    fn symmetric_mixture_vanishes_at_origin() {
        let v = analytic_velocity_mixture(
            &[0.0, 0.0],
            0.5,
            &[vec![1.0, 2.0], vec![-1.0, -2.0]],
            &[0.5, 0.5],
        )
        .unwrap();
        assert!(v.iter().all(|c| c.abs() < 1e-15));
    }

    #[test]
    fn mixture_matches_direct_gaussian_densities() {
        // x_t | x0 ~ N((1-t) x0, t² I); posterior ∝ π_j N(x; (1-t) a_j, t² I)
        let anchors = [vec![1.0, 0.5, -0.25], vec![-0.75, 0.25, 1.0]];
        let priors = [0.35, 0.65];
        let t = 0.6;
        let x = [0.55, 0.32, -0.1];
        let dens = |a: &[f64]| -> f64 {
            let d2: f64 = x
                .iter()
                .zip(a)
                .map(|(xi, ai)| (xi - (1.0 - t) * ai).powi(2))
                .sum();
            (-d2 / (2.0 * t * t)).exp() / (2.0 * std::f64::consts::PI * t * t).powf(1.5)
        };
        let p: Vec<f64> = anchors
            .iter()
            .zip(priors)
            .map(|(a, pi)| pi * dens(a))
            .collect();
        let z: f64 = p.iter().sum();
        let expect: Vec<f64> = (0..3)
            .map(|i| (0..2).map(|j| p[j] / z * (x[i] - anchors[j][i]) / t).sum())
            .collect();
        let got = analytic_velocity_mixture(&x, t, &anchors, &priors).unwrap();
        for (g, e) in got.iter().zip(&expect) {
            assert!(((g - e) / e).abs() < 1e-6, "{g} vs {e}");
        }
    }

    #[test]
    fn mixture_errors() {
        assert!(analytic_velocity_mixture(&[0.0], 0.0, &[vec![0.0]], &[1.0]).is_err());
        assert!(analytic_velocity_mixture(&[0.0], 0.5, &[], &[]).is_err());
        assert!(Mixture::new(vec![vec![0.0]], vec![0.5]).is_err());
    }

    #[test]
    fn far_states_stay_finite() {
        let v = analytic_velocity_mixture(
            &[1e3, -1e3],
            0.01,
            &[vec![1.0, 1.0], vec![-1.0, 1.0]],
            &[0.5, 0.5],
        )
        .unwrap();
        assert!(v.iter().all(|c| c.is_finite()));
    }
}
