//! Action and latent distributions.
//!
//! Batched distributions hold tape variables of shape `(n, d)`; densities and
//! entropies reduce over the last axis and return shape `(n,)`.

use std::f64::consts::{LN_2, PI};

use ndgrad::{Array, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp used when mapping actions at the bounds back through `atanh`.
pub const ATANH_EPS: f64 = 1e-6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Standard-normal noise of the given shape.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Array::new(shape.to_vec(), data).expect("shape and length agree")
}

fn last_axis(v: Var<'_>) -> usize {
    v.shape().len().saturating_sub(1)
}

#[derive(Clone, Copy)]
pub struct DiagGaussian<'t> {
    pub mean: Var<'t>,
    pub log_std: Var<'t>,
}

impl<'t> DiagGaussian<'t> {
    pub fn new(mean: Var<'t>, log_std: Var<'t>) -> Result<Self> {
        if mean.shape() != log_std.shape() || mean.shape().is_empty() {
            return Err(Error::Precondition(format!(
                "gaussian mean {:?} and log_std {:?} must share a non-scalar shape",
                mean.shape(),
                log_std.shape()
            )));
        }
        Ok(DiagGaussian { mean, log_std })
    }

    /// Standard normal with the shape of `like`.
    pub fn standard(like: Var<'t>) -> Self {
        let tape = like.tape();
        let zeros = tape.constant(Array::zeros(&like.shape()));
        DiagGaussian {
            mean: zeros,
            log_std: zeros,
        }
    }

    pub fn std(&self) -> Var<'t> {
        self.log_std.exp()
    }

    pub fn dim(&self) -> usize {
        *self.mean.shape().last().unwrap()
    }

    pub fn rsample(&self, noise: &Array) -> Result<Var<'t>> {
        let eps = self.mean.tape().constant(noise.clone());
        Ok(self.mean.try_add(self.std().try_mul(eps)?)?)
    }

    pub fn log_prob(&self, x: Var<'t>) -> Result<Var<'t>> {
        let z = x.try_sub(self.mean)?.try_div(self.std())?;
        let per_dim = (z.square().scale(-0.5) - self.log_std).add_scalar(-HALF_LN_2PI);
        Ok(per_dim.sum_axis(last_axis(per_dim), false))
    }

    pub fn entropy(&self) -> Var<'t> {
        self.log_std
            .add_scalar(0.5 + HALF_LN_2PI)
            .sum_axis(last_axis(self.log_std), false)
    }
}

/// Closed-form KL(p ‖ q) between diagonal Gaussians, summed over the last axis.
pub fn kl_diag_gaussian<'t>(p: &DiagGaussian<'t>, q: &DiagGaussian<'t>) -> Result<Var<'t>> {
    if p.mean.shape() != q.mean.shape() {
        return Err(Error::Precondition(format!(
            "kl between gaussians of shapes {:?} and {:?}",
            p.mean.shape(),
            q.mean.shape()
        )));
    }
    let var_p = p.log_std.scale(2.0).exp();
    let var_q = q.log_std.scale(2.0).exp();
    let num = var_p + (p.mean - q.mean).square();
    let per_dim = (q.log_std - p.log_std) + (num / var_q).scale(0.5);
    let per_dim = per_dim.add_scalar(-0.5);
    Ok(per_dim.sum_axis(last_axis(per_dim), false))
}

/// Box bounds of an action space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ActionBounds {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.len() != high.len() || low.is_empty() {
            return Err(Error::Precondition(
                "action bounds need matching non-empty dims".into(),
            ));
        }
        if low
            .iter()
            .zip(&high)
            .any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite())
        {
            return Err(Error::Precondition(format!(
                "degenerate action bounds {low:?} {high:?}"
            )));
        }
        Ok(ActionBounds { low, high })
    }

    pub fn symmetric(dim: usize) -> Self {
        ActionBounds {
            low: vec![-1.0; dim],
            high: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }

    pub fn half_width(&self) -> Vec<f64> {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(l, h)| 0.5 * (h - l))
            .collect()
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        a.iter()
            .zip(self.low.iter().zip(&self.high))
            .all(|(x, (l, h))| *x >= *l && *x <= *h)
    }

    pub fn clip(&self, a: &mut [f64]) {
        for (x, (l, h)) in a.iter_mut().zip(self.low.iter().zip(&self.high)) {
            *x = x.clamp(*l, *h);
        }
    }

    /// Map an action through the affine tanh inverse. Actions at the bounds are
    /// clamped by [`ATANH_EPS`]; actions outside the closed box are rejected.
    pub fn unsquash(&self, actions: &Array) -> Result<Array> {
        let d = self.dim();
        if actions.shape().last() != Some(&d) {
            return Err(Error::Precondition(format!(
                "actions of shape {:?} for {d}-dim bounds",
                actions.shape()
            )));
        }
        let (c, h) = (self.center(), self.half_width());
        let mut out = actions.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            let y = (*x - c[j]) / h[j];
            if !(y.abs() <= 1.0 + 1e-12) {
                return Err(Error::Precondition(format!(
                    "action {x} outside bounds [{}, {}]",
                    self.low[j], self.high[j]
                )));
            }
            *x = y.clamp(-1.0 + ATANH_EPS, 1.0 - ATANH_EPS).atanh();
        }
        Ok(out)
    }

    /// Affine tanh map on plain values.
    pub fn squash_values(&self, pre: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let (c, h) = (self.center(), self.half_width());
        pre.iter()
            .enumerate()
            .map(|(i, u)| c[i % d] + h[i % d] * u.tanh())
            .collect()
    }

    /// `log |da/du|` summed over dims for plain pre-squash values.
    pub fn log_det_jacobian_values(&self, pre: &[f64]) -> f64 {
        let d = self.dim();
        let h = self.half_width();
        pre.iter()
            .enumerate()
            .map(|(i, u)| h[i % d].ln() + 2.0 * (LN_2 - u - softplus(-2.0 * u)))
            .sum()
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Diagonal Gaussian pushed through `a = center + half · tanh(u)`.
#[derive(Clone, Copy)]
pub struct TanhDiagGaussian<'t, 'b> {
    pub base: DiagGaussian<'t>,
    pub bounds: &'b ActionBounds,
}

impl<'t, 'b> TanhDiagGaussian<'t, 'b> {
    pub fn new(base: DiagGaussian<'t>, bounds: &'b ActionBounds) -> Result<Self> {
        if base.dim() != bounds.dim() {
            return Err(Error::Precondition(format!(
                "{}-dim gaussian with {}-dim bounds",
                base.dim(),
                bounds.dim()
            )));
        }
        Ok(TanhDiagGaussian { base, bounds })
    }

    fn affine(&self) -> (Var<'t>, Var<'t>) {
        let tape = self.base.mean.tape();
        (
            tape.constant(Array::from_vec(self.bounds.center())),
            tape.constant(Array::from_vec(self.bounds.half_width())),
        )
    }

    pub fn squash(&self, pre: Var<'t>) -> Var<'t> {
        let (c, h) = self.affine();
        c + h * pre.tanh()
    }

    /// Returns `(pre_squash, action)`.
    pub fn rsample(&self, noise: &Array) -> Result<(Var<'t>, Var<'t>)> {
        let u = self.base.rsample(noise)?;
        Ok((u, self.squash(u)))
    }

    /// Deterministic action `squash(mean)`.
    pub fn mode(&self) -> Var<'t> {
        self.squash(self.base.mean)
    }

    /// `log |da/du|` summed over the last axis, in a numerically stable form.
    pub fn log_det_jacobian(&self, pre: Var<'t>) -> Var<'t> {
        let ln_half: f64 = self.bounds.half_width().iter().map(|h| h.ln()).sum();
        let per_dim = (LN_2 - pre - pre.scale(-2.0).softplus()).scale(2.0);
        per_dim
            .sum_axis(last_axis(per_dim), false)
            .add_scalar(ln_half)
    }

    pub fn log_prob_pre_squash(&self, pre: Var<'t>) -> Result<Var<'t>> {
        Ok(self.base.log_prob(pre)? - self.log_det_jacobian(pre))
    }

    /// Log-density of actions; fails for actions outside the closed bounds.
    pub fn log_prob(&self, actions: &Array) -> Result<Var<'t>> {
        let pre = self.bounds.unsquash(actions)?;
        self.log_prob_pre_squash(self.base.mean.tape().constant(pre))
    }

    /// Monte-Carlo entropy `−mean_k log_prob(rsample_k)` over the given noise draws.
    pub fn entropy_mc(&self, noises: &[Array]) -> Result<Var<'t>> {
        if noises.is_empty() {
            return Err(Error::Precondition(
                "entropy estimate needs at least one sample".into(),
            ));
        }
        let mut total: Option<Var<'t>> = None;
        for noise in noises {
            let (u, _) = self.rsample(noise)?;
            let lp = self.log_prob_pre_squash(u)?;
            total = Some(match total {
                Some(t) => t + lp,
                None => lp,
            });
        }
        Ok(total.unwrap().scale(-1.0 / noises.len() as f64))
    }
}

/// Finite mixture of univariate Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture1D {
    weights: Vec<f64>,
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl GaussianMixture1D {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, stds: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || stds.len() != k {
            return Err(Error::Precondition(
                "mixture needs equal, non-empty parameter lists".into(),
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(Error::Precondition(format!(
                "mixture weights {weights:?} are not a simplex"
            )));
        }
        if stds.iter().any(|s| !(*s > 0.0) || !s.is_finite())
            || means.iter().any(|m| !m.is_finite())
        {
            return Err(Error::Precondition(
                "mixture stds must be positive and means finite".into(),
            ));
        }
        Ok(GaussianMixture1D {
            weights,
            means,
            stds,
        })
    }

    pub fn single(mean: f64, std: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![std])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        let terms: Vec<f64> = (0..self.weights.len())
            .filter(|&i| self.weights[i] > 0.0)
            .map(|i| {
                let z = (x - self.means[i]) / self.stds[i];
                self.weights[i].ln() - 0.5 * z * z - self.stds[i].ln() - HALF_LN_2PI
            })
            .collect();
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.log_pdf(x).exp()
    }

    pub fn mean(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| w * m)
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let mut r: f64 = rng.gen();
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            if r < *w {
                k = i;
                break;
            }
            r -= w;
        }
        self.means[k] + self.stds[k] * rng.sample::<f64, _>(StandardNormal)
    }

    /// Intervals holding essentially all of the mass: each component mean
    /// plus or minus `width` standard deviations.
    pub fn support_windows(&self, width: f64) -> Vec<(f64, f64)> {
        (0..self.weights.len())
            .filter(|&i| self.weights[i] > 0.0)
            .map(|i| {
                (
                    self.means[i] - width * self.stds[i],
                    self.means[i] + width * self.stds[i],
                )
            })
            .collect()
    }
}

/// Density of `N(mean, std)` at `x`.
pub fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / (std * (2.0 * PI).sqrt())
}
