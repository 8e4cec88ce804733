//! Loss functions `ℓ: ℝᴶ → ℝ` with analytic gradients.
//!
//! Every loss is immutable once built and can be shared across threads.
//! [`finite_diff_check`] compares any model's analytic gradient against
//! central differences.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::neural::{mse_and_grad, DataSplit, MlpShape};

/// Identifier plus the numeric parameters that pin down a loss.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossDescriptor {
    pub id: String,
    pub params: BTreeMap<String, f64>,
}

impl LossDescriptor {
    pub fn new(id: &str) -> Self {
        Self {
            id: id.to_string(),
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }
}

/// A differentiable loss. Implementations may assume `theta.len() == dim()`;
/// the checked entry points are [`eval_loss`] and [`grad_loss`].
pub trait LossModel: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn value(&self, theta: &[f64]) -> f64;

    /// Writes `∇ℓ(θ)` into `out`, overwriting its contents.
    fn grad_into(&self, theta: &[f64], out: &mut [f64]);

    fn descriptor(&self) -> LossDescriptor;

    fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.grad_into(theta, &mut out);
        out
    }
}

pub type SharedLoss = Arc<dyn LossModel>;

pub fn eval_loss(model: &dyn LossModel, theta: &[f64]) -> Result<f64> {
    check_dim(model.dim(), theta.len())?;
    Ok(model.value(theta))
}

pub fn grad_loss(model: &dyn LossModel, theta: &[f64]) -> Result<Vec<f64>> {
    check_dim(model.dim(), theta.len())?;
    Ok(model.grad(theta))
}

/// Largest coordinate-wise relative error between the analytic gradient and
/// the central difference `(ℓ(θ+heᵢ) − ℓ(θ−heᵢ)) / 2h`.
///
/// The denominator is `max(|analytic|, |numeric|)`, floored at `1e-8` so that
/// coordinates with a vanishing gradient report an absolute error instead.
pub fn finite_diff_check(model: &dyn LossModel, theta: &[f64], h: f64) -> Result<f64> {
    check_dim(model.dim(), theta.len())?;
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let analytic = model.grad(theta);
    let mut probe = theta.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let up = model.value(&probe);
        probe[i] = theta[i] - h;
        let down = model.value(&probe);
        probe[i] = theta[i];
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    Ok(worst)
}

/// `ℓ(θ) = (3/2)(θ⁴/4 + θ³/3 − θ²) − 3/8`: global minimum at −2, local
/// minimum at 1, local maximum at 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct DoubleWellLoss;

impl DoubleWellLoss {
    pub const GLOBAL_MIN: f64 = -2.0;
    pub const LOCAL_MIN: f64 = 1.0;
    pub const SADDLE: f64 = 0.0;

    pub fn derivative(theta: f64) -> f64 {
        // (3/2) θ (θ + 2)(θ − 1)
        1.5 * theta * (theta + 2.0) * (theta - 1.0)
    }
}

impl LossModel for DoubleWellLoss {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let t = theta[0];
        let t2 = t * t;
        1.5 * (t2 * t2 / 4.0 + t2 * t / 3.0 - t2) - 0.375
    }

    fn grad_into(&self, theta: &[f64], out: &mut [f64]) {
        out[0] = Self::derivative(theta[0]);
    }

    fn descriptor(&self) -> LossDescriptor {
        LossDescriptor::new("double_well")
    }
}

/// Negative log density of an equal-weight mixture of four unit-covariance
/// Gaussians centred at `(±3, ±3)`.
#[derive(Debug, Clone)]
pub struct MixtureNllLoss {
    centers: [[f64; 2]; 4],
}

impl Default for MixtureNllLoss {
    fn default() -> Self {
        Self {
            centers: [[3.0, 3.0], [3.0, -3.0], [-3.0, 3.0], [-3.0, -3.0]],
        }
    }
}

impl MixtureNllLoss {
    pub fn centers(&self) -> &[[f64; 2]; 4] {
        &self.centers
    }

    fn half_sq_dists(&self, theta: &[f64]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (o, c) in out.iter_mut().zip(&self.centers) {
            let dx = theta[0] - c[0];
            let dy = theta[1] - c[1];
            *o = 0.5 * (dx * dx + dy * dy);
        }
        out
    }
}

impl LossModel for MixtureNllLoss {
    fn dim(&self) -> usize {
        2
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let e = self.half_sq_dists(theta);
        let m = e.iter().cloned().fold(f64::INFINITY, f64::min);
        let s: f64 = e.iter().map(|ei| (m - ei).exp()).sum();
        // −log(¼ Σ exp(−eᵢ) / 2π)
        m - s.ln() + (4.0f64).ln() + (2.0 * PI).ln()
    }

    fn grad_into(&self, theta: &[f64], out: &mut [f64]) {
        let e = self.half_sq_dists(theta);
        let m = e.iter().cloned().fold(f64::INFINITY, f64::min);
        let w: Vec<f64> = e.iter().map(|ei| (m - ei).exp()).collect();
        let total: f64 = w.iter().sum();
        out[0] = 0.0;
        out[1] = 0.0;
        for (wi, c) in w.iter().zip(&self.centers) {
            let r = wi / total;
            out[0] += r * (theta[0] - c[0]);
            out[1] += r * (theta[1] - c[1]);
        }
    }

    fn descriptor(&self) -> LossDescriptor {
        LossDescriptor::new("mixture2d")
    }
}

/// `ℓ(θ) = −|sin θ|`, local minima at `π/2 + iπ`.
///
/// `half_width` (M) only describes the initialisation box `[−Mπ, Mπ]`; the
/// loss itself is evaluated periodically on all of ℝ. At the kinks `iπ` the
/// gradient is defined as 0.
#[derive(Debug, Clone, Copy)]
pub struct SineLoss {
    pub half_width: u32,
}

impl SineLoss {
    pub fn new(half_width: u32) -> Self {
        Self { half_width }
    }

    /// The `2M` minima `π/2 + iπ` for `i ∈ {−M, …, M−1}`.
    pub fn minima(&self) -> Vec<f64> {
        let m = self.half_width as i64;
        (-m..m).map(|i| PI / 2.0 + i as f64 * PI).collect()
    }

    /// Index `i` of the minimum `π/2 + iπ` nearest to `theta`.
    pub fn nearest_minimum_index(theta: f64) -> i64 {
        ((theta - PI / 2.0) / PI).round() as i64
    }
}

impl LossModel for SineLoss {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, theta: &[f64]) -> f64 {
        -theta[0].sin().abs()
    }

    fn grad_into(&self, theta: &[f64], out: &mut [f64]) {
        let s = theta[0].sin();
        out[0] = if s > 0.0 {
            -theta[0].cos()
        } else if s < 0.0 {
            theta[0].cos()
        } else {
            0.0
        };
    }

    fn descriptor(&self) -> LossDescriptor {
        LossDescriptor::new("sine").with("half_width", self.half_width as f64)
    }
}

/// `ℓ(θ) = ‖θ‖²/2`.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticLoss {
    pub dim: usize,
}

impl LossModel for QuadraticLoss {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, theta: &[f64]) -> f64 {
        0.5 * theta.iter().map(|t| t * t).sum::<f64>()
    }

    fn grad_into(&self, theta: &[f64], out: &mut [f64]) {
        out.copy_from_slice(theta);
    }

    fn descriptor(&self) -> LossDescriptor {
        LossDescriptor::new("quadratic").with("dim", self.dim as f64)
    }
}

/// `ℓ ≡ 0`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroLoss {
    pub dim: usize,
}

impl LossModel for ZeroLoss {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, _theta: &[f64]) -> f64 {
        0.0
    }

    fn grad_into(&self, _theta: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn descriptor(&self) -> LossDescriptor {
        LossDescriptor::new("zero").with("dim", self.dim as f64)
    }
}

/// Full-batch mean squared error of a one-hidden-layer MLP,
/// `ℓ(θ) = (1/N) Σₙ (f_θ(xₙ) − yₙ)²`.
#[derive(Debug, Clone)]
pub struct RegressionLoss {
    shape: MlpShape,
    data: Arc<DataSplit>,
}

impl RegressionLoss {
    pub fn new(shape: MlpShape, data: Arc<DataSplit>) -> Result<Self> {
        check_dim(shape.input_dim, data.dim())?;
        if data.is_empty() {
            return Err(Error::EmptyInput("regression data"));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> MlpShape {
        self.shape
    }

    pub fn data(&self) -> &DataSplit {
        &self.data
    }
}

impl LossModel for RegressionLoss {
    fn dim(&self) -> usize {
        self.shape.n_params()
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let n = self.data.len() as f64;
        self.data
            .iter()
            .map(|(x, y)| {
                let r = self.shape.forward(theta, x) - y;
                r * r
            })
            .sum::<f64>()
            / n
    }

    fn grad_into(&self, theta: &[f64], out: &mut [f64]) {
        mse_and_grad(&self.shape, theta, &self.data, out);
    }

    fn descriptor(&self) -> LossDescriptor {
        LossDescriptor::new("mlp_regression")
            .with("input_dim", self.shape.input_dim as f64)
            .with("hidden", self.shape.hidden as f64)
            .with("n_samples", self.data.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn double_well_values_at_stationary_points() {
        let l = DoubleWellLoss;
        assert!((eval_loss(&l, &[-2.0]).unwrap() - (-4.375)).abs() < 1e-14);
        assert!((eval_loss(&l, &[1.0]).unwrap() - (-1.0)).abs() < 1e-14);
        assert_eq!(grad_loss(&l, &[-2.0]).unwrap(), vec![0.0]);
        assert_eq!(grad_loss(&l, &[1.0]).unwrap(), vec![0.0]);
        assert_eq!(grad_loss(&l, &[0.0]).unwrap()[0].abs(), 0.0);
    }

    #[test]
    fn double_well_gradient_roots() {
        // ℓ' = (3/2)(θ³ + θ² − 2θ); check the factorised form agrees with the
        // expanded cubic and vanishes on {−2, 0, 1} only.
        for &r in &[-2.0, 0.0, 1.0] {
            assert!(DoubleWellLoss::derivative(r).abs() < 1e-12);
        }
        for i in -40..=40 {
            let t = i as f64 * 0.1;
            let expanded = 1.5 * (t * t * t + t * t - 2.0 * t);
            assert!((DoubleWellLoss::derivative(t) - expanded).abs() < 1e-12);
        }
        assert!(DoubleWellLoss::derivative(-1.0) > 0.0);
        assert!(DoubleWellLoss::derivative(0.5) < 0.0);
    }

    #[test]
    fn sine_value_and_kink_subgradient() {
        let l = SineLoss::new(1000);
        assert!((eval_loss(&l, &[PI / 2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(grad_loss(&l, &[0.0]).unwrap(), vec![0.0]);
        assert_eq!(l.minima().len(), 2000);
        assert!((l.minima()[0] - (PI / 2.0 - 1000.0 * PI)).abs() < 1e-9);
        assert_eq!(SineLoss::nearest_minimum_index(PI / 2.0 + 3.0 * PI + 0.2), 3);
    }

    #[test]
    fn mixture_gradient_vanishes_at_origin() {
        let l = MixtureNllLoss::default();
        let g = grad_loss(&l, &[0.0, 0.0]).unwrap();
        assert!(g[0].abs() < 1e-15 && g[1].abs() < 1e-15);
    }

    #[test]
    fn mixture_is_finite_far_away() {
        let l = MixtureNllLoss::default();
        let v = l.value(&[1e3, -2e3]);
        assert!(v.is_finite());
        assert!(l.grad(&[1e3, -2e3]).iter().all(|g| g.is_finite()));
    }

    #[test]
    fn finite_difference_examples() {
        assert!(finite_diff_check(&DoubleWellLoss, &[0.3], 1e-5).unwrap() < 1e-5);
        assert!(finite_diff_check(&MixtureNllLoss::default(), &[1.2, -0.7], 1e-5).unwrap() < 1e-5);
    }

    #[test]
    fn finite_difference_over_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let losses: Vec<Box<dyn LossModel>> = vec![
            Box::new(DoubleWellLoss),
            Box::new(MixtureNllLoss::default()),
            Box::new(SineLoss::new(1000)),
            Box::new(QuadraticLoss { dim: 3 }),
        ];
        for loss in &losses {
            for _ in 0..100 {
                let theta: Vec<f64> = (0..loss.dim()).map(|_| rng.random_range(-5.0..5.0)).collect();
                let err = finite_diff_check(loss.as_ref(), &theta, 1e-5).unwrap();
                assert!(err < 1e-4, "{:?} at {theta:?}: {err}", loss.descriptor());
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(matches!(
            eval_loss(&DoubleWellLoss, &[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 1, got: 2 })
        ));
        assert!(grad_loss(&MixtureNllLoss::default(), &[1.0]).is_err());
        assert!(finite_diff_check(&DoubleWellLoss, &[1.0], 0.0).is_err());
    }

    #[test]
    fn regression_loss_is_non_negative() {
        let data = DataSplit::new(vec![0.0, 1.0, 2.0], vec![1.0, -1.0, 0.5], 1).unwrap();
        let loss = RegressionLoss::new(MlpShape::new(1, 4), Arc::new(data)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let theta: Vec<f64> = (0..loss.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            assert!(loss.value(&theta) >= 0.0);
        }
    }
}
