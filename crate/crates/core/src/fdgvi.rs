//! Finite-dimensional GVI baseline: a mean-field Gaussian
//! `Q_ν = N(μ, diag(exp β))` fitted by pathwise Monte Carlo gradient descent on
//!
//! ```text
//! L̃(ν) = E_{Z}[ℓ(μ + exp(β/2) ⊙ Z)] + λ·KL(Q_ν, P)
//! ```
//!
//! With a flat `P` the KL term is the negative entropy, `−(λ/2) Σⱼ βⱼ` up to a
//! constant.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::losses::LossModel;
use crate::rng::{stream, Purpose, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianVariational {
    pub mu: Vec<f64>,
    pub beta: Vec<f64>,
}

impl GaussianVariational {
    pub fn new(mu: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        check_dim(mu.len(), beta.len())?;
        if mu.is_empty() {
            return Err(Error::Config("variational family needs dimension ≥ 1".into()));
        }
        Ok(Self { mu, beta })
    }

    /// `μ = 0, β = 0`.
    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.beta.iter().map(|b| b.exp()).collect()
    }

    /// `μ + exp(β/2) ⊙ z`.
    pub fn transform(&self, z: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.beta)
            .zip(z)
            .map(|((m, b), z)| m + (0.5 * b).exp() * z)
            .collect()
    }
}

/// Reference measure of the KL term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KlReference {
    /// Entropy only.
    Flat,
    /// Closed-form KL to `N(mean, diag(variance))`.
    Gaussian { mean: Vec<f64>, variance: Vec<f64> },
}

impl KlReference {
    pub fn standard_normal(dim: usize) -> Self {
        Self::Gaussian {
            mean: vec![0.0; dim],
            variance: vec![1.0; dim],
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if let Self::Gaussian { mean, variance } = self {
            check_dim(dim, mean.len())?;
            check_dim(dim, variance.len())?;
            if variance.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Config("KL reference variances must be positive".into()));
            }
        }
        Ok(())
    }

    fn value(&self, q: &GaussianVariational) -> f64 {
        match self {
            Self::Flat => -0.5 * q.beta.iter().sum::<f64>(),
            Self::Gaussian { mean, variance } => {
                let mut kl = 0.0;
                for (((mu, b), m), v) in q.mu.iter().zip(&q.beta).zip(mean).zip(variance) {
                    kl += 0.5 * (b.exp() / v + (mu - m).powi(2) / v - 1.0 - (b - v.ln()));
                }
                kl
            }
        }
    }

    fn add_grad(&self, q: &GaussianVariational, scale: f64, d_mu: &mut [f64], d_beta: &mut [f64]) {
        match self {
            Self::Flat => d_beta.iter_mut().for_each(|g| *g -= 0.5 * scale),
            Self::Gaussian { mean, variance } => {
                for j in 0..q.dim() {
                    d_mu[j] += scale * (q.mu[j] - mean[j]) / variance[j];
                    d_beta[j] += scale * 0.5 * (q.beta[j].exp() / variance[j] - 1.0);
                }
            }
        }
    }
}

fn draw(dim: usize, count: usize, rng: &mut Stream) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

fn check_draws(q: &GaussianVariational, loss: &dyn LossModel, draws: &[Vec<f64>]) -> Result<()> {
    check_dim(loss.dim(), q.dim())?;
    if draws.is_empty() {
        return Err(Error::EmptyInput("Monte Carlo draws"));
    }
    draws.iter().try_for_each(|z| check_dim(q.dim(), z.len()))
}

/// `L̃(ν)` with the given standard-normal draws.
pub fn objective_with_draws(
    q: &GaussianVariational,
    loss: &dyn LossModel,
    lambda: f64,
    kl: &KlReference,
    draws: &[Vec<f64>],
) -> Result<f64> {
    check_draws(q, loss, draws)?;
    kl.validate(q.dim())?;
    let mc = draws.iter().map(|z| loss.value(&q.transform(z))).sum::<f64>() / draws.len() as f64;
    Ok(mc + lambda * kl.value(q))
}

/// `L̃(ν)` with `mc_samples` fresh draws from `rng`.
pub fn fdgvi_objective(
    q: &GaussianVariational,
    loss: &dyn LossModel,
    lambda: f64,
    kl: &KlReference,
    mc_samples: usize,
    rng: &mut Stream,
) -> Result<f64> {
    if mc_samples == 0 {
        return Err(Error::Config("mc_samples must be at least 1".into()));
    }
    objective_with_draws(q, loss, lambda, kl, &draw(q.dim(), mc_samples, rng))
}

/// Reparameterisation gradient `(∂L̃/∂μ, ∂L̃/∂β)` of [`objective_with_draws`].
pub fn pathwise_gradient(
    q: &GaussianVariational,
    loss: &dyn LossModel,
    lambda: f64,
    kl: &KlReference,
    draws: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_draws(q, loss, draws)?;
    kl.validate(q.dim())?;
    let dim = q.dim();
    let half_sd: Vec<f64> = q.beta.iter().map(|b| 0.5 * (0.5 * b).exp()).collect();
    let mut d_mu = vec![0.0; dim];
    let mut d_beta = vec![0.0; dim];
    let mut g = vec![0.0; dim];
    let w = 1.0 / draws.len() as f64;
    for z in draws {
        loss.grad_into(&q.transform(z), &mut g);
        for j in 0..dim {
            d_mu[j] += w * g[j];
            d_beta[j] += w * g[j] * z[j] * half_sd[j];
        }
    }
    kl.add_grad(q, lambda, &mut d_mu, &mut d_beta);
    Ok((d_mu, d_beta))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawMode {
    /// New draws every iteration.
    Fresh,
    /// One draw set reused for every iteration.
    Common,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdgviSettings {
    pub lambda: f64,
    pub kl: KlReference,
    pub learning_rate: f64,
    pub iterations: usize,
    pub mc_samples: usize,
    pub mode: DrawMode,
}

impl FdgviSettings {
    /// Flat KL, `lr = 0.01`, 5000 iterations, 200 draws, fresh draws.
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            kl: KlReference::Flat,
            learning_rate: 0.01,
            iterations: 5000,
            mc_samples: 200,
            mode: DrawMode::Fresh,
        }
    }
}

/// Plain gradient descent on `(μ, β)`, one iteration per [`step`](Self::step).
#[derive(Debug, Clone)]
pub struct FdgviTrainer<'a> {
    loss: &'a dyn LossModel,
    settings: FdgviSettings,
    q: GaussianVariational,
    rng: Stream,
    common: Option<Vec<Vec<f64>>>,
    iteration: usize,
}

impl<'a> FdgviTrainer<'a> {
    pub fn new(loss: &'a dyn LossModel, settings: FdgviSettings, init: GaussianVariational, seed: u64) -> Result<Self> {
        check_dim(loss.dim(), init.dim())?;
        settings.kl.validate(init.dim())?;
        if !(settings.learning_rate > 0.0) || !settings.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", settings.learning_rate)));
        }
        if !(settings.lambda >= 0.0) || !settings.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and ≥ 0, got {}", settings.lambda)));
        }
        if settings.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        let mut rng = stream(seed, Purpose::Fdgvi);
        let common = match settings.mode {
            DrawMode::Common => Some(draw(init.dim(), settings.mc_samples, &mut rng)),
            DrawMode::Fresh => None,
        };
        Ok(Self {
            loss,
            settings,
            q: init,
            rng,
            common,
            iteration: 0,
        })
    }

    pub fn current(&self) -> &GaussianVariational {
        &self.q
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// The common draw set, if any.
    pub fn common_draws(&self) -> Option<&[Vec<f64>]> {
        self.common.as_deref()
    }

    pub fn step(&mut self) -> Result<()> {
        let fresh;
        let draws = match &self.common {
            Some(d) => d.as_slice(),
            None => {
                fresh = draw(self.q.dim(), self.settings.mc_samples, &mut self.rng);
                fresh.as_slice()
            }
        };
        let (d_mu, d_beta) = pathwise_gradient(&self.q, self.loss, self.settings.lambda, &self.settings.kl, draws)?;
        let lr = self.settings.learning_rate;
        let mut next = self.q.clone();
        next.mu.iter_mut().zip(&d_mu).for_each(|(m, g)| *m -= lr * g);
        next.beta.iter_mut().zip(&d_beta).for_each(|(b, g)| *b -= lr * g);
        if next.mu.iter().chain(&next.beta).any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                particle: 0,
                step: self.iteration as u64,
                snapshot: vec![self.q.mu.clone(), self.q.beta.clone()],
            });
        }
        self.q = next;
        self.iteration += 1;
        Ok(())
    }
}

/// Runs `settings.iterations` steps from `init`.
pub fn fdgvi_train(
    loss: &dyn LossModel,
    settings: &FdgviSettings,
    init: GaussianVariational,
    seed: u64,
) -> Result<GaussianVariational> {
    let mut t = FdgviTrainer::new(loss, settings.clone(), init, seed)?;
    for _ in 0..settings.iterations {
        t.step()?;
    }
    Ok(t.q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{MixtureNllLoss, QuadraticLoss, ZeroLoss};

    #[test]
    fn zero_loss_objective_is_minus_half_lambda_sum_beta() {
        let q = GaussianVariational::new(vec![0.3, -1.0], vec![0.7, -0.2]).unwrap();
        let v = fdgvi_objective(&q, &ZeroLoss { dim: 2 }, 0.5, &KlReference::Flat, 10, &mut stream(0, Purpose::Fdgvi)).unwrap();
        assert_eq!(v, -0.25 * (0.7 + -0.2));
    }

    #[test]
    fn quadratic_objective_matches_chi_square_mean() {
        let q = GaussianVariational::standard(2);
        let mut rng = stream(1, Purpose::Fdgvi);
        let v = fdgvi_objective(&q, &QuadraticLoss { dim: 2 }, 1.0, &KlReference::Flat, 200, &mut rng).unwrap();
        // ‖Z‖²/2 has mean 1 and variance 1 for J = 2.
        assert!((v - 1.0).abs() < 3.0 / 200f64.sqrt());
        let pure = fdgvi_objective(&q, &QuadraticLoss { dim: 2 }, 0.0, &KlReference::Flat, 200, &mut stream(1, Purpose::Fdgvi)).unwrap();
        assert_eq!(pure, v);
    }

    #[test]
    fn closed_form_kl_matches_one_dimensional_formula() {
        let q = GaussianVariational::new(vec![0.4], vec![(0.3f64).ln()]).unwrap();
        let kl = KlReference::Gaussian {
            mean: vec![-0.1],
            variance: vec![2.0],
        };
        let (s2, v, dm) = (0.3f64, 2.0f64, 0.5f64);
        let expect = 0.5 * ((v / s2).ln() + (s2 + dm * dm) / v - 1.0);
        assert!((kl.value(&q) - expect).abs() < 1e-15);
    }

    #[test]
    fn pathwise_gradient_matches_common_random_number_differences() {
        let loss = MixtureNllLoss::default();
        let draws = draw(2, 50, &mut stream(7, Purpose::Fdgvi));
        for kl in [KlReference::Flat, KlReference::standard_normal(2)] {
            let q = GaussianVariational::new(vec![1.2, -0.4], vec![0.3, -0.8]).unwrap();
            let (d_mu, d_beta) = pathwise_gradient(&q, &loss, 0.5, &kl, &draws).unwrap();
            let h = 1e-6;
            for j in 0..2 {
                for (which, analytic) in [(0, d_mu[j]), (1, d_beta[j])] {
                    let mut up = q.clone();
                    let mut dn = q.clone();
                    let (u, d) = if which == 0 { (&mut up.mu, &mut dn.mu) } else { (&mut up.beta, &mut dn.beta) };
                    u[j] += h;
                    d[j] -= h;
                    let fd = (objective_with_draws(&up, &loss, 0.5, &kl, &draws).unwrap()
                        - objective_with_draws(&dn, &loss, 0.5, &kl, &draws).unwrap())
                        / (2.0 * h);
                    assert!((fd - analytic).abs() / analytic.abs().max(1e-8) < 1e-4, "{fd} vs {analytic}");
                }
            }
        }
    }

    #[test]
    fn gaussian_prior_fit_recovers_conjugate_variance() {
        let mut settings = FdgviSettings::new(1.0);
        settings.kl = KlReference::standard_normal(1);
        settings.iterations = 2000;
        let q = fdgvi_train(&QuadraticLoss { dim: 1 }, &settings, GaussianVariational::new(vec![1.0], vec![1.0]).unwrap(), 3).unwrap();
        assert!((q.variance()[0] - 0.5).abs() < 0.05, "{:?}", q);
        assert!(q.mu[0].abs() < 0.05);
    }

    #[test]
    fn zero_loss_entropy_keeps_growing() {
        let settings = FdgviSettings::new(1.0);
        let loss = ZeroLoss { dim: 2 };
        let mut t = FdgviTrainer::new(&loss, settings, GaussianVariational::standard(2), 0).unwrap();
        let mut prev = t.current().beta.clone();
        for _ in 0..5 {
            for _ in 0..100 {
                t.step().unwrap();
            }
            let b = t.current().beta.clone();
            assert!(b.iter().zip(&prev).all(|(n, p)| n > p));
            prev = b;
        }
    }

    #[test]
    fn common_draws_descend_monotonically_with_flat_prior() {
        let mut settings = FdgviSettings::new(0.5);
        settings.mode = DrawMode::Common;
        settings.mc_samples = 2000;
        let loss = QuadraticLoss { dim: 2 };
        let mut t = FdgviTrainer::new(&loss, settings, GaussianVariational::new(vec![2.0, -1.0], vec![1.0, 0.5]).unwrap(), 2).unwrap();
        let draws = t.common_draws().unwrap().to_vec();
        let mut prev = objective_with_draws(t.current(), &loss, 0.5, &KlReference::Flat, &draws).unwrap();
        for _ in 0..500 {
            t.step().unwrap();
            let v = objective_with_draws(t.current(), &loss, 0.5, &KlReference::Flat, &draws).unwrap();
            assert!(v <= prev + 1e-14);
            prev = v;
        }
    }

    #[test]
    fn rejects_bad_settings_and_reports_divergence() {
        let loss = QuadraticLoss { dim: 1 };
        let mut s = FdgviSettings::new(1.0);
        s.learning_rate = 0.0;
        assert!(FdgviTrainer::new(&loss, s.clone(), GaussianVariational::standard(1), 0).is_err());
        s.learning_rate = 1e300;
        let err = fdgvi_train(&loss, &s, GaussianVariational::new(vec![1.0], vec![0.0]).unwrap(), 0);
        assert!(matches!(err, Err(Error::Divergence { .. })));
    }
}
