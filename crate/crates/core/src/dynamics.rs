//! Drift assembly and time integration of the interacting particle system.
//!
//! Each particle follows
//!
//! ```text
//! θ_{n,k+1} = θ_{n,k} − η·drift_n + √(2ηλ₂)·Z_{n,k}
//! drift_n   = ∇V(θ_{n,k}) + (λ₁/N) Σ_j ∇₁κ(θ_{n,k}, θ_{j,k})
//! V         = ℓ − λ₁·μ_P − λ₂·log p
//! ```
//!
//! All drifts of a step are computed from the step-`k` snapshot before any
//! particle moves. Particle `n` draws its noise from its own stream, so a
//! run is a pure function of its seed.

use std::fmt;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernels::{MeanEmbedding, SeKernel};
use crate::losses::SharedLoss;
use crate::measures::{Initializer, ReferenceMeasure};
use crate::rng::{particle_stream, stream, Purpose, Stream};

/// Which regulariser the particle system realises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Deep ensembles: plain gradient flow.
    De,
    /// Deep Langevin ensembles: KL regularisation.
    Dle,
    /// Deep repulsive Langevin ensembles: MMD + KL.
    Drle,
    /// Deep repulsive ensembles: MMD only, noise-free.
    Dre,
}

impl Method {
    pub fn from_weights(lambda1: f64, lambda2: f64) -> Self {
        match (lambda1 > 0.0, lambda2 > 0.0) {
            (false, false) => Method::De,
            (false, true) => Method::Dle,
            (true, true) => Method::Drle,
            (true, false) => Method::Dre,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::De => "de",
            Method::Dle => "dle",
            Method::Drle => "drle",
            Method::Dre => "dre",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Potential and interaction recipe for one method.
#[derive(Debug, Clone)]
pub struct MethodSpec {
    method: Method,
    loss: SharedLoss,
    prior: ReferenceMeasure,
    kernel: Option<SeKernel>,
    embedding: Option<MeanEmbedding>,
    lambda1: f64,
    lambda2: f64,
}

impl MethodSpec {
    /// Validates the method/weight pairing and the presence of the kernel
    /// pieces the weights require.
    ///
    /// With `λ₁ > 0` a kernel is required; a non-flat prior additionally
    /// needs a mean embedding built on the same kernel. Under a flat prior
    /// the embedding is constant and must be omitted.
    pub fn new(
        method: Method,
        loss: SharedLoss,
        prior: ReferenceMeasure,
        kernel: Option<SeKernel>,
        embedding: Option<MeanEmbedding>,
        lambda1: f64,
        lambda2: f64,
    ) -> Result<Self> {
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        let implied = Method::from_weights(lambda1, lambda2);
        if implied != method {
            return Err(Error::Config(format!(
                "method {method} is inconsistent with lambda1={lambda1}, lambda2={lambda2} (implies {implied})"
            )));
        }
        check_dim(loss.dim(), prior.dim())?;
        if lambda1 > 0.0 {
            let k = kernel.ok_or_else(|| Error::Config(format!("method {method} needs a kernel")))?;
            match (&embedding, prior.is_flat()) {
                (None, false) => {
                    return Err(Error::Config(
                        "a non-flat prior with lambda1 > 0 needs a mean embedding".into(),
                    ))
                }
                (Some(_), true) => {
                    return Err(Error::Config(
                        "the mean embedding of a flat prior is constant; omit it".into(),
                    ))
                }
                (Some(e), false) => {
                    check_dim(loss.dim(), e.dim())?;
                    if e.kernel() != &k {
                        return Err(Error::Config("mean embedding must use the interaction kernel".into()));
                    }
                }
                (None, true) => {}
            }
        }
        Ok(Self {
            method,
            loss,
            prior,
            kernel: if lambda1 > 0.0 { kernel } else { None },
            embedding: if lambda1 > 0.0 { embedding } else { None },
            lambda1,
            lambda2,
        })
    }

    /// Deep ensemble on `loss` (the prior only fixes the dimension).
    pub fn de(loss: SharedLoss) -> Result<Self> {
        let prior = ReferenceMeasure::flat(loss.dim())?;
        Self::new(Method::De, loss, prior, None, None, 0.0, 0.0)
    }

    pub fn dle(loss: SharedLoss, prior: ReferenceMeasure, lambda: f64) -> Result<Self> {
        Self::new(Method::Dle, loss, prior, None, None, 0.0, lambda)
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn loss(&self) -> &SharedLoss {
        &self.loss
    }

    pub fn prior(&self) -> &ReferenceMeasure {
        &self.prior
    }

    pub fn kernel(&self) -> Option<&SeKernel> {
        self.kernel.as_ref()
    }

    pub fn embedding(&self) -> Option<&MeanEmbedding> {
        self.embedding.as_ref()
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    pub fn dim(&self) -> usize {
        self.loss.dim()
    }

    /// `V(θ)`, dropping the constant contributions of flat/uniform priors.
    pub fn potential(&self, theta: &[f64]) -> Result<f64> {
        check_dim(self.dim(), theta.len())?;
        let mut v = self.loss.value(theta);
        if let Some(e) = &self.embedding {
            v -= self.lambda1 * e.value(theta);
        }
        if self.lambda2 > 0.0 {
            if let ReferenceMeasure::Gaussian { .. } = self.prior {
                v -= self.lambda2 * self.prior.log_density(theta)?;
            }
        }
        Ok(v)
    }

    /// Unchecked `out = ∇V(θ)`.
    pub fn potential_grad_into(&self, theta: &[f64], out: &mut [f64]) {
        self.loss.grad_into(theta, out);
        if let Some(e) = &self.embedding {
            e.add_grad(theta, -self.lambda1, out);
        }
        if self.lambda2 > 0.0 {
            self.prior.add_grad_log_density(theta, -self.lambda2, out);
        }
    }
}

/// The discrete representation of `Q(t)`: `N` particles in ℝᴶ, each with
/// its own noise stream.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    dim: usize,
    positions: Vec<f64>,
    streams: Vec<Stream>,
    step: u64,
    step_size: f64,
}

impl ParticleEnsemble {
    /// Particle `n` gets the diffusion stream `(seed, n)`.
    pub fn new(particles: Vec<Vec<f64>>, step_size: f64, seed: u64) -> Result<Self> {
        let streams = (0..particles.len()).map(|n| particle_stream(seed, n)).collect();
        Self::from_parts(particles, streams, step_size)
    }

    pub fn from_parts(particles: Vec<Vec<f64>>, streams: Vec<Stream>, step_size: f64) -> Result<Self> {
        let first = particles.first().ok_or(Error::EmptyInput("particle ensemble"))?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::Config("particles need dimension ≥ 1".into()));
        }
        check_dim(particles.len(), streams.len())?;
        if !(step_size > 0.0) || !step_size.is_finite() {
            return Err(Error::Config(format!("step size must be positive, got {step_size}")));
        }
        let mut positions = Vec::with_capacity(particles.len() * dim);
        for (n, p) in particles.iter().enumerate() {
            check_dim(dim, p.len())?;
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence {
                    particle: n,
                    step: 0,
                    snapshot: particles.clone(),
                });
            }
            positions.extend_from_slice(p);
        }
        Ok(Self {
            dim,
            positions,
            streams,
            step: 0,
            step_size,
        })
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn particle(&self, n: usize) -> &[f64] {
        &self.positions[n * self.dim..(n + 1) * self.dim]
    }

    pub fn particles(&self) -> Vec<Vec<f64>> {
        self.positions.chunks_exact(self.dim).map(<[f64]>::to_vec).collect()
    }

    pub fn streams(&self) -> &[Stream] {
        &self.streams
    }
}

/// `∇V(θₙ) + (λ₁/N) Σⱼ ∇₁κ(θₙ, θⱼ)` on the current snapshot, self term
/// included.
pub fn drift(spec: &MethodSpec, ensemble: &ParticleEnsemble, n: usize) -> Result<Vec<f64>> {
    check_dim(spec.dim(), ensemble.dim())?;
    if n >= ensemble.len() {
        return Err(Error::Config(format!(
            "particle index {n} out of range for {} particles",
            ensemble.len()
        )));
    }
    let theta = ensemble.particle(n);
    let mut out = vec![0.0; theta.len()];
    spec.potential_grad_into(theta, &mut out);
    if let Some(k) = spec.kernel() {
        let w = spec.lambda1() / ensemble.len() as f64;
        for j in 0..ensemble.len() {
            k.add_grad1(theta, ensemble.particle(j), w, &mut out);
        }
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Divergence {
            particle: n,
            step: ensemble.step(),
            snapshot: ensemble.particles(),
        });
    }
    Ok(out)
}

/// All drifts of the snapshot, row-major `N × J`. The interaction sum visits
/// each unordered pair once.
fn all_drifts(spec: &MethodSpec, ens: &ParticleEnsemble, out: &mut [f64]) -> Result<()> {
    let dim = ens.dim;
    let n = ens.len();
    for (i, row) in out.chunks_exact_mut(dim).enumerate() {
        spec.potential_grad_into(ens.particle(i), row);
    }
    if let Some(k) = spec.kernel() {
        let inv_var = 1.0 / (k.lengthscale() * k.lengthscale());
        let w = spec.lambda1() / n as f64;
        if dim == 1 {
            let x = &ens.positions;
            let scale = w * inv_var;
            for i in 0..n {
                let xi = x[i];
                let mut acc = 0.0;
                for (oj, xj) in out[i + 1..].iter_mut().zip(&x[i + 1..]) {
                    let d = xi - xj;
                    let f = scale * (-0.5 * d * d * inv_var).exp() * d;
                    acc -= f;
                    *oj += f;
                }
                out[i] += acc;
            }
            return check_finite(ens, out);
        }
        let mut diff = vec![0.0; dim];
        for i in 0..n {
            let a = ens.particle(i);
            for j in (i + 1)..n {
                let b = ens.particle(j);
                let mut sq = 0.0;
                for ((d, x), y) in diff.iter_mut().zip(a).zip(b) {
                    *d = x - y;
                    sq += *d * *d;
                }
                let c = w * inv_var * (-0.5 * sq * inv_var).exp();
                // ∇₁κ(a, b) = −c·(a − b)/w·w, and ∇₁κ(b, a) is its negative.
                let (head, tail) = out.split_at_mut(j * dim);
                let ri = &mut head[i * dim..(i + 1) * dim];
                let rj = &mut tail[..dim];
                for ((oi, oj), d) in ri.iter_mut().zip(rj.iter_mut()).zip(&diff) {
                    *oi -= c * d;
                    *oj += c * d;
                }
            }
        }
    }
    check_finite(ens, out)
}

fn check_finite(ens: &ParticleEnsemble, out: &[f64]) -> Result<()> {
    if let Some(bad) = out.chunks_exact(ens.dim).position(|r| r.iter().any(|x| !x.is_finite())) {
        return Err(Error::Divergence {
            particle: bad,
            step: ens.step,
            snapshot: ens.particles(),
        });
    }
    Ok(())
}

/// One Euler–Maruyama step. On divergence the ensemble is left at its last
/// finite state and the error carries that snapshot.
pub fn em_step(spec: &MethodSpec, ensemble: &mut ParticleEnsemble) -> Result<()> {
    let mut scratch = vec![0.0; ensemble.positions.len()];
    em_step_with(spec, ensemble, &mut scratch)
}

fn em_step_with(spec: &MethodSpec, ens: &mut ParticleEnsemble, scratch: &mut [f64]) -> Result<()> {
    check_dim(spec.dim(), ens.dim)?;
    all_drifts(spec, ens, scratch)?;
    let eta = ens.step_size;
    let noise = (2.0 * eta * spec.lambda2()).sqrt();
    let dim = ens.dim;
    for (n, (next, stream)) in scratch.chunks_exact_mut(dim).zip(ens.streams.iter_mut()).enumerate() {
        let cur = &ens.positions[n * dim..(n + 1) * dim];
        for (x, c) in next.iter_mut().zip(cur) {
            *x = c - eta * *x;
        }
        if spec.lambda2() > 0.0 {
            for x in next.iter_mut() {
                let z: f64 = StandardNormal.sample(stream);
                *x += noise * z;
            }
        }
    }
    if let Some(bad) = scratch.chunks_exact(dim).position(|r| r.iter().any(|x| !x.is_finite())) {
        return Err(Error::Divergence {
            particle: bad,
            step: ens.step,
            snapshot: ens.particles(),
        });
    }
    ens.positions.copy_from_slice(scratch);
    ens.step += 1;
    Ok(())
}

/// Integration settings for [`run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub n_particles: usize,
    pub step_size: f64,
    pub n_steps: u64,
    pub seed: u64,
    /// Steps at which to snapshot; the final step is always recorded.
    pub checkpoints: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot {
    pub step: u64,
    pub particles: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointMetrics {
    pub step: u64,
    pub mean_loss: f64,
    pub min_loss: f64,
    pub max_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub method: Method,
    pub settings: RunSettings,
    pub dim: usize,
    pub snapshots: Vec<Snapshot>,
    pub metrics: Vec<CheckpointMetrics>,
}

impl RunRecord {
    pub fn final_snapshot(&self) -> &Snapshot {
        self.snapshots.last().expect("a run always records its final step")
    }
}

/// Samples `N` particles i.i.d. from `init` and evolves them for `K` steps.
pub fn run(spec: &MethodSpec, init: &Initializer, settings: &RunSettings) -> Result<RunRecord> {
    if settings.n_particles == 0 {
        return Err(Error::Config("n_particles must be at least 1".into()));
    }
    check_dim(spec.dim(), init.dim())?;
    let particles = init.sample(settings.n_particles, &mut stream(settings.seed, Purpose::Init))?;
    let ensemble = ParticleEnsemble::new(particles, settings.step_size, settings.seed)?;
    run_ensemble(spec, ensemble, settings)
}

/// Evolves a prepared ensemble; `settings.n_particles` must match it.
pub fn run_ensemble(spec: &MethodSpec, mut ensemble: ParticleEnsemble, settings: &RunSettings) -> Result<RunRecord> {
    if settings.n_steps == 0 {
        return Err(Error::Config("n_steps must be at least 1".into()));
    }
    check_dim(settings.n_particles, ensemble.len())?;
    let mut schedule = settings.checkpoints.clone();
    if let Some(&bad) = schedule.iter().find(|&&c| c > settings.n_steps) {
        return Err(Error::Config(format!(
            "checkpoint {bad} is beyond n_steps = {}",
            settings.n_steps
        )));
    }
    schedule.push(settings.n_steps);
    schedule.sort_unstable();
    schedule.dedup();

    let mut snapshots = Vec::with_capacity(schedule.len());
    let mut metrics = Vec::with_capacity(schedule.len());
    let mut scratch = vec![0.0; ensemble.positions.len()];
    let mut next = schedule.iter().peekable();
    loop {
        if next.peek() == Some(&&ensemble.step) {
            next.next();
            metrics.push(checkpoint_metrics(spec, &ensemble));
            snapshots.push(Snapshot {
                step: ensemble.step,
                particles: ensemble.particles(),
            });
        }
        if ensemble.step == settings.n_steps {
            break;
        }
        em_step_with(spec, &mut ensemble, &mut scratch)?;
    }
    Ok(RunRecord {
        method: spec.method(),
        settings: RunSettings {
            checkpoints: schedule,
            ..settings.clone()
        },
        dim: ensemble.dim,
        snapshots,
        metrics,
    })
}

fn checkpoint_metrics(spec: &MethodSpec, ens: &ParticleEnsemble) -> CheckpointMetrics {
    let losses: Vec<f64> = (0..ens.len()).map(|n| spec.loss().value(ens.particle(n))).collect();
    CheckpointMetrics {
        step: ens.step,
        mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
        min_loss: losses.iter().cloned().fold(f64::INFINITY, f64::min),
        max_loss: losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowOutcome {
    pub theta: Vec<f64>,
    pub converged: bool,
    pub steps: u64,
}

/// Explicit-Euler integration of `θ' = −∇ℓ(θ)` until `‖∇ℓ‖ < tolerance` or
/// `max_steps` is exhausted.
pub fn gradient_flow(
    loss: &dyn crate::losses::LossModel,
    theta0: &[f64],
    step: f64,
    max_steps: u64,
    tolerance: f64,
) -> Result<FlowOutcome> {
    check_dim(loss.dim(), theta0.len())?;
    if !(step > 0.0) {
        return Err(Error::Config(format!("flow step must be positive, got {step}")));
    }
    let mut theta = theta0.to_vec();
    let mut g = vec![0.0; theta.len()];
    for k in 0..=max_steps {
        loss.grad_into(&theta, &mut g);
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < tolerance {
            return Ok(FlowOutcome {
                theta,
                converged: true,
                steps: k,
            });
        }
        if k == max_steps || !norm.is_finite() {
            break;
        }
        for (t, gi) in theta.iter_mut().zip(&g) {
            *t -= step * gi;
        }
    }
    let steps = max_steps;
    Ok(FlowOutcome {
        theta,
        converged: false,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{DoubleWellLoss, LossModel, QuadraticLoss, SineLoss, ZeroLoss};
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn quad() -> SharedLoss {
        Arc::new(QuadraticLoss { dim: 1 })
    }

    #[test]
    fn method_tags_follow_weights() {
        assert_eq!(Method::from_weights(0.0, 0.0), Method::De);
        assert_eq!(Method::from_weights(0.0, 1.0), Method::Dle);
        assert_eq!(Method::from_weights(1.0, 1.0), Method::Drle);
        assert_eq!(Method::from_weights(1.0, 0.0), Method::Dre);
        let prior = ReferenceMeasure::standard_normal(1);
        assert!(MethodSpec::new(Method::De, quad(), prior.clone(), None, None, 0.0, 0.5).is_err());
        assert!(MethodSpec::new(Method::Dle, quad(), prior.clone(), None, None, 0.0, -1.0).is_err());
        // λ₁ > 0 needs a kernel, and a Gaussian prior needs an embedding.
        let k = SeKernel::new(1.0).unwrap();
        assert!(MethodSpec::new(Method::Dre, quad(), prior.clone(), None, None, 1.0, 0.0).is_err());
        assert!(MethodSpec::new(Method::Dre, quad(), prior, Some(k), None, 1.0, 0.0).is_err());
        let flat = ReferenceMeasure::flat(1).unwrap();
        let emb = MeanEmbedding::new(k, vec![vec![0.0]]).unwrap();
        assert!(MethodSpec::new(Method::Dre, quad(), flat.clone(), Some(k), Some(emb), 1.0, 0.0).is_err());
        assert!(MethodSpec::new(Method::Dre, quad(), flat, Some(k), None, 1.0, 0.0).is_ok());
    }

    #[test]
    fn de_drift_is_loss_gradient() {
        let spec = MethodSpec::de(Arc::new(DoubleWellLoss)).unwrap();
        let ens = ParticleEnsemble::new(vec![vec![0.5]], 0.1, 0).unwrap();
        let d = drift(&spec, &ens, 0).unwrap();
        assert!((d[0] - (-0.9375)).abs() < 1e-15);
        assert!(drift(&spec, &ens, 1).is_err());
    }

    #[test]
    fn dle_drift_adds_prior_pull() {
        let spec = MethodSpec::dle(quad(), ReferenceMeasure::standard_normal(1), 1.0).unwrap();
        let ens = ParticleEnsemble::new(vec![vec![2.0]], 0.1, 0).unwrap();
        assert_eq!(drift(&spec, &ens, 0).unwrap(), vec![4.0]);
    }

    #[test]
    fn flat_prior_potential_gradient_is_loss_gradient() {
        let loss: SharedLoss = Arc::new(crate::losses::MixtureNllLoss::default());
        let k = SeKernel::new(1.0).unwrap();
        let flat = ReferenceMeasure::flat(2).unwrap();
        let specs = [
            MethodSpec::de(loss.clone()).unwrap(),
            MethodSpec::dle(loss.clone(), flat.clone(), 0.2).unwrap(),
            MethodSpec::new(Method::Drle, loss.clone(), flat, Some(k), None, 0.6, 0.2).unwrap(),
        ];
        for theta in [[0.3, -1.0], [2.5, 3.5], [-4.0, 0.1]] {
            let g = loss.grad(&theta);
            for s in &specs {
                let mut out = vec![0.0; 2];
                s.potential_grad_into(&theta, &mut out);
                assert_eq!(out, g);
            }
        }
    }

    #[test]
    fn gradient_descent_step() {
        let spec = MethodSpec::de(quad()).unwrap();
        let mut ens = ParticleEnsemble::new(vec![vec![1.0]], 0.1, 0).unwrap();
        em_step(&spec, &mut ens).unwrap();
        assert!((ens.particle(0)[0] - 0.9).abs() < 1e-15);
        assert_eq!(ens.step(), 1);
    }

    #[test]
    fn two_particles_repel_along_their_difference() {
        let k = SeKernel::new(1.0).unwrap();
        let spec = MethodSpec::new(
            Method::Dre,
            Arc::new(ZeroLoss { dim: 2 }),
            ReferenceMeasure::flat(2).unwrap(),
            Some(k),
            None,
            1.0,
            0.0,
        )
        .unwrap();
        let a = [0.2, -0.1];
        let b = [0.8, 0.7];
        let mut ens = ParticleEnsemble::new(vec![a.to_vec(), b.to_vec()], 0.05, 0).unwrap();
        em_step(&spec, &mut ens).unwrap();
        let diff = [b[0] - a[0], b[1] - a[1]];
        let da = [ens.particle(0)[0] - a[0], ens.particle(0)[1] - a[1]];
        let db = [ens.particle(1)[0] - b[0], ens.particle(1)[1] - b[1]];
        // a moves along −diff, b along +diff, by equal amounts
        let cross = |u: [f64; 2], v: [f64; 2]| u[0] * v[1] - u[1] * v[0];
        assert!(cross(da, diff).abs() < 1e-15 && cross(db, diff).abs() < 1e-15);
        assert!(da[0] * diff[0] + da[1] * diff[1] < 0.0);
        assert!(db[0] * diff[0] + db[1] * diff[1] > 0.0);
        assert!((da[0] + db[0]).abs() < 1e-15);
    }

    #[test]
    fn langevin_step_matches_hand_rolled_oracle() {
        use rand_distr::{Distribution, StandardNormal};
        let lambda = 0.7;
        let eta = 0.01;
        let spec = MethodSpec::dle(quad(), ReferenceMeasure::standard_normal(1), lambda).unwrap();
        let init = vec![vec![1.3], vec![-0.4], vec![2.2]];
        let mut ens = ParticleEnsemble::new(init.clone(), eta, 42).unwrap();
        let mut streams: Vec<_> = ens.streams().to_vec();
        em_step(&spec, &mut ens).unwrap();
        for (n, theta) in init.iter().enumerate() {
            let z: f64 = StandardNormal.sample(&mut streams[n]);
            let t = theta[0];
            let expect = t - eta * t * (1.0 + lambda) + (2.0 * eta * lambda).sqrt() * z;
            assert!((ens.particle(n)[0] - expect).abs() < 1e-14);
        }
    }

    fn repulsive_dle(n: usize) -> (MethodSpec, ParticleEnsemble) {
        let k = SeKernel::new(0.8).unwrap();
        let prior = ReferenceMeasure::standard_normal(1);
        let emb = MeanEmbedding::new(k, vec![vec![-0.5], vec![0.1], vec![1.2]]).unwrap();
        let spec = MethodSpec::new(Method::Drle, Arc::new(DoubleWellLoss), prior, Some(k), Some(emb), 1.0, 0.5).unwrap();
        let particles: Vec<Vec<f64>> = (0..n).map(|i| vec![-2.0 + 0.37 * i as f64]).collect();
        (spec, ParticleEnsemble::new(particles, 1e-3, 5).unwrap())
    }

    #[test]
    fn step_uses_snapshot_drifts() {
        let (spec, ens) = repulsive_dle(7);
        let forward: Vec<Vec<f64>> = (0..7).map(|n| drift(&spec, &ens, n).unwrap()).collect();
        let backward: Vec<Vec<f64>> = (0..7).rev().map(|n| drift(&spec, &ens, n).unwrap()).collect();
        for (a, b) in forward.iter().zip(backward.iter().rev()) {
            assert_eq!(a, b);
        }
        // em_step's pairwise accumulation agrees with per-particle drifts.
        let mut stepped = ens.clone();
        let mut streams = ens.streams().to_vec();
        em_step(&spec, &mut stepped).unwrap();
        let noise = (2.0 * 1e-3 * 0.5f64).sqrt();
        for n in 0..7 {
            let z: f64 = StandardNormal.sample(&mut streams[n]);
            let expect = ens.particle(n)[0] - 1e-3 * forward[n][0] + noise * z;
            assert!((stepped.particle(n)[0] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn permuting_particles_with_streams_permutes_outputs() {
        let (spec, ens) = repulsive_dle(6);
        let perm = [3, 0, 5, 1, 4, 2];
        let particles: Vec<Vec<f64>> = perm.iter().map(|&i| ens.particle(i).to_vec()).collect();
        let streams: Vec<Stream> = perm.iter().map(|&i| ens.streams()[i].clone()).collect();
        let mut permuted = ParticleEnsemble::from_parts(particles, streams, ens.step_size()).unwrap();
        let mut base = ens.clone();
        for _ in 0..50 {
            em_step(&spec, &mut base).unwrap();
            em_step(&spec, &mut permuted).unwrap();
        }
        for (slot, &i) in perm.iter().enumerate() {
            assert!((permuted.particle(slot)[0] - base.particle(i)[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn de_runs_ignore_the_noise_seed() {
        let spec = MethodSpec::de(Arc::new(DoubleWellLoss)).unwrap();
        let init: Vec<Vec<f64>> = (0..10).map(|i| vec![-1.5 + 0.3 * i as f64]).collect();
        let settings = |seed| RunSettings {
            n_particles: 10,
            step_size: 1e-3,
            n_steps: 500,
            seed,
            checkpoints: vec![],
        };
        let a = run_ensemble(&spec, ParticleEnsemble::new(init.clone(), 1e-3, 1).unwrap(), &settings(1)).unwrap();
        let b = run_ensemble(&spec, ParticleEnsemble::new(init, 1e-3, 99).unwrap(), &settings(99)).unwrap();
        for (x, y) in a.final_snapshot().particles.iter().zip(&b.final_snapshot().particles) {
            assert!((x[0] - y[0]).abs() <= 1e-15);
        }
    }

    #[test]
    fn de_descends_monotonically_on_double_well() {
        let spec = MethodSpec::de(Arc::new(DoubleWellLoss)).unwrap();
        let init: Vec<Vec<f64>> = (0..9).map(|i| vec![-2.8 + 0.7 * i as f64]).collect();
        let mut ens = ParticleEnsemble::new(init, 1e-4, 0).unwrap();
        let l = DoubleWellLoss;
        let mut prev: Vec<f64> = (0..9).map(|n| l.value(ens.particle(n))).collect();
        for _ in 0..20_000 {
            em_step(&spec, &mut ens).unwrap();
            for (n, p) in prev.iter_mut().enumerate() {
                let v = l.value(ens.particle(n));
                // a few ulps of evaluation noise once a particle has settled
                assert!(v <= *p + 4.0 * f64::EPSILON * p.abs(), "particle {n}: {v:e} after {p:e} at {:?}", ens.particle(n));
                *p = v;
            }
        }
    }

    #[test]
    fn repulsion_strictly_increases_distance() {
        let k = SeKernel::new(1.0).unwrap();
        let spec = MethodSpec::new(
            Method::Dre,
            Arc::new(ZeroLoss { dim: 1 }),
            ReferenceMeasure::flat(1).unwrap(),
            Some(k),
            None,
            1.0,
            0.0,
        )
        .unwrap();
        let mut ens = ParticleEnsemble::new(vec![vec![-0.25], vec![0.25]], 0.1, 0).unwrap();
        let mut dist = 0.5;
        for _ in 0..1000 {
            em_step(&spec, &mut ens).unwrap();
            let d = ens.particle(1)[0] - ens.particle(0)[0];
            assert!(d > dist);
            dist = d;
        }
    }

    #[test]
    fn divergence_reports_particle_and_keeps_snapshot() {
        let spec = MethodSpec::de(quad()).unwrap();
        // η = 3 makes θ ← −2θ, which overflows after ~1024 steps.
        let mut ens = ParticleEnsemble::new(vec![vec![0.0], vec![1.0]], 3.0, 0).unwrap();
        let err = loop {
            if let Err(e) = em_step(&spec, &mut ens) {
                break e;
            }
        };
        match err {
            Error::Divergence { particle, step, snapshot } => {
                assert_eq!(particle, 1);
                assert_eq!(step, ens.step());
                assert!(snapshot.iter().flatten().all(|x| x.is_finite()));
                assert_eq!(snapshot, ens.particles());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn run_bookkeeping() {
        let spec = MethodSpec::dle(quad(), ReferenceMeasure::standard_normal(1), 1.0).unwrap();
        let init = Initializer::measure(ReferenceMeasure::standard_normal(1));
        let mut settings = RunSettings {
            n_particles: 4,
            step_size: 0.01,
            n_steps: 1,
            seed: 3,
            checkpoints: vec![0],
        };
        let rec = run(&spec, &init, &settings).unwrap();
        assert_eq!(rec.snapshots.iter().map(|s| s.step).collect::<Vec<_>>(), vec![0, 1]);
        let mut ens = ParticleEnsemble::new(rec.snapshots[0].particles.clone(), 0.01, 3).unwrap();
        em_step(&spec, &mut ens).unwrap();
        assert_eq!(ens.particles(), rec.final_snapshot().particles);

        settings.n_steps = 0;
        assert!(run(&spec, &init, &settings).is_err());
        settings.n_steps = 5;
        settings.checkpoints = vec![9];
        assert!(run(&spec, &init, &settings).is_err());
    }

    #[test]
    fn runs_are_reproducible() {
        let (spec, _) = repulsive_dle(1);
        let init = Initializer::measure(ReferenceMeasure::standard_normal(1));
        let settings = RunSettings {
            n_particles: 20,
            step_size: 1e-3,
            n_steps: 300,
            seed: 8,
            checkpoints: vec![0, 100, 200],
        };
        let a = run(&spec, &init, &settings).unwrap();
        let b = run(&spec, &init, &settings).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.snapshots.len(), 4);
    }

    #[test]
    fn gradient_flow_examples() {
        let dw = DoubleWellLoss;
        let out = gradient_flow(&dw, &[-0.5], 1e-3, 1_000_000, 1e-9).unwrap();
        assert!(out.converged);
        assert!((out.theta[0] + 2.0).abs() < 1e-6);
        let stay = gradient_flow(&dw, &[1.0], 1e-3, 10, 1e-9).unwrap();
        assert!(stay.converged && stay.theta == vec![1.0] && stay.steps == 0);
        let sine = SineLoss::new(1000);
        let out = gradient_flow(&sine, &[0.3], 1e-2, 1_000_000, 1e-9).unwrap();
        assert!(out.converged);
        assert!((out.theta[0] - PI / 2.0).abs() < 1e-6);
        let short = gradient_flow(&dw, &[-0.5], 1e-3, 5, 1e-9).unwrap();
        assert!(!short.converged);
        assert!(gradient_flow(&dw, &[-0.5], 0.0, 5, 1e-9).is_err());
    }
}
