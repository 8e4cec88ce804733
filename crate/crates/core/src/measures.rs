//! Reference measures `P` and initial distributions `Q₀`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::neural::{kaiming_init, MlpShape};
use crate::rng::Stream;

/// A fixed reference measure on ℝᴶ.
///
/// `Flat` is the (improper) Lebesgue reference: `log p ≡ 0` and its kernel
/// mean embedding is constant. `Uniform` only matters for sampling; it
/// contributes no drift anywhere.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceMeasure {
    Gaussian { mean: Vec<f64>, variance: Vec<f64> },
    Flat { dim: usize },
    Uniform { lo: Vec<f64>, hi: Vec<f64> },
}

impl ReferenceMeasure {
    pub fn gaussian(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        check_dim(mean.len(), variance.len())?;
        if mean.is_empty() {
            return Err(Error::Config("gaussian measure needs dimension ≥ 1".into()));
        }
        if variance.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("gaussian variances must be positive".into()));
        }
        Ok(Self::Gaussian { mean, variance })
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::Gaussian {
            mean: vec![0.0; dim],
            variance: vec![1.0; dim],
        }
    }

    pub fn flat(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("flat measure needs dimension ≥ 1".into()));
        }
        Ok(Self::Flat { dim })
    }

    pub fn uniform(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_dim(lo.len(), hi.len())?;
        if lo.is_empty() {
            return Err(Error::Config("uniform measure needs dimension ≥ 1".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::Config("uniform box needs finite lo < hi per coordinate".into()));
        }
        Ok(Self::Uniform { lo, hi })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Gaussian { mean, .. } => mean.len(),
            Self::Flat { dim } => *dim,
            Self::Uniform { lo, .. } => lo.len(),
        }
    }

    pub fn is_flat(&self) -> bool {
        matches!(self, Self::Flat { .. })
    }

    /// `count` i.i.d. draws. The flat measure cannot be sampled.
    pub fn sample(&self, count: usize, rng: &mut Stream) -> Result<Vec<Vec<f64>>> {
        if count == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        match self {
            Self::Flat { .. } => Err(Error::Config(
                "a flat measure cannot be sampled; use a uniform box for initialisation".into(),
            )),
            _ => Ok((0..count).map(|_| self.draw(rng)).collect()),
        }
    }

    fn draw(&self, rng: &mut Stream) -> Vec<f64> {
        match self {
            Self::Gaussian { mean, variance } => mean
                .iter()
                .zip(variance)
                .map(|(m, v)| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + v.sqrt() * z
                })
                .collect(),
            Self::Uniform { lo, hi } => lo.iter().zip(hi).map(|(l, h)| rng.random_range(*l..*h)).collect(),
            Self::Flat { .. } => unreachable!("flat measures are rejected before drawing"),
        }
    }

    /// Unchecked `out += scale · ∇log p(θ)`.
    pub(crate) fn add_grad_log_density(&self, theta: &[f64], scale: f64, out: &mut [f64]) {
        if let Self::Gaussian { mean, variance } = self {
            for (((o, t), m), v) in out.iter_mut().zip(theta).zip(mean).zip(variance) {
                *o -= scale * (t - m) / v;
            }
        }
    }

    /// Normalised log density; `0` for the flat measure and `−∞` outside a
    /// uniform box.
    pub fn log_density(&self, theta: &[f64]) -> Result<f64> {
        check_dim(self.dim(), theta.len())?;
        Ok(match self {
            Self::Gaussian { mean, variance } => theta
                .iter()
                .zip(mean)
                .zip(variance)
                .map(|((t, m), v)| -0.5 * (t - m) * (t - m) / v - 0.5 * (2.0 * PI * v).ln())
                .sum(),
            Self::Flat { .. } => 0.0,
            Self::Uniform { lo, hi } => {
                let inside = theta.iter().zip(lo.iter().zip(hi)).all(|(t, (l, h))| t >= l && t <= h);
                if inside {
                    -lo.iter().zip(hi).map(|(l, h)| (h - l).ln()).sum::<f64>()
                } else {
                    f64::NEG_INFINITY
                }
            }
        })
    }
}

/// `∇log p(θ)`: `−(θ − mean)/variance` for Gaussians, zero otherwise.
pub fn grad_log_density(measure: &ReferenceMeasure, theta: &[f64]) -> Result<Vec<f64>> {
    check_dim(measure.dim(), theta.len())?;
    let mut out = vec![0.0; theta.len()];
    measure.add_grad_log_density(theta, 1.0, &mut out);
    Ok(out)
}

/// Initial distribution `Q₀` of the particles.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Initializer {
    Measure { measure: ReferenceMeasure },
    Dirac { location: Vec<f64> },
    Kaiming { shape: MlpShape },
}

impl Initializer {
    pub fn measure(measure: ReferenceMeasure) -> Self {
        Self::Measure { measure }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Measure { measure } => measure.dim(),
            Self::Dirac { location } => location.len(),
            Self::Kaiming { shape } => shape.n_params(),
        }
    }

    pub fn sample(&self, count: usize, rng: &mut Stream) -> Result<Vec<Vec<f64>>> {
        match self {
            Self::Measure { measure } => measure.sample(count, rng),
            _ if count == 0 => Err(Error::Config("sample count must be at least 1".into())),
            Self::Dirac { location } => Ok(vec![location.clone(); count]),
            Self::Kaiming { shape } => Ok((0..count).map(|_| kaiming_init(shape, rng)).collect()),
        }
    }

    /// CDF of a one-dimensional initializer, where it has a closed form.
    pub fn cdf_1d(&self, x: f64) -> Option<f64> {
        match self {
            Self::Measure {
                measure: ReferenceMeasure::Gaussian { mean, variance },
            } if mean.len() == 1 => Some(0.5 * libm::erfc((mean[0] - x) / (2.0 * variance[0]).sqrt())),
            Self::Measure {
                measure: ReferenceMeasure::Uniform { lo, hi },
            } if lo.len() == 1 => Some(((x - lo[0]) / (hi[0] - lo[0])).clamp(0.0, 1.0)),
            Self::Dirac { location } if location.len() == 1 => Some(if x >= location[0] { 1.0 } else { 0.0 }),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn gaussian_sample_moments() {
        let m = ReferenceMeasure::standard_normal(1);
        let xs = m.sample(100_000, &mut stream(1, Purpose::Init)).unwrap();
        let n = xs.len() as f64;
        let mean = xs.iter().map(|x| x[0]).sum::<f64>() / n;
        let var = xs.iter().map(|x| (x[0] - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn uniform_samples_stay_in_box() {
        let half = 1000.0 * PI;
        let m = ReferenceMeasure::uniform(vec![-half], vec![half]).unwrap();
        let xs = m.sample(10_000, &mut stream(2, Purpose::Init)).unwrap();
        assert!(xs.iter().all(|x| x[0] >= -half && x[0] < half));
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = ReferenceMeasure::gaussian(vec![1.0, -2.0], vec![0.5, 3.0]).unwrap();
        let a = m.sample(50, &mut stream(9, Purpose::Init)).unwrap();
        let b = m.sample(50, &mut stream(9, Purpose::Init)).unwrap();
        let bits = |v: &Vec<Vec<f64>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn flat_measure_cannot_be_sampled() {
        let err = ReferenceMeasure::flat(2).unwrap().sample(3, &mut stream(0, Purpose::Init));
        assert!(matches!(err, Err(Error::Config(msg)) if msg.contains("uniform")));
        assert!(ReferenceMeasure::standard_normal(1).sample(0, &mut stream(0, Purpose::Init)).is_err());
    }

    #[test]
    fn grad_log_density_examples() {
        let n = ReferenceMeasure::standard_normal(1);
        assert_eq!(grad_log_density(&n, &[2.0]).unwrap(), vec![-2.0]);
        let flat = ReferenceMeasure::flat(3).unwrap();
        assert_eq!(grad_log_density(&flat, &[1.0, -4.0, 9.0]).unwrap(), vec![0.0; 3]);
        let g = ReferenceMeasure::gaussian(vec![1.0], vec![4.0]).unwrap();
        assert_eq!(grad_log_density(&g, &[1.0]).unwrap(), vec![0.0]);
        let u = ReferenceMeasure::uniform(vec![-1.0], vec![1.0]).unwrap();
        assert_eq!(grad_log_density(&u, &[5.0]).unwrap(), vec![0.0]);
        assert!(grad_log_density(&n, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn gaussian_grad_log_density_matches_finite_differences() {
        let g = ReferenceMeasure::gaussian(vec![0.5, -1.0], vec![2.0, 0.3]).unwrap();
        let h = 1e-5;
        for theta in [[0.1, 0.2], [-2.0, 1.5], [3.0, -0.7]] {
            let analytic = grad_log_density(&g, &theta).unwrap();
            for i in 0..2 {
                let mut up = theta;
                let mut down = theta;
                up[i] += h;
                down[i] -= h;
                let fd = (g.log_density(&up).unwrap() - g.log_density(&down).unwrap()) / (2.0 * h);
                assert!((fd - analytic[i]).abs() / analytic[i].abs() < 1e-8);
            }
        }
    }

    #[test]
    fn initializer_cdfs() {
        let n = Initializer::measure(ReferenceMeasure::gaussian(vec![1.0], vec![1.0]).unwrap());
        assert!((n.cdf_1d(1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((1.0 - n.cdf_1d(0.0).unwrap() - 0.841344746).abs() < 1e-8);
        let d = Initializer::Dirac { location: vec![-0.5] };
        assert_eq!(d.cdf_1d(0.0), Some(1.0));
        assert_eq!(d.cdf_1d(-1.0), Some(0.0));
        assert_eq!(d.sample(3, &mut stream(0, Purpose::Init)).unwrap(), vec![vec![-0.5]; 3]);
    }
}
