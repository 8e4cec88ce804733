//! One-dimensional reference solutions: the DE limit, the Gibbs density, the
//! DRLE stationary density and the Wasserstein-1 diagnostic.

use std::io::{Read, Write};

use rand::Rng;
use serde::Serialize;

use crate::dynamics::{gradient_flow, Method, MethodSpec};
use crate::error::{check_dim, Error, Result};
use crate::losses::LossModel;
use crate::measures::{Initializer, ReferenceMeasure};
use crate::neural::csv_error;
use crate::rng::Stream;

/// Boundary nodes must sit below this fraction of the peak density.
pub const BOUNDARY_RATIO_LIMIT: f64 = 1e-10;

/// Uniform grid `lo = x₀ < … < x_{n−1} = hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub n_points: usize,
}

impl GridSpec {
    pub fn new(lo: f64, hi: f64, n_points: usize) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("grid needs finite lo < hi, got [{lo}, {hi}]")));
        }
        if n_points < 3 {
            return Err(Error::Config(format!("grid needs at least 3 nodes, got {n_points}")));
        }
        Ok(Self { lo, hi, n_points })
    }

    /// `[−6, 6]` with 2001 nodes.
    pub fn double_well() -> Self {
        Self {
            lo: -6.0,
            hi: 6.0,
            n_points: 2001,
        }
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.n_points - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.n_points {
            self.hi
        } else {
            self.lo + i as f64 * self.spacing()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.node(i)).collect()
    }
}

fn trapezoid(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    h * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1]))
}

/// A normalised density tabulated on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridDensity {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    /// `log Z` of the unnormalised values the density was built from.
    pub log_normalizer: f64,
}

impl GridDensity {
    /// Normalises `exp(log_q)` by the trapezoid rule and checks boundary mass.
    pub fn from_log_values(grid: GridSpec, log_q: &[f64]) -> Result<Self> {
        check_dim(grid.n_points, log_q.len())?;
        let peak = log_q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !peak.is_finite() {
            return Err(Error::Config("density is zero or non-finite on the whole grid".into()));
        }
        let mut values: Vec<f64> = log_q.iter().map(|l| (l - peak).exp()).collect();
        let z = trapezoid(&values, grid.spacing());
        values.iter_mut().for_each(|v| *v /= z);
        let density = Self {
            grid,
            values,
            log_normalizer: z.ln() + peak,
        };
        density.check_boundary()?;
        Ok(density)
    }

    fn check_boundary(&self) -> Result<()> {
        let peak = self.values.iter().cloned().fold(0.0, f64::max);
        let edge = self.values[0].max(self.values[self.values.len() - 1]);
        let ratio = edge / peak;
        if !(ratio < BOUNDARY_RATIO_LIMIT) {
            return Err(Error::GridTooSmall {
                ratio,
                limit: BOUNDARY_RATIO_LIMIT,
            });
        }
        Ok(())
    }

    pub fn nodes(&self) -> Vec<f64> {
        self.grid.nodes()
    }

    pub fn integral(&self) -> f64 {
        trapezoid(&self.values, self.grid.spacing())
    }

    /// Trapezoid `∫ f(θ) q(θ) dθ`.
    pub fn expectation(&self, f: impl Fn(f64) -> f64) -> f64 {
        let fq: Vec<f64> = self.nodes().into_iter().zip(&self.values).map(|(x, q)| f(x) * q).collect();
        trapezoid(&fq, self.grid.spacing())
    }

    /// Cumulative trapezoid integral at each node.
    pub fn cdf(&self) -> Vec<f64> {
        let h = self.grid.spacing();
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.values.len());
        out.push(0.0);
        for w in self.values.windows(2) {
            acc += 0.5 * h * (w[0] + w[1]);
            out.push(acc);
        }
        out
    }

    /// Columns `theta, density`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["theta", "density"]).map_err(csv_error)?;
        for (x, q) in self.nodes().iter().zip(&self.values) {
            w.write_record([format!("{x:?}"), format!("{q:?}")]).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a `theta, density` table on a uniform grid and renormalises it.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers().map_err(csv_error)?.clone();
        if headers.iter().collect::<Vec<_>>() != ["theta", "density"] {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header theta,density, got {:?}", headers.iter().collect::<Vec<_>>()),
            });
        }
        let mut xs = Vec::new();
        let mut qs = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let line = i as u64 + 2;
            let rec = rec.map_err(csv_error)?;
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    message: format!("{s:?}: {e}"),
                })
            };
            xs.push(parse(&rec[0])?);
            let q = parse(&rec[1])?;
            if !(q >= 0.0) || !q.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("density must be finite and non-negative, got {q}"),
                });
            }
            qs.push(q);
        }
        let grid = GridSpec::new(
            *xs.first().ok_or(Error::EmptyInput("density table"))?,
            *xs.last().unwrap(),
            xs.len(),
        )?;
        let h = grid.spacing();
        if let Some(i) = xs.iter().enumerate().position(|(i, x)| (x - grid.node(i)).abs() > 1e-9 * (1.0 + h)) {
            return Err(Error::Parse {
                line: i as u64 + 2,
                message: "theta column is not a uniform grid".into(),
            });
        }
        let z = trapezoid(&qs, h);
        if !(z > 0.0) {
            return Err(Error::Config("density table integrates to zero".into()));
        }
        Ok(Self {
            grid,
            values: qs.iter().map(|q| q / z).collect(),
            log_normalizer: z.ln(),
        })
    }
}

fn require_1d(dim: usize) -> Result<()> {
    if dim != 1 {
        return Err(Error::Config(format!("oracles are one-dimensional, got dimension {dim}")));
    }
    Ok(())
}

fn log_prior(prior: &ReferenceMeasure, theta: f64) -> Result<f64> {
    prior.log_density(&[theta])
}

/// `q*(θ) ∝ exp(−ℓ(θ)/λ)·p(θ)` on `grid`.
pub fn gibbs_density(loss: &dyn LossModel, prior: &ReferenceMeasure, lambda: f64, grid: GridSpec) -> Result<GridDensity> {
    require_1d(loss.dim())?;
    check_dim(1, prior.dim())?;
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    let log_q = grid
        .nodes()
        .into_iter()
        .map(|x| Ok(-loss.value(&[x]) / lambda + log_prior(prior, x)?))
        .collect::<Result<Vec<f64>>>()?;
    GridDensity::from_log_values(grid, &log_q)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Atom {
    pub location: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitDistribution {
    pub atoms: Vec<Atom>,
    /// Fraction of Monte Carlo draws whose flow did not converge.
    pub nonconverged_fraction: f64,
}

impl LimitDistribution {
    pub fn weight_at(&self, location: f64) -> Option<f64> {
        self.atoms.iter().find(|a| a.location[0] == location).map(|a| a.weight)
    }
}

/// How basins of attraction are measured.
#[derive(Debug, Clone, PartialEq)]
pub enum BasinRule {
    /// Exact basin boundaries between consecutive sorted atoms; requires a
    /// closed-form initial CDF.
    Boundaries(Vec<f64>),
    /// Draw from `Q₀`, follow the gradient flow, assign to the nearest atom.
    MonteCarlo {
        samples: usize,
        flow_step: f64,
        max_steps: u64,
        tolerance: f64,
    },
}

/// Largest tolerated fraction of non-converged flows.
pub const MAX_NONCONVERGED_FRACTION: f64 = 1e-3;

/// `Σᵢ Q₀(Θᵢ) δ_{mᵢ}` for a 1-D loss with known minima.
pub fn de_limit(
    loss: &dyn LossModel,
    init: &Initializer,
    atoms: &[f64],
    rule: &BasinRule,
    rng: &mut Stream,
) -> Result<LimitDistribution> {
    require_1d(loss.dim())?;
    check_dim(1, init.dim())?;
    if atoms.is_empty() {
        return Err(Error::EmptyInput("atoms"));
    }
    let mut sorted = atoms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (weights, nonconverged_fraction) = match rule {
        BasinRule::Boundaries(bounds) => {
            check_dim(sorted.len() - 1, bounds.len())?;
            for (i, b) in bounds.iter().enumerate() {
                if !(sorted[i] < *b && *b < sorted[i + 1]) {
                    return Err(Error::Config(format!("boundary {b} does not separate atoms {} and {}", sorted[i], sorted[i + 1])));
                }
            }
            let cdf = |x: f64| {
                init.cdf_1d(x)
                    .ok_or_else(|| Error::Config("exact basins need a closed-form initial CDF".into()))
            };
            let mut edges = vec![0.0];
            for b in bounds {
                edges.push(cdf(*b)?);
            }
            edges.push(1.0);
            (edges.windows(2).map(|w| w[1] - w[0]).collect::<Vec<_>>(), 0.0)
        }
        BasinRule::MonteCarlo {
            samples,
            flow_step,
            max_steps,
            tolerance,
        } => {
            let draws = init.sample(*samples, rng)?;
            let mut counts = vec![0usize; sorted.len()];
            let mut lost = 0usize;
            for d in &draws {
                let out = gradient_flow(loss, d, *flow_step, *max_steps, *tolerance)?;
                if !out.converged {
                    lost += 1;
                    continue;
                }
                let x = out.theta[0];
                let nearest = (0..sorted.len())
                    .min_by(|&a, &b| (sorted[a] - x).abs().total_cmp(&(sorted[b] - x).abs()))
                    .unwrap();
                counts[nearest] += 1;
            }
            let frac = lost as f64 / *samples as f64;
            if frac > MAX_NONCONVERGED_FRACTION {
                return Err(Error::NonConvergence {
                    iterations: *max_steps as usize,
                    residual: frac,
                });
            }
            let kept = (*samples - lost) as f64;
            (counts.iter().map(|&c| c as f64 / kept).collect(), frac)
        }
    };
    Ok(LimitDistribution {
        atoms: sorted
            .iter()
            .zip(weights)
            .map(|(&m, w)| Atom {
                location: vec![m],
                weight: w,
            })
            .collect(),
        nonconverged_fraction,
    })
}

/// Damped Picard iteration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PicardSettings {
    pub damping: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PicardSettings {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tolerance: 1e-8,
            max_iterations: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationarySolution {
    pub density: GridDensity,
    pub iterations: usize,
    /// `sup |T(q) − q|` of the undamped map at the returned density.
    pub residual: f64,
}

/// Stationary density of the DRLE mean-field limit,
///
/// ```text
/// u'(θ) = −V'(θ)/λ₂ − (λ₁/λ₂) ∫ ∇₁κ(θ, θ') q(θ') dθ',   q ∝ exp(u).
/// ```
///
/// Integrating from the grid midpoint with `u(mid) = 0` is done in closed
/// form in `θ`: `∫_mid^θ ∇₁κ(s, θ') ds = κ(θ, θ') − κ(mid, θ')`, and
/// `V(θ) − V(mid)` replaces `∫ V'`. Only the `θ'` integral uses quadrature.
pub fn drle_stationary(spec: &MethodSpec, grid: GridSpec, settings: PicardSettings) -> Result<StationarySolution> {
    require_1d(spec.dim())?;
    let l2 = spec.lambda2();
    if !(l2 > 0.0) {
        return Err(Error::Config("the stationary density needs lambda2 > 0".into()));
    }
    if !(settings.damping > 0.0 && settings.damping <= 1.0) {
        return Err(Error::Config(format!("damping must lie in (0, 1], got {}", settings.damping)));
    }
    let n = grid.n_points;
    let h = grid.spacing();
    let nodes = grid.nodes();
    let mid = n / 2;
    let v_mid = spec.potential(&[nodes[mid]])?;
    let base: Vec<f64> = nodes
        .iter()
        .map(|&x| Ok(-(spec.potential(&[x])? - v_mid) / l2))
        .collect::<Result<_>>()?;

    let interaction = match (spec.method(), spec.kernel()) {
        (Method::Drle, Some(k)) => {
            // κ(xᵢ, xⱼ) depends on i − j only.
            let s2 = k.lengthscale() * k.lengthscale();
            let toeplitz: Vec<f64> = (0..n).map(|d| (-0.5 * (d as f64 * h).powi(2) / s2).exp()).collect();
            Some((spec.lambda1() / l2, toeplitz))
        }
        _ => None,
    };

    let picard = |q: &[f64]| -> Result<GridDensity> {
        let mut u = base.clone();
        if let Some((ratio, toe)) = &interaction {
            // w_j q_j with trapezoid weights.
            let mut wq: Vec<f64> = q.iter().map(|v| v * h).collect();
            wq[0] *= 0.5;
            wq[n - 1] *= 0.5;
            let smooth = |i: usize| -> f64 {
                let mut acc = 0.0;
                for (j, w) in wq.iter().enumerate() {
                    acc += toe[i.abs_diff(j)] * w;
                }
                acc
            };
            let at_mid = smooth(mid);
            for (i, ui) in u.iter_mut().enumerate() {
                *ui -= ratio * (smooth(i) - at_mid);
            }
        }
        GridDensity::from_log_values(grid, &u)
    };

    let sup = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);

    let mut q = GridDensity::from_log_values(grid, &base)?;
    if interaction.is_none() {
        let next = picard(&q.values)?;
        let residual = sup(&next.values, &q.values);
        return Ok(StationarySolution {
            density: q,
            iterations: 0,
            residual,
        });
    }
    let alpha = settings.damping;
    let mut change = f64::INFINITY;
    for it in 1..=settings.max_iterations {
        let cand = picard(&q.values)?;
        let mut blended: Vec<f64> = q.values.iter().zip(&cand.values).map(|(o, c)| (1.0 - alpha) * o + alpha * c).collect();
        let z = trapezoid(&blended, h);
        blended.iter_mut().for_each(|v| *v /= z);
        change = sup(&blended, &q.values);
        q = GridDensity {
            grid,
            values: blended,
            log_normalizer: cand.log_normalizer,
        };
        if change < settings.tolerance {
            let check = picard(&q.values)?;
            let residual = sup(&check.values, &q.values);
            q.log_normalizer = check.log_normalizer;
            q.check_boundary()?;
            return Ok(StationarySolution {
                density: q,
                iterations: it,
                residual,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: settings.max_iterations,
        residual: change,
    })
}

/// Inverse-CDF draws using the trapezoid CDF, linear within each cell.
pub fn sample_grid_density(density: &GridDensity, count: usize, rng: &mut Stream) -> Vec<f64> {
    let cdf = density.cdf();
    let total = *cdf.last().unwrap();
    let h = density.grid.spacing();
    (0..count)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            // First node whose CDF exceeds u; the cell is [i − 1, i].
            let i = cdf.partition_point(|c| *c <= u).clamp(1, cdf.len() - 1);
            let (c0, c1) = (cdf[i - 1], cdf[i]);
            let frac = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
            density.grid.node(i - 1) + h * frac
        })
        .collect()
}

/// `∫ |F_X(t) − F_Y(t)| dt` for the empirical CDFs of `x` and `y`; for equal
/// sizes this is the mean absolute difference of the sorted samples.
pub fn wasserstein1_1d(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyInput("wasserstein1_1d sample"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Config("wasserstein1_1d needs finite samples".into()));
    }
    let mut a = x.to_vec();
    let mut b = y.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let t = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (t - prev);
        while i < a.len() && a[i] == t {
            i += 1;
        }
        while j < b.len() && b[j] == t {
            j += 1;
        }
        prev = t;
    }
    Ok(total)
}

/// Finite-particle DRE energy
/// `L̃ = (1/N) Σₙ V(θₙ) + λ₁/(2N²) Σₙ Σₘ κ(θₙ, θₘ)`, whose gradient in `θₙ` is
/// the `n`-th drift divided by `N`.
pub fn dre_energy(spec: &MethodSpec, particles: &[Vec<f64>]) -> Result<f64> {
    if particles.is_empty() {
        return Err(Error::EmptyInput("particles"));
    }
    let n = particles.len() as f64;
    let mut v = 0.0;
    for p in particles {
        v += spec.potential(p)?;
    }
    let mut pair = 0.0;
    if let Some(k) = spec.kernel() {
        for a in particles {
            for b in particles {
                pair += k.value(a, b);
            }
        }
    }
    Ok(v / n + spec.lambda1() / (2.0 * n * n) * pair)
}
