//! Sample-based distances to a reference, calibrated against same-size
//! resamples of the reference itself.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rand::Rng;
use serde::Serialize;

use wgf_core::kernels::{median_heuristic, mmd_squared, SeKernel};
use wgf_core::oracles::{sample_grid_density, wasserstein1_1d, GridDensity};
use wgf_core::rng::{indexed_stream, stream, Purpose};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    W1,
    Mmd,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::W1 => "w1",
            Metric::Mmd => "mmd",
        }
    }
}

/// `min`, `median` and `max` of a set of baseline distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Spread {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Self {
            min: v[0],
            median,
            max: v[n - 1],
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.min <= x && x <= self.max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub metric: Metric,
    pub value: f64,
    pub baseline: Spread,
    pub n_particles: usize,
    pub n_resamples: usize,
}

impl CompareRow {
    pub const HEADER: [&'static str; 7] = [
        "metric",
        "value",
        "baseline_min",
        "baseline_median",
        "baseline_max",
        "n_particles",
        "n_resamples",
    ];

    pub fn fields(&self) -> [String; 7] {
        [
            self.metric.as_str().to_string(),
            format!("{:?}", self.value),
            format!("{:?}", self.baseline.min),
            format!("{:?}", self.baseline.median),
            format!("{:?}", self.baseline.max),
            self.n_particles.to_string(),
            self.n_resamples.to_string(),
        ]
    }
}

/// What the particles are compared with.
#[derive(Debug, Clone)]
pub enum Reference {
    Density(GridDensity),
    Sample(Vec<Vec<f64>>),
}

impl Reference {
    fn draw(&self, count: usize, rng: &mut wgf_core::rng::Stream) -> Vec<Vec<f64>> {
        match self {
            Reference::Density(g) => sample_grid_density(g, count, rng).into_iter().map(|x| vec![x]).collect(),
            Reference::Sample(s) => (0..count).map(|_| s[rng.random_range(0..s.len())].clone()).collect(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            Reference::Density(_) => 1,
            Reference::Sample(s) => s[0].len(),
        }
    }
}

fn distance(metric: Metric, kernel: Option<&SeKernel>, x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64, CliError> {
    match metric {
        Metric::W1 => {
            let a: Vec<f64> = x.iter().map(|p| p[0]).collect();
            let b: Vec<f64> = y.iter().map(|p| p[0]).collect();
            wasserstein1_1d(&a, &b).map_err(CliError::config)
        }
        Metric::Mmd => mmd_squared(kernel.expect("mmd needs a kernel"), x, y).map_err(CliError::config),
    }
}

/// Distance of `particles` to `reference` plus `resamples` reference-vs-
/// reference distances at the same sample size.
///
/// A density reference is sampled once (stream `OracleSampling`) for the value
/// itself; a sample reference is used as is and bootstrapped for the baseline.
pub fn compare(
    particles: &[Vec<f64>],
    reference: &Reference,
    metric: Metric,
    seed: u64,
    resamples: usize,
) -> Result<CompareRow, CliError> {
    let n = particles.len();
    if n == 0 {
        return Err(CliError::Config("no particles to compare".into()));
    }
    if resamples == 0 {
        return Err(CliError::Config("need at least one baseline resample".into()));
    }
    let dim = particles[0].len();
    if particles.iter().any(|p| p.len() != dim) || dim != reference.dim() {
        return Err(CliError::Config(format!(
            "dimension mismatch: particles have {dim}, reference has {}",
            reference.dim()
        )));
    }
    if metric == Metric::W1 && dim != 1 {
        return Err(CliError::Config(format!("w1 is one-dimensional, particles have dimension {dim}")));
    }
    let target = match reference {
        Reference::Density(_) => reference.draw(n, &mut stream(seed, Purpose::OracleSampling)),
        Reference::Sample(s) => s.clone(),
    };
    let kernel = match metric {
        Metric::Mmd => Some(SeKernel::new(median_heuristic(&target).map_err(CliError::config)?).map_err(CliError::config)?),
        Metric::W1 => None,
    };
    let value = distance(metric, kernel.as_ref(), particles, &target)?;
    let mut base = Vec::with_capacity(resamples);
    for r in 0..resamples as u64 {
        let a = reference.draw(n, &mut indexed_stream(seed, Purpose::Baseline, 2 * r));
        let b = reference.draw(n, &mut indexed_stream(seed, Purpose::Baseline, 2 * r + 1));
        base.push(distance(metric, kernel.as_ref(), &a, &b)?);
    }
    Ok(CompareRow {
        metric,
        value,
        baseline: Spread::of(&base),
        n_particles: n,
        n_resamples: resamples,
    })
}

/// Reads a `step, particle_id, theta_0, …` snapshot.
pub fn read_particles_csv(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let mut r = csv::Reader::from_reader(BufReader::new(open(path)?));
    let headers = r.headers()?.clone();
    let cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("theta_"))
        .map(|(i, _)| i)
        .collect();
    if headers.get(0) != Some("step") || headers.get(1) != Some("particle_id") || cols.is_empty() {
        return Err(CliError::Config(format!(
            "{}: expected columns step, particle_id, theta_0, ...",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = cols
            .iter()
            .map(|&c| {
                rec[c].trim().parse::<f64>().map_err(|e| {
                    CliError::Config(format!("{} line {}: {:?}: {e}", path.display(), i + 2, &rec[c]))
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        out.push(row);
    }
    if out.is_empty() {
        return Err(CliError::Config(format!("{}: no particles", path.display())));
    }
    Ok(out)
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))
}

/// A `theta, density` table becomes a density reference; anything else is
/// read as a particle snapshot.
pub fn read_reference(path: &Path) -> Result<Reference, CliError> {
    let mut r = csv::Reader::from_reader(BufReader::new(open(path)?));
    let is_density = r.headers()?.iter().collect::<Vec<_>>() == ["theta", "density"];
    if is_density {
        let g = GridDensity::read_csv(BufReader::new(open(path)?)).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(Reference::Density(g))
    } else {
        Ok(Reference::Sample(read_particles_csv(path)?))
    }
}
