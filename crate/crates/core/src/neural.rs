//! One-hidden-layer ReLU network with a hand-written backward pass, Kaiming
//! initialisation, CSV datasets and the ensemble Gaussian NLL.
//!
//! Flat parameter layout (layer-major): `W₁` row-major (`hidden × input_dim`),
//! then `b₁` (`hidden`), then `w₂` (`hidden`), then `b₂` (1).

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::rng::Stream;

/// Floor added to the ensemble variance in [`ensemble_nll`].
pub const NLL_VARIANCE_FLOOR: f64 = 1e-6;

/// Divisor floor for standardisation of (near-)constant columns.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MlpShape {
    pub input_dim: usize,
    pub hidden: usize,
}

impl MlpShape {
    pub fn new(input_dim: usize, hidden: usize) -> Self {
        Self { input_dim, hidden }
    }

    pub fn n_params(&self) -> usize {
        self.hidden * self.input_dim + 2 * self.hidden + 1
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let w1 = self.hidden * self.input_dim;
        (w1, w1 + self.hidden, w1 + 2 * self.hidden)
    }

    /// `w₂ᵀ relu(W₁x + b₁) + b₂`; lengths are assumed correct.
    pub fn forward(&self, theta: &[f64], x: &[f64]) -> f64 {
        let d = self.input_dim;
        let (b1_at, w2_at, b2_at) = self.offsets();
        let mut out = theta[b2_at];
        for h in 0..self.hidden {
            let row = &theta[h * d..(h + 1) * d];
            let z = theta[b1_at + h] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
            if z > 0.0 {
                out += theta[w2_at + h] * z;
            }
        }
        out
    }
}

/// Parameters split by layer; see the module docs for the flat order.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl MlpParams {
    pub fn unflatten(shape: &MlpShape, theta: &[f64]) -> Result<Self> {
        check_dim(shape.n_params(), theta.len())?;
        let (b1_at, w2_at, b2_at) = shape.offsets();
        Ok(Self {
            w1: theta[..b1_at].to_vec(),
            b1: theta[b1_at..w2_at].to_vec(),
            w2: theta[w2_at..b2_at].to_vec(),
            b2: theta[b2_at],
        })
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.w1.len() + 2 * self.b1.len() + 1);
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.push(self.b2);
        out
    }
}

pub fn mlp_forward(shape: &MlpShape, theta: &[f64], x: &[f64]) -> Result<f64> {
    check_dim(shape.n_params(), theta.len())?;
    check_dim(shape.input_dim, x.len())?;
    Ok(shape.forward(theta, x))
}

/// Gradient of the mean squared error over `data`.
pub fn mlp_backward(shape: &MlpShape, theta: &[f64], data: &DataSplit) -> Result<Vec<f64>> {
    check_dim(shape.n_params(), theta.len())?;
    check_dim(shape.input_dim, data.dim())?;
    if data.is_empty() {
        return Err(Error::EmptyInput("dataset slice"));
    }
    let mut grad = vec![0.0; theta.len()];
    mse_and_grad(shape, theta, data, &mut grad);
    Ok(grad)
}

/// Writes the MSE gradient into `grad` and returns the MSE.
pub(crate) fn mse_and_grad(shape: &MlpShape, theta: &[f64], data: &DataSplit, grad: &mut [f64]) -> f64 {
    let d = shape.input_dim;
    let (b1_at, w2_at, b2_at) = shape.offsets();
    let n = data.len() as f64;
    grad.fill(0.0);
    let mut pre = vec![0.0; shape.hidden];
    let mut total = 0.0;
    for (x, y) in data.iter() {
        let mut out = theta[b2_at];
        for (h, z) in pre.iter_mut().enumerate() {
            let row = &theta[h * d..(h + 1) * d];
            *z = theta[b1_at + h] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
            if *z > 0.0 {
                out += theta[w2_at + h] * *z;
            }
        }
        let r = out - y;
        total += r * r;
        let g = 2.0 * r / n;
        grad[b2_at] += g;
        for (h, &z) in pre.iter().enumerate() {
            // ReLU subgradient at 0 is 0.
            if z > 0.0 {
                grad[w2_at + h] += g * z;
                let delta = g * theta[w2_at + h];
                grad[b1_at + h] += delta;
                for (gw, xi) in grad[h * d..(h + 1) * d].iter_mut().zip(x) {
                    *gw += delta * xi;
                }
            }
        }
    }
    total / n
}

/// Kaiming initialisation: every weight and bias of layer `l` is drawn from
/// `N(0, 2/n_l)` where `n_l` is that layer's output width (`hidden` for the
/// first layer, 1 for the output layer).
pub fn kaiming_init(shape: &MlpShape, rng: &mut Stream) -> Vec<f64> {
    let (_, w2_at, _) = shape.offsets();
    let hidden_sd = (2.0 / shape.hidden as f64).sqrt();
    let out_sd = 2.0f64.sqrt();
    (0..shape.n_params())
        .map(|i| {
            let z: f64 = StandardNormal.sample(rng);
            if i < w2_at {
                hidden_sd * z
            } else {
                out_sd * z
            }
        })
        .collect()
}

/// Average Gaussian NLL of an ensemble's predictive distribution.
///
/// `predictions[t]` holds the members' predictions for test point `t`. Each
/// point gets `N(mean, var + floor)` with the population variance of the
/// members.
pub fn ensemble_nll(predictions: &[Vec<f64>], targets: &[f64]) -> Result<f64> {
    check_dim(predictions.len(), targets.len())?;
    if targets.is_empty() {
        return Err(Error::EmptyInput("test targets"));
    }
    let mut total = 0.0;
    for (members, &y) in predictions.iter().zip(targets) {
        if members.len() < 2 {
            return Err(Error::Config(format!(
                "ensemble variance needs at least 2 members, got {}",
                members.len()
            )));
        }
        let m = members.len() as f64;
        let mean = members.iter().sum::<f64>() / m;
        let var = members.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / m + NLL_VARIANCE_FLOOR;
        total += 0.5 * (2.0 * PI * var).ln() + (y - mean).powi(2) / (2.0 * var);
    }
    Ok(total / targets.len() as f64)
}

/// Row-major inputs with one target per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    dim: usize,
}

impl DataSplit {
    pub fn new(inputs: Vec<f64>, targets: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        check_dim(targets.len() * dim, inputs.len())?;
        Ok(Self { inputs, targets, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.inputs.chunks_exact(self.dim).zip(self.targets.iter().copied())
    }

    /// Rows `idx` as a new split.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut inputs = Vec::with_capacity(idx.len() * self.dim);
        let mut targets = Vec::with_capacity(idx.len());
        for &i in idx {
            inputs.extend_from_slice(self.input(i));
            targets.push(self.targets[i]);
        }
        Self {
            inputs,
            targets,
            dim: self.dim,
        }
    }
}

/// Per-feature affine standardisation fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &DataSplit) -> Self {
        let n = data.len() as f64;
        let mut mean = vec![0.0; data.dim()];
        for (x, _) in data.iter() {
            for (m, xi) in mean.iter_mut().zip(x) {
                *m += xi;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; data.dim()];
        for (x, _) in data.iter() {
            for ((v, xi), m) in var.iter_mut().zip(x).zip(&mean) {
                *v += (xi - m).powi(2);
            }
        }
        let scale = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Self { mean, scale }
    }

    pub fn apply(&self, data: &DataSplit) -> DataSplit {
        let mut inputs = data.inputs.clone();
        for row in inputs.chunks_exact_mut(data.dim) {
            for ((xi, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *xi = (*xi - m) / s;
            }
        }
        DataSplit {
            inputs,
            targets: data.targets.clone(),
            dim: data.dim,
        }
    }
}

/// Train/validation/test splits with features standardised by train
/// statistics.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: DataSplit,
    pub val: DataSplit,
    pub test: DataSplit,
    pub feature_names: Vec<String>,
    pub standardizer: Standardizer,
}

/// Split sizes `(train, val, test)` for the 81/9/10 protocol.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (0.81 * n as f64).round() as usize;
    let val = ((0.09 * n as f64).round() as usize).min(n - train);
    (train, val, n - train - val)
}

impl Dataset {
    /// Shuffles rows with `rng`, splits 81/9/10 and standardises.
    pub fn split(all: &DataSplit, feature_names: Vec<String>, rng: &mut Stream) -> Result<Self> {
        let n = all.len();
        let (n_train, n_val, _) = split_sizes(n);
        if n_train == 0 {
            return Err(Error::EmptyInput("training split"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let train_raw = all.select(&order[..n_train]);
        let val_raw = all.select(&order[n_train..n_train + n_val]);
        let test_raw = all.select(&order[n_train + n_val..]);
        let standardizer = Standardizer::fit(&train_raw);
        Ok(Self {
            train: standardizer.apply(&train_raw),
            val: standardizer.apply(&val_raw),
            test: standardizer.apply(&test_raw),
            feature_names,
            standardizer,
        })
    }
}

/// A numeric CSV table with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(csv_error)?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(csv_error)?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(csv_error)?;
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != headers.len() {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {} fields, found {}", headers.len(), record.len()),
                });
            }
            let row = record
                .iter()
                .enumerate()
                .map(|(col, cell)| {
                    cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                        line,
                        message: format!("non-numeric value {cell:?} in column {:?}", headers[col]),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Ok(Self { headers, rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(csv_error)?;
        writer.write_record(&self.headers).map_err(csv_error)?;
        for row in &self.rows {
            writer
                .write_record(row.iter().map(|v| format!("{v:?}")))
                .map_err(csv_error)?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Splits the table into features and the named target column.
    pub fn to_split(&self, target: &str) -> Result<(DataSplit, Vec<String>)> {
        let t = self
            .headers
            .iter()
            .position(|h| h == target)
            .ok_or_else(|| Error::Config(format!("target column {target:?} not found")))?;
        if self.headers.len() < 2 {
            return Err(Error::Config("dataset needs at least one feature column".into()));
        }
        let names = self
            .headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != t)
            .map(|(_, h)| h.clone())
            .collect();
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for row in &self.rows {
            for (i, v) in row.iter().enumerate() {
                if i == t {
                    targets.push(*v);
                } else {
                    inputs.push(*v);
                }
            }
        }
        Ok((DataSplit::new(inputs, targets, self.headers.len() - 1)?, names))
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            line,
            message: format!("{kind:?}"),
        },
    }
}

/// Reads a CSV, shuffles with `split_seed`, splits 81/9/10 and standardises.
pub fn load_csv_dataset(path: &Path, target: &str, split_seed: u64) -> Result<Dataset> {
    let table = Table::read(path)?;
    let (all, names) = table.to_split(target)?;
    let mut rng = crate::rng::stream(split_seed, crate::rng::Purpose::DataSplit);
    Dataset::split(&all, names, &mut rng)
}

/// `y = xᵀw + b + noise·ε` with `x ~ N(0, I)`; weights drawn from the same
/// stream. Columns `x0..x{d-1}, y`.
pub fn synthetic_linear_gaussian(n: usize, d: usize, noise: f64, rng: &mut Stream) -> Result<Table> {
    if d == 0 || n == 0 {
        return Err(Error::Config("synthetic dataset needs n ≥ 1 and d ≥ 1".into()));
    }
    let noise_dist = Normal::new(0.0, noise).map_err(|e| Error::Config(e.to_string()))?;
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b: f64 = rng.random_range(-1.0..1.0);
    let rows = (0..n)
        .map(|_| {
            let mut row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let y = row.iter().zip(&w).map(|(x, wi)| x * wi).sum::<f64>() + b + noise_dist.sample(rng);
            row.push(y);
            row
        })
        .collect();
    let mut headers: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    headers.push("y".into());
    Ok(Table { headers, rows })
}
