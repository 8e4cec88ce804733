//! JSON run configuration. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    GlobalMinimiser,
    Multimodal,
    SineModes,
    Regression,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodName {
    De,
    Dle,
    Drle,
    Dre,
    Fdgvi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossConfig {
    DoubleWell {},
    Mixture2d {},
    Sine {
        #[serde(default = "default_half_width")]
        half_width: u32,
    },
    Quadratic {
        dim: usize,
    },
    Zero {
        dim: usize,
    },
    #[serde(rename = "mlp_regression")]
    Regression {
        #[serde(default = "default_hidden")]
        hidden: usize,
    },
}

fn default_half_width() -> u32 {
    1000
}

fn default_hidden() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureConfig {
    Gaussian {
        mean: Vec<f64>,
        variance: Vec<f64>,
    },
    /// `N(0, I)`; the dimension defaults to the loss dimension.
    StandardNormal {
        #[serde(default)]
        dim: Option<usize>,
    },
    Flat {
        #[serde(default)]
        dim: Option<usize>,
    },
    Uniform {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitConfig {
    /// Same as the prior.
    Prior {},
    Gaussian { mean: Vec<f64>, variance: Vec<f64> },
    StandardNormal {
        #[serde(default)]
        dim: Option<usize>,
    },
    Uniform { lo: Vec<f64>, hi: Vec<f64> },
    Dirac { location: Vec<f64> },
    /// Kaiming normal draws for the regression network.
    Kaiming {},
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthscaleRule {
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Lengthscale {
    Fixed(f64),
    Rule(LengthscaleRule),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub lengthscale: Lengthscale,
    /// Draws from the prior (or the initialiser, for flat priors) fed to the
    /// median heuristic.
    #[serde(default = "default_heuristic_samples")]
    pub heuristic_samples: usize,
}

fn default_heuristic_samples() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    #[serde(default = "default_anchors")]
    pub anchors: usize,
}

fn default_anchors() -> usize {
    20
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self { anchors: default_anchors() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// DE limit, Gibbs or DRLE stationary density according to the method.
    Auto,
    None,
    DeLimit,
    Gibbs,
    DrleStationary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardConfig {
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
}

fn default_damping() -> f64 {
    0.5
}

fn default_tolerance() -> f64 {
    1e-8
}

fn default_max_iterations() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "default_oracle_kind")]
    pub kind: OracleKind,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub picard: Option<PicardConfig>,
    /// Oracle sample size for the W1 metric; defaults to the particle count.
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default = "default_resamples")]
    pub baseline_resamples: usize,
    /// Basin boundaries for an exact DE limit (between sorted atoms).
    #[serde(default)]
    pub basin_boundaries: Option<Vec<f64>>,
}

fn default_oracle_kind() -> OracleKind {
    OracleKind::Auto
}

pub(crate) fn default_resamples() -> usize {
    20
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            kind: OracleKind::Auto,
            grid: None,
            picard: None,
            samples: None,
            baseline_resamples: default_resamples(),
            basin_boundaries: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KlConfig {
    Flat {},
    /// Closed-form KL to the (Gaussian) prior.
    Prior {},
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawModeConfig {
    Fresh,
    Common,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdgviConfig {
    pub lambda: f64,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default = "default_kl")]
    pub kl: KlConfig,
    #[serde(default = "default_draws")]
    pub draws: DrawModeConfig,
    #[serde(default)]
    pub mu0: Option<Vec<f64>>,
    #[serde(default)]
    pub beta0: Option<Vec<f64>>,
}

fn default_mc_samples() -> usize {
    200
}

fn default_lr() -> f64 {
    0.01
}

fn default_iters() -> usize {
    5000
}

fn default_kl() -> KlConfig {
    KlConfig::Flat {}
}

fn default_draws() -> DrawModeConfig {
    DrawModeConfig::Fresh
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// `y = wᵀx + b + ε` with standard-normal features.
    Synthetic { n: usize, dim: usize, noise: f64 },
    Csv { path: PathBuf, target: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub method: MethodName,
    pub loss: LossConfig,
    pub prior: MeasureConfig,
    #[serde(default = "default_init")]
    pub init: InitConfig,
    #[serde(default)]
    pub kernel: Option<KernelConfig>,
    #[serde(default)]
    pub embedding: Option<EmbeddingConfig>,
    #[serde(default)]
    pub lambda1: f64,
    #[serde(default)]
    pub lambda2: f64,
    #[serde(default)]
    pub n_particles: Option<usize>,
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub n_steps: Option<u64>,
    #[serde(default)]
    pub checkpoints: Vec<u64>,
    #[serde(default)]
    pub oracle: Option<OracleConfig>,
    #[serde(default)]
    pub fdgvi: Option<FdgviConfig>,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    /// Seed of the train/validation/test shuffle; defaults to `seed`.
    #[serde(default)]
    pub split_seed: Option<u64>,
}

fn default_init() -> InitConfig {
    InitConfig::Prior {}
}

impl ExperimentConfig {
    pub fn from_value(value: Value) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_value(value).map_err(CliError::config)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }

    /// Cross-field checks that the type system does not express.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        match self.method {
            MethodName::Fdgvi => {
                let Some(f) = &self.fdgvi else {
                    return bad("method fdgvi needs an fdgvi block".into());
                };
                if !(f.lambda >= 0.0) || !(f.lr > 0.0) || f.mc_samples == 0 {
                    return bad("fdgvi needs lambda >= 0, lr > 0 and mc_samples >= 1".into());
                }
            }
            _ => {
                if self.fdgvi.is_some() {
                    return bad("the fdgvi block only applies to method fdgvi".into());
                }
                match (self.n_particles, self.step_size, self.n_steps) {
                    (Some(n), Some(eta), Some(k)) => {
                        if n == 0 || k == 0 || !(eta > 0.0) || !eta.is_finite() {
                            return bad("n_particles and n_steps must be >= 1 and step_size > 0".into());
                        }
                    }
                    _ => return bad("particle methods need n_particles, step_size and n_steps".into()),
                }
            }
        }
        if let Some(k) = &self.kernel {
            if let Lengthscale::Fixed(s) = k.lengthscale {
                if !(s > 0.0) || !s.is_finite() {
                    return bad(format!("kernel lengthscale must be positive, got {s}"));
                }
            }
            if k.heuristic_samples < 2 {
                return bad("kernel.heuristic_samples must be at least 2".into());
            }
        }
        if self.embedding.as_ref().is_some_and(|e| e.anchors == 0) {
            return bad("embedding.anchors must be at least 1".into());
        }
        let needs_data = matches!(self.loss, LossConfig::Regression { .. });
        if needs_data != self.dataset.is_some() {
            return bad("a dataset block is required exactly when the loss is regression".into());
        }
        if let Some(DatasetConfig::Synthetic { n, dim, noise }) = &self.dataset {
            if *n < 10 || *dim == 0 || !(*noise >= 0.0) {
                return bad("synthetic dataset needs n >= 10, dim >= 1, noise >= 0".into());
            }
        }
        if matches!(self.init, InitConfig::Kaiming {}) && !needs_data {
            return bad("kaiming initialisation goes with the regression loss".into());
        }
        if let Some(o) = &self.oracle {
            if o.baseline_resamples == 0 || o.samples == Some(0) {
                return bad("oracle samples and baseline_resamples must be >= 1".into());
            }
        }
        if let (Some(k), Some(&c)) = (self.n_steps, self.checkpoints.iter().max()) {
            if c > k {
                return bad(format!("checkpoint {c} exceeds n_steps {k}"));
            }
        }
        Ok(())
    }
}

/// Sets `path.to.key` in a JSON document. The value is parsed as JSON and
/// falls back to a plain string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("override path {path:?} has an empty segment")));
    }
    let mut node = doc;
    for key in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override {path:?} descends into a non-object")))?;
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| CliError::Config(format!("override {path:?} descends into a non-object")))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Reads a config file, applies overrides and validates the result.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut doc: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    ExperimentConfig::from_value(doc)
}
