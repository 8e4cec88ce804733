//! Config → sampler → oracle → metrics pipeline and its output files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;

use wgf_core::dynamics::{run, Method, MethodSpec, RunRecord, RunSettings};
use wgf_core::fdgvi::{fdgvi_objective, fdgvi_train, DrawMode, FdgviSettings, GaussianVariational, KlReference};
use wgf_core::kernels::{median_heuristic, MeanEmbedding, SeKernel};
use wgf_core::losses::{DoubleWellLoss, LossModel, MixtureNllLoss, QuadraticLoss, RegressionLoss, SharedLoss, SineLoss, ZeroLoss};
use wgf_core::measures::{Initializer, ReferenceMeasure};
use wgf_core::neural::{ensemble_nll, load_csv_dataset, synthetic_linear_gaussian, DataSplit, Dataset, MlpShape};
use wgf_core::oracles::{
    de_limit, drle_stationary, gibbs_density, BasinRule, GridDensity, GridSpec, PicardSettings,
};
use wgf_core::rng::{indexed_stream, stream, Purpose};

use crate::compare::{compare, Metric, Reference};
use crate::config::{
    DatasetConfig, DrawModeConfig, ExperimentConfig, ExperimentKind, InitConfig, KlConfig, Lengthscale, LossConfig,
    MeasureConfig, MethodName, OracleConfig, OracleKind,
};
use crate::error::CliError;

/// Ordered `(name, value)` rows of `metrics.csv`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics(pub Vec<(String, f64)>);

impl Metrics {
    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.0.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric", "value"])?;
        for (name, v) in &self.0 {
            w.write_record([name.clone(), format!("{v:?}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub out_dir: PathBuf,
    pub metrics: Metrics,
    pub files: Vec<PathBuf>,
}

/// Everything built from a config before any output is written.
struct Prepared {
    loss: SharedLoss,
    prior: ReferenceMeasure,
    init: Initializer,
    spec: Option<MethodSpec>,
    dataset: Option<(Dataset, MlpShape)>,
}

fn measure(cfg: &MeasureConfig, dim: usize) -> Result<ReferenceMeasure, CliError> {
    let m = match cfg {
        MeasureConfig::Gaussian { mean, variance } => ReferenceMeasure::gaussian(mean.clone(), variance.clone()),
        MeasureConfig::StandardNormal { dim: d } => Ok(ReferenceMeasure::standard_normal(d.unwrap_or(dim))),
        MeasureConfig::Flat { dim: d } => ReferenceMeasure::flat(d.unwrap_or(dim)),
        MeasureConfig::Uniform { lo, hi } => ReferenceMeasure::uniform(lo.clone(), hi.clone()),
    }
    .map_err(CliError::config)?;
    if m.dim() != dim {
        return Err(CliError::Config(format!("measure has dimension {}, loss has {dim}", m.dim())));
    }
    Ok(m)
}

fn dataset(cfg: &ExperimentConfig) -> Result<Option<(Dataset, MlpShape)>, CliError> {
    let (Some(data), LossConfig::Regression { hidden }) = (&cfg.dataset, &cfg.loss) else {
        return Ok(None);
    };
    let split_seed = cfg.split_seed.unwrap_or(cfg.seed);
    let ds = match data {
        DatasetConfig::Synthetic { n, dim, noise } => {
            let table = synthetic_linear_gaussian(*n, *dim, *noise, &mut stream(cfg.seed, Purpose::DataSynth)).map_err(CliError::config)?;
            let (all, names) = table.to_split("y").map_err(CliError::config)?;
            Dataset::split(&all, names, &mut stream(split_seed, Purpose::DataSplit)).map_err(CliError::config)?
        }
        DatasetConfig::Csv { path, target } => load_csv_dataset(path, target, split_seed).map_err(CliError::config)?,
    };
    if ds.val.is_empty() || ds.test.is_empty() {
        return Err(CliError::Config("dataset too small for a validation and test split".into()));
    }
    let shape = MlpShape::new(ds.train.dim(), *hidden);
    if *hidden == 0 {
        return Err(CliError::Config("regression needs at least one hidden unit".into()));
    }
    Ok(Some((ds, shape)))
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    let dataset = dataset(cfg)?;
    let loss: SharedLoss = match &cfg.loss {
        LossConfig::DoubleWell {} => Arc::new(DoubleWellLoss),
        LossConfig::Mixture2d {} => Arc::new(MixtureNllLoss::default()),
        LossConfig::Sine { half_width } => Arc::new(SineLoss::new(*half_width)),
        LossConfig::Quadratic { dim } | LossConfig::Zero { dim } if *dim == 0 => {
            return Err(CliError::Config("loss dimension must be at least 1".into()))
        }
        LossConfig::Quadratic { dim } => Arc::new(QuadraticLoss { dim: *dim }),
        LossConfig::Zero { dim } => Arc::new(ZeroLoss { dim: *dim }),
        LossConfig::Regression { .. } => {
            let (ds, shape) = dataset.as_ref().expect("validated");
            Arc::new(RegressionLoss::new(*shape, Arc::new(ds.train.clone())).map_err(CliError::config)?)
        }
    };
    let dim = loss.dim();
    let prior = measure(&cfg.prior, dim)?;
    let init = match &cfg.init {
        InitConfig::Prior {} if prior.is_flat() => {
            return Err(CliError::Config("a flat prior cannot initialise particles; give an explicit init".into()))
        }
        InitConfig::Prior {} => Initializer::measure(prior.clone()),
        InitConfig::Gaussian { mean, variance } => Initializer::measure(measure(
            &MeasureConfig::Gaussian {
                mean: mean.clone(),
                variance: variance.clone(),
            },
            dim,
        )?),
        InitConfig::StandardNormal { dim: d } => Initializer::measure(measure(&MeasureConfig::StandardNormal { dim: *d }, dim)?),
        InitConfig::Uniform { lo, hi } => Initializer::measure(measure(
            &MeasureConfig::Uniform {
                lo: lo.clone(),
                hi: hi.clone(),
            },
            dim,
        )?),
        InitConfig::Dirac { location } => {
            if location.len() != dim {
                return Err(CliError::Config(format!("dirac location has dimension {}, loss has {dim}", location.len())));
            }
            Initializer::Dirac { location: location.clone() }
        }
        InitConfig::Kaiming {} => Initializer::Kaiming {
            shape: dataset.as_ref().expect("validated").1,
        },
    };

    let spec = match cfg.method {
        MethodName::Fdgvi => {
            let f = cfg.fdgvi.as_ref().expect("validated");
            if matches!(f.kl, KlConfig::Prior {}) && !matches!(prior, ReferenceMeasure::Gaussian { .. }) {
                return Err(CliError::Config("fdgvi kl=prior needs a gaussian prior".into()));
            }
            for v in [&f.mu0, &f.beta0].into_iter().flatten() {
                if v.len() != dim {
                    return Err(CliError::Config(format!("fdgvi initial parameters need dimension {dim}")));
                }
            }
            None
        }
        m => Some(method_spec(cfg, m, loss.clone(), &prior, &init)?),
    };
    Ok(Prepared {
        loss,
        prior,
        init,
        spec,
        dataset,
    })
}

fn method_spec(
    cfg: &ExperimentConfig,
    name: MethodName,
    loss: SharedLoss,
    prior: &ReferenceMeasure,
    init: &Initializer,
) -> Result<MethodSpec, CliError> {
    let method = match name {
        MethodName::De => Method::De,
        MethodName::Dle => Method::Dle,
        MethodName::Drle => Method::Drle,
        MethodName::Dre => Method::Dre,
        MethodName::Fdgvi => unreachable!(),
    };
    let (mut kernel, mut embedding) = (None, None);
    if cfg.lambda1 > 0.0 {
        let kc = cfg
            .kernel
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("method {method} with lambda1 > 0 needs a kernel block")))?;
        let lengthscale = match kc.lengthscale {
            Lengthscale::Fixed(s) => s,
            Lengthscale::Rule(_) => {
                // Flat priors cannot be sampled; their heuristic uses Q₀.
                let mut rng = stream(cfg.seed, Purpose::Heuristic);
                let samples = if prior.is_flat() {
                    init.sample(kc.heuristic_samples, &mut rng)
                } else {
                    prior.sample(kc.heuristic_samples, &mut rng)
                }
                .map_err(CliError::config)?;
                median_heuristic(&samples).map_err(CliError::config)?
            }
        };
        let k = SeKernel::new(lengthscale).map_err(CliError::config)?;
        if !prior.is_flat() {
            let m = cfg.embedding.clone().unwrap_or_default().anchors;
            let anchors = prior.sample(m, &mut stream(cfg.seed, Purpose::Anchors)).map_err(CliError::config)?;
            embedding = Some(MeanEmbedding::new(k, anchors).map_err(CliError::config)?);
        }
        kernel = Some(k);
    }
    MethodSpec::new(method, loss, prior.clone(), kernel, embedding, cfg.lambda1, cfg.lambda2).map_err(CliError::config)
}

/// Validates, runs and writes all artifacts of one experiment into `out_dir`.
/// Nothing is written when the config is rejected.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Outcome, CliError> {
    cfg.validate()?;
    let prepared = prepare(cfg)?;
    fs::create_dir_all(out_dir)?;
    let mut out = Outcome {
        out_dir: out_dir.to_path_buf(),
        metrics: Metrics::default(),
        files: Vec::new(),
    };
    match &prepared.spec {
        Some(spec) => run_particles(cfg, &prepared, spec, &mut out)?,
        None => run_fdgvi(cfg, &prepared, &mut out)?,
    }
    let path = out_dir.join("metrics.csv");
    out.metrics.write(&path)?;
    out.files.push(path);
    Ok(out)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Columns `step, particle_id, theta_0, …`.
pub fn write_particles(path: &Path, step: u64, particles: &[Vec<f64>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = particles.first().map_or(0, Vec::len);
    let mut header = vec!["step".to_string(), "particle_id".to_string()];
    header.extend((0..dim).map(|j| format!("theta_{j}")));
    w.write_record(&header)?;
    for (n, p) in particles.iter().enumerate() {
        let mut row = vec![step.to_string(), n.to_string()];
        row.extend(p.iter().map(|x| format!("{x:?}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn run_particles(cfg: &ExperimentConfig, p: &Prepared, spec: &MethodSpec, out: &mut Outcome) -> Result<(), CliError> {
    let mut checkpoints = cfg.checkpoints.clone();
    checkpoints.push(0);
    let settings = RunSettings {
        n_particles: cfg.n_particles.expect("validated"),
        step_size: cfg.step_size.expect("validated"),
        n_steps: cfg.n_steps.expect("validated"),
        seed: cfg.seed,
        checkpoints,
    };
    let record = run(spec, &p.init, &settings).map_err(CliError::from_run)?;
    for snap in &record.snapshots {
        let path = out.out_dir.join(format!("particles_{}.csv", snap.step));
        write_particles(&path, snap.step, &snap.particles)?;
        out.files.push(path);
    }
    let m = &mut out.metrics;
    let last = record.metrics.last().expect("final checkpoint");
    m.push("n_particles", settings.n_particles as f64);
    m.push("n_steps", settings.n_steps as f64);
    m.push("lambda1", spec.lambda1());
    m.push("lambda2", spec.lambda2());
    if let Some(k) = spec.kernel() {
        m.push("kernel_lengthscale", k.lengthscale());
    }
    m.push("final_mean_loss", last.mean_loss);
    m.push("final_min_loss", last.min_loss);
    m.push("final_max_loss", last.max_loss);

    let finals = &record.final_snapshot().particles;
    match cfg.experiment {
        ExperimentKind::GlobalMinimiser => double_well_metrics(finals, m),
        ExperimentKind::SineModes => sine_metrics(finals, out)?,
        ExperimentKind::Multimodal => {
            mixture_metrics(finals, &mut out.metrics);
            write_loss_grid(&out.out_dir.join("loss_grid.csv"), p.loss.as_ref())?;
            out.files.push(out.out_dir.join("loss_grid.csv"));
        }
        ExperimentKind::Regression => regression_metrics(&record, p, out)?,
        ExperimentKind::Custom => {}
    }
    let oracle = run_oracle(cfg, p, spec, finals, out)?;

    let mut rec = json!({
        "config": cfg.to_value(),
        "record": record,
    });
    if let Some(o) = oracle {
        rec["oracle"] = o;
    }
    if let Some(e) = spec.embedding() {
        rec["embedding_anchors"] = json!(e.anchors());
    }
    let path = out.out_dir.join("run_record.json");
    write_json(&path, &rec)?;
    out.files.push(path);
    Ok(())
}

fn nearest<'a>(x: f64, targets: impl IntoIterator<Item = &'a f64>) -> (usize, f64) {
    targets
        .into_iter()
        .enumerate()
        .map(|(i, t)| (i, (x - t).abs()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty targets")
}

fn double_well_metrics(finals: &[Vec<f64>], m: &mut Metrics) {
    if finals[0].len() != 1 {
        return;
    }
    let minima = [DoubleWellLoss::GLOBAL_MIN, DoubleWellLoss::LOCAL_MIN];
    let n = finals.len() as f64;
    let mut near = [0usize; 2];
    let mut worst: f64 = 0.0;
    for p in finals {
        let (i, d) = nearest(p[0], &minima);
        worst = worst.max(d);
        if d < 1e-2 {
            near[i] += 1;
        }
    }
    m.push("frac_near_global_min", near[0] as f64 / n);
    m.push("frac_near_local_min", near[1] as f64 / n);
    m.push("frac_left_of_saddle", finals.iter().filter(|p| p[0] < DoubleWellLoss::SADDLE).count() as f64 / n);
    m.push("max_dist_to_minimum", worst);
}

fn sine_metrics(finals: &[Vec<f64>], out: &mut Outcome) -> Result<(), CliError> {
    use std::collections::BTreeMap;
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    let mut worst: f64 = 0.0;
    for p in finals {
        let i = SineLoss::nearest_minimum_index(p[0]);
        let centre = std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI;
        worst = worst.max((p[0] - centre).abs());
        *counts.entry(i).or_default() += 1;
    }
    let singletons = counts.values().filter(|&&c| c == 1).count();
    let m = &mut out.metrics;
    m.push("max_dist_to_minimum", worst);
    m.push("occupied_modes", counts.len() as f64);
    m.push("singleton_particles", singletons as f64);
    m.push("singleton_fraction", singletons as f64 / finals.len() as f64);
    let path = out.out_dir.join("mode_counts.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["mode_index", "center", "count"])?;
    for (i, c) in &counts {
        let centre = std::f64::consts::FRAC_PI_2 + *i as f64 * std::f64::consts::PI;
        w.write_record([i.to_string(), format!("{centre:?}"), c.to_string()])?;
    }
    w.flush()?;
    out.files.push(path);
    Ok(())
}

fn mixture_metrics(points: &[Vec<f64>], m: &mut Metrics) {
    let centres = MixtureNllLoss::default().centers().to_vec();
    let mut counts = [0usize; 4];
    let mut total = 0.0;
    let mut worst: f64 = 0.0;
    for p in points {
        let (i, d) = centres
            .iter()
            .enumerate()
            .map(|(i, c)| (i, ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        counts[i] += 1;
        total += d;
        worst = worst.max(d);
    }
    let n = points.len() as f64;
    for (i, c) in counts.iter().enumerate() {
        m.push(format!("mode_{i}_fraction"), *c as f64 / n);
    }
    m.push("mean_dist_to_nearest_center", total / n);
    m.push("max_dist_to_nearest_center", worst);
}

/// `theta_0, theta_1, loss` on `[−7, 7]²` for contour plots.
fn write_loss_grid(path: &Path, loss: &dyn LossModel) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["theta_0", "theta_1", "loss"])?;
    let n = 141;
    for i in 0..n {
        for j in 0..n {
            let x = -7.0 + 14.0 * i as f64 / (n - 1) as f64;
            let y = -7.0 + 14.0 * j as f64 / (n - 1) as f64;
            w.write_record([format!("{x:?}"), format!("{y:?}"), format!("{:?}", loss.value(&[x, y]))])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn member_predictions(shape: &MlpShape, members: &[Vec<f64>], data: &DataSplit) -> Vec<Vec<f64>> {
    data.iter()
        .map(|(x, _)| members.iter().map(|theta| shape.forward(theta, x)).collect())
        .collect()
}

fn regression_metrics(record: &RunRecord, p: &Prepared, out: &mut Outcome) -> Result<(), CliError> {
    let (ds, shape) = p.dataset.as_ref().expect("validated");
    let first = &record.snapshots[0];
    let finals = &record.final_snapshot().particles;
    let mean_mse = |members: &[Vec<f64>]| members.iter().map(|t| p.loss.value(t)).sum::<f64>() / members.len() as f64;
    let init_mse = mean_mse(&first.particles);
    let final_mse = mean_mse(finals);
    let m = &mut out.metrics;
    m.push("n_train", ds.train.len() as f64);
    m.push("n_test", ds.test.len() as f64);
    m.push("train_mse_init", init_mse);
    m.push("train_mse_final", final_mse);
    m.push("train_mse_reduction", 1.0 - final_mse / init_mse);
    let val = member_predictions(shape, finals, &ds.val);
    let test = member_predictions(shape, finals, &ds.test);
    if finals.len() >= 2 {
        m.push("val_nll", ensemble_nll(&val, ds.val.targets()).map_err(CliError::config)?);
        m.push("test_nll", ensemble_nll(&test, ds.test.targets()).map_err(CliError::config)?);
    }
    let rmse = (test
        .iter()
        .zip(ds.test.targets())
        .map(|(members, y)| (members.iter().sum::<f64>() / members.len() as f64 - y).powi(2))
        .sum::<f64>()
        / test.len() as f64)
        .sqrt();
    m.push("test_rmse", rmse);
    let path = out.out_dir.join("predictions.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["test_index", "member_id", "prediction"])?;
    for (t, members) in test.iter().enumerate() {
        for (n, v) in members.iter().enumerate() {
            w.write_record([t.to_string(), n.to_string(), format!("{v:?}")])?;
        }
    }
    w.flush()?;
    out.files.push(path);
    Ok(())
}

fn resolve_oracle(cfg: &ExperimentConfig, spec: &MethodSpec) -> (OracleKind, OracleConfig) {
    let oc = cfg.oracle.clone().unwrap_or_default();
    let one_d = spec.dim() == 1;
    let kind = match oc.kind {
        OracleKind::Auto if one_d && matches!(cfg.experiment, ExperimentKind::GlobalMinimiser | ExperimentKind::Custom) => {
            match spec.method() {
                Method::De => OracleKind::DeLimit,
                Method::Dle => OracleKind::Gibbs,
                Method::Drle => OracleKind::DrleStationary,
                Method::Dre => OracleKind::None,
            }
        }
        OracleKind::Auto => OracleKind::None,
        k => k,
    };
    (kind, oc)
}

fn run_oracle(
    cfg: &ExperimentConfig,
    p: &Prepared,
    spec: &MethodSpec,
    finals: &[Vec<f64>],
    out: &mut Outcome,
) -> Result<Option<serde_json::Value>, CliError> {
    let (kind, oc) = resolve_oracle(cfg, spec);
    if kind == OracleKind::None {
        return Ok(None);
    }
    if spec.dim() != 1 {
        return Err(CliError::Config("oracles are one-dimensional".into()));
    }
    let grid = match oc.grid {
        Some(g) => GridSpec::new(g.lo, g.hi, g.n_points).map_err(CliError::config)?,
        None => GridSpec::double_well(),
    };
    let density: GridDensity = match kind {
        OracleKind::DeLimit => return de_limit_oracle(cfg, p, finals, &oc, out).map(Some),
        OracleKind::Gibbs => {
            if !(spec.lambda2() > 0.0) || spec.lambda1() > 0.0 {
                return Err(CliError::Config("the gibbs oracle needs lambda1 = 0 and lambda2 > 0".into()));
            }
            gibbs_density(p.loss.as_ref(), &p.prior, spec.lambda2(), grid).map_err(CliError::oracle)?
        }
        OracleKind::DrleStationary => {
            let pc = oc.picard.unwrap_or(crate::config::PicardConfig {
                damping: 0.5,
                tolerance: 1e-8,
                max_iterations: 500,
            });
            let settings = PicardSettings {
                damping: pc.damping,
                tolerance: pc.tolerance,
                max_iterations: pc.max_iterations,
            };
            let sol = drle_stationary(spec, grid, settings).map_err(CliError::oracle)?;
            out.metrics.push("oracle_residual", sol.residual);
            out.metrics.push("oracle_iterations", sol.iterations as f64);
            sol.density
        }
        OracleKind::Auto | OracleKind::None => unreachable!(),
    };
    let path = out.out_dir.join("oracle_density.csv");
    density.write_csv(BufWriter::new(File::create(&path)?)).map_err(CliError::oracle)?;
    out.files.push(path);

    let m = &mut out.metrics;
    let mean = density.expectation(|x| x);
    m.push("oracle_mean", mean);
    m.push("oracle_variance", density.expectation(|x| (x - mean).powi(2)));
    let xs: Vec<f64> = finals.iter().map(|q| q[0]).collect();
    let pm = xs.iter().sum::<f64>() / xs.len() as f64;
    m.push("particle_mean", pm);
    m.push("particle_variance", xs.iter().map(|x| (x - pm).powi(2)).sum::<f64>() / xs.len() as f64);
    let row = compare(finals, &Reference::Density(density), Metric::W1, cfg.seed, oc.baseline_resamples)?;
    m.push("w1_to_oracle", row.value);
    m.push("w1_baseline_min", row.baseline.min);
    m.push("w1_baseline_median", row.baseline.median);
    m.push("w1_baseline_max", row.baseline.max);
    m.push("w1_within_baseline", if row.baseline.contains(row.value) { 1.0 } else { 0.0 });
    Ok(Some(json!({ "kind": kind, "grid": grid })))
}

fn de_limit_oracle(
    cfg: &ExperimentConfig,
    p: &Prepared,
    finals: &[Vec<f64>],
    oc: &OracleConfig,
    out: &mut Outcome,
) -> Result<serde_json::Value, CliError> {
    let (atoms, default_bounds) = match cfg.loss {
        LossConfig::DoubleWell {} => (vec![DoubleWellLoss::GLOBAL_MIN, DoubleWellLoss::LOCAL_MIN], vec![DoubleWellLoss::SADDLE]),
        LossConfig::Quadratic { dim: 1 } => (vec![0.0], vec![]),
        _ => return Err(CliError::Config("the de_limit oracle knows the minima of double_well and quadratic only".into())),
    };
    let bounds = oc.basin_boundaries.clone().unwrap_or(default_bounds);
    let exact = BasinRule::Boundaries(bounds);
    let limit = match de_limit(p.loss.as_ref(), &p.init, &atoms, &exact, &mut stream(cfg.seed, Purpose::OracleSampling)) {
        Ok(l) => l,
        // no closed-form CDF: fall back to flowing Monte Carlo draws
        Err(wgf_core::Error::Config(_)) => {
            let mc = BasinRule::MonteCarlo {
                samples: 10_000,
                flow_step: 1e-2,
                max_steps: 100_000,
                tolerance: 1e-8,
            };
            de_limit(p.loss.as_ref(), &p.init, &atoms, &mc, &mut stream(cfg.seed, Purpose::OracleSampling)).map_err(CliError::oracle)?
        }
        Err(e) => return Err(CliError::oracle(e)),
    };
    let n = finals.len() as f64;
    for (i, a) in limit.atoms.iter().enumerate() {
        out.metrics.push(format!("oracle_weight_{i}"), a.weight);
        let hits = finals.iter().filter(|q| nearest(q[0], &atoms).0 == i).count();
        out.metrics.push(format!("empirical_weight_{i}"), hits as f64 / n);
    }
    let value = serde_json::to_value(&limit)?;
    let path = out.out_dir.join("oracle_limit.json");
    write_json(&path, &value)?;
    out.files.push(path);
    Ok(json!({ "kind": "de_limit", "limit": value }))
}

fn run_fdgvi(cfg: &ExperimentConfig, p: &Prepared, out: &mut Outcome) -> Result<(), CliError> {
    let f = cfg.fdgvi.as_ref().expect("validated");
    let dim = p.loss.dim();
    let kl = match (&f.kl, &p.prior) {
        (KlConfig::Flat {}, _) => KlReference::Flat,
        (KlConfig::Prior {}, ReferenceMeasure::Gaussian { mean, variance }) => KlReference::Gaussian {
            mean: mean.clone(),
            variance: variance.clone(),
        },
        (KlConfig::Prior {}, _) => unreachable!("checked in prepare"),
    };
    let settings = FdgviSettings {
        lambda: f.lambda,
        kl,
        learning_rate: f.lr,
        iterations: f.iters,
        mc_samples: f.mc_samples,
        mode: match f.draws {
            DrawModeConfig::Fresh => DrawMode::Fresh,
            DrawModeConfig::Common => DrawMode::Common,
        },
    };
    let init = GaussianVariational::new(
        f.mu0.clone().unwrap_or_else(|| vec![0.0; dim]),
        f.beta0.clone().unwrap_or_else(|| vec![0.0; dim]),
    )
    .map_err(CliError::config)?;
    let q = fdgvi_train(p.loss.as_ref(), &settings, init, cfg.seed).map_err(CliError::from_run)?;
    let objective = fdgvi_objective(
        &q,
        p.loss.as_ref(),
        settings.lambda,
        &settings.kl,
        settings.mc_samples,
        &mut indexed_stream(cfg.seed, Purpose::Fdgvi, 0),
    )
    .map_err(CliError::config)?;

    let m = &mut out.metrics;
    for j in 0..dim {
        m.push(format!("mu_{j}"), q.mu[j]);
    }
    for j in 0..dim {
        m.push(format!("beta_{j}"), q.beta[j]);
    }
    for (j, v) in q.variance().iter().enumerate() {
        m.push(format!("variance_{j}"), *v);
    }
    m.push("objective", objective);

    // Draws from the fitted Gaussian, written like a particle snapshot.
    let n = cfg.n_particles.unwrap_or(300);
    let sample = Initializer::measure(ReferenceMeasure::gaussian(q.mu.clone(), q.variance()).map_err(CliError::config)?)
        .sample(n, &mut stream(cfg.seed, Purpose::OracleSampling))
        .map_err(CliError::config)?;
    let path = out.out_dir.join(format!("particles_{}.csv", f.iters));
    write_particles(&path, f.iters as u64, &sample)?;
    out.files.push(path);
    if cfg.experiment == ExperimentKind::Multimodal && dim == 2 {
        mixture_metrics(std::slice::from_ref(&q.mu), &mut out.metrics);
        write_loss_grid(&out.out_dir.join("loss_grid.csv"), p.loss.as_ref())?;
        out.files.push(out.out_dir.join("loss_grid.csv"));
    }

    let fit = json!({ "mu": q.mu, "beta": q.beta });
    let path = out.out_dir.join("fdgvi.json");
    write_json(&path, &fit)?;
    out.files.push(path);
    let path = out.out_dir.join("run_record.json");
    write_json(&path, &json!({ "config": cfg.to_value(), "fdgvi": fit }))?;
    out.files.push(path);
    Ok(())
}

/// Output directory precedence: `--out`, then the config, then
/// `runs/<config stem>`.
pub fn output_dir(cfg: &ExperimentConfig, cli_out: Option<&Path>, config_path: &Path) -> PathBuf {
    if let Some(p) = cli_out {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.output_dir {
        return p.clone();
    }
    let stem = config_path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    PathBuf::from("runs").join(stem)
}
