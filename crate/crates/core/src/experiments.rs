//! End-to-end experiment drivers shared by the command line and the
//! bindings. Every driver is a pure function of its configuration, the data
//! and a root seed; per-component seeds are `derive_seed(seed, path)` with
//! the paths listed on each driver.

use std::collections::BTreeMap;
use std::time::Instant;

use faer::Mat;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{subsample, Cell, Dataset, ExperimentRecord, Subsample, Table};
use crate::error::{Result, RnfError};
use crate::network::{ModelConfig, NetworkModel, SigmaParams};
use crate::perturb::{apply_noise, average_relative_distance, perturbed_set, PerturbationKind};
use crate::seed::{child_rng, derive_seed};
use crate::tangent::{
    kernel_from_features, max_eigenvalue, regress_with, KernelMode, LinearizedState, RidgeSolver,
    TangentFeatures, TimeMode, DEFAULT_MAX_ENTRIES,
};
use crate::trainer::{
    accuracy, compare_dynamics, entry_loss, label_matrix, select_probes, sgd_train, DynamicsReport, EtaMode, Split,
    TrainConfig, TrainingHistory,
};
use crate::FactorKind;

/// Architecture settings common to a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub width: usize,
    pub sigma_w: f64,
    pub sigma_b: f64,
    pub nu: f64,
    pub factor: FactorKind,
    /// Per-model `[σ_r, σ_s]`; models not listed use their defaults.
    pub receptive: BTreeMap<u8, [f64; 2]>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let s = SigmaParams::default();
        Self {
            width: 2048,
            sigma_w: s.sigma_w,
            sigma_b: s.sigma_b,
            nu: s.nu,
            factor: FactorKind::Auto,
            receptive: BTreeMap::new(),
        }
    }
}

impl ModelSettings {
    /// Model `model_id` reading `input_dim` features.
    pub fn model(&self, model_id: u8, input_dim: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(model_id).with_width(self.width);
        cfg.input_dim = input_dim;
        cfg.sigma.sigma_w = self.sigma_w;
        cfg.sigma.sigma_b = self.sigma_b;
        cfg.sigma.nu = self.nu;
        cfg.factor = self.factor;
        if let Some([r, s]) = self.receptive.get(&model_id) {
            cfg = cfg.with_receptive(*r, *s);
        }
        cfg
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    // sample standard deviation
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn check_models(models: &[u8]) -> Result<()> {
    if models.is_empty() {
        return Err(RnfError::Config("no models selected".into()));
    }
    if let Some(m) = models.iter().find(|m| !(1..=5).contains(*m)) {
        return Err(RnfError::Config(format!("model id must be in 1..=5, got {m}")));
    }
    Ok(())
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

// ---------------------------------------------------------------------------
// sample

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub model: u8,
    pub input_dim: usize,
    pub settings: ModelSettings,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { model: 1, input_dim: 784, settings: ModelSettings::default() }
    }
}

/// Effective first-layer weights, one row per output neuron
/// (`n_out × n_in`). Network seed: `"sample/model{m}"`.
pub fn sample_first_layer(cfg: &SampleConfig, seed: u64) -> Result<Mat<f64>> {
    check_models(&[cfg.model])?;
    let net = NetworkModel::build(&cfg.settings.model(cfg.model, cfg.input_dim), derive_seed(seed, &format!("sample/model{}", cfg.model)))?;
    let p = net.params(0).ok_or_else(|| RnfError::Config("first layer is not dense".into()))?;
    Ok(p.w().transpose().to_owned())
}

/// Mean over rows of the spread of each row's weight mass along the input
/// axis: the standard deviation of positions `(a+1)/n_in` weighted by `w²`.
pub fn effective_support_width(w: &Mat<f64>) -> f64 {
    let n_in = w.ncols() as f64;
    let mut total = 0.0;
    for r in 0..w.nrows() {
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for a in 0..w.ncols() {
            let p = (a + 1) as f64 / n_in;
            let q = w[(r, a)] * w[(r, a)];
            m0 += q;
            m1 += q * p;
            m2 += q * p * p;
        }
        if m0 > 0.0 {
            let mu = m1 / m0;
            total += (m2 / m0 - mu * mu).max(0.0).sqrt();
        }
    }
    total / w.nrows() as f64
}

/// Mean over rows of the lag-1 sample autocorrelation along the input axis.
pub fn lag1_autocorrelation(w: &Mat<f64>) -> f64 {
    let n = w.ncols();
    let mut total = 0.0;
    for r in 0..w.nrows() {
        let mean = (0..n).map(|a| w[(r, a)]).sum::<f64>() / n as f64;
        let var: f64 = (0..n).map(|a| (w[(r, a)] - mean).powi(2)).sum();
        let cov: f64 = (0..n - 1).map(|a| (w[(r, a)] - mean) * (w[(r, a + 1)] - mean)).sum();
        if var > 0.0 {
            total += cov / var;
        }
    }
    total / w.nrows() as f64
}

pub fn run_sample(cfg: &SampleConfig, seed: u64) -> Result<ExperimentRecord> {
    let start = Instant::now();
    let w = sample_first_layer(cfg, seed)?;
    let mut rec = ExperimentRecord::new("sample", serde_json::to_value(cfg)?, seed);
    let mut header: Vec<String> = vec!["neuron".into()];
    header.extend((0..w.ncols()).map(|a| format!("in_{a}")));
    let mut t = Table { name: "weights".into(), header, rows: Vec::new() };
    for r in 0..w.nrows() {
        let mut row = vec![Cell::from(r)];
        row.extend((0..w.ncols()).map(|a| Cell::from(w[(r, a)])));
        t.rows.push(row);
    }
    rec.tables.push(t);
    let mut s = Table::new("summary", &["model", "sigma_r", "sigma_s", "support_width", "lag1_autocorrelation"]);
    let (sr, ss) = cfg.settings.model(cfg.model, cfg.input_dim).receptive();
    s.push(vec![
        cfg.model.into(),
        sr.into(),
        ss.into(),
        effective_support_width(&w).into(),
        lag1_autocorrelation(&w).into(),
    ]);
    rec.tables.push(s);
    rec.manifest.extra = serde_json::json!({
        "network_seed": derive_seed(seed, &format!("sample/model{}", cfg.model)),
        "layout": "rows are output neurons, columns input positions",
    });
    rec.manifest.timings.insert("total".into(), secs(start));
    Ok(rec)
}

/// Overlay `patch` on `base`, recursing into objects; anything else replaces.
pub fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `defaults` overlaid with a partial configuration, read back as `T`.
pub fn layered<T: Serialize + DeserializeOwned>(defaults: T, patch: Option<Value>) -> Result<T> {
    let Some(patch) = patch else { return Ok(defaults) };
    let mut v = serde_json::to_value(defaults)?;
    merge_json(&mut v, patch);
    serde_json::from_value(v).map_err(|e| RnfError::Config(format!("invalid config: {e}")))
}

// ---------------------------------------------------------------------------
// ntk-check

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NtkCheckConfig {
    pub model: u8,
    pub widths: Vec<usize>,
    pub n_train: usize,
    pub n_val: usize,
    pub steps: u64,
    pub log_points: usize,
    pub eta: EtaMode,
    pub settings: ModelSettings,
}

impl Default for NtkCheckConfig {
    fn default() -> Self {
        let mut settings = ModelSettings::default();
        settings.receptive.insert(1, [0.5, 0.01]);
        Self {
            model: 1,
            widths: vec![128, 512, 2048],
            n_train: 80,
            n_val: 20,
            steps: 100_000,
            log_points: 60,
            eta: EtaMode::Auto,
            settings,
        }
    }
}

/// One width of an ntk-check run.
#[derive(Debug, Clone)]
pub struct NtkCheckRun {
    pub width: usize,
    pub lambda_max: f64,
    pub eta: f64,
    pub history: TrainingHistory,
    pub report: DynamicsReport,
    pub seconds: f64,
}

/// Train each width from its initialization and compare against the
/// discrete-time linearized prediction from the same initialization.
///
/// Seeds: split `"ntk/split"`, network `"ntk/model{m}"` (shared by widths).
pub fn ntk_check(ds: &Dataset, cfg: &NtkCheckConfig, seed: u64) -> Result<(Subsample, Vec<NtkCheckRun>)> {
    check_models(&[cfg.model])?;
    if cfg.widths.is_empty() {
        return Err(RnfError::Config("no widths given".into()));
    }
    let split = subsample(ds, cfg.n_train, cfg.n_val, derive_seed(seed, "ntk/split"))?;
    let y = label_matrix(&split.train.labels)?;
    let probes = select_probes(&split.train.images, &split.train.labels);
    let mut runs = Vec::new();
    for &width in &cfg.widths {
        let start = Instant::now();
        let mut settings = cfg.settings.clone();
        settings.width = width;
        let mut net = NetworkModel::build(&settings.model(cfg.model, ds.dim()), derive_seed(seed, &format!("ntk/model{}", cfg.model)))?;
        let features = TangentFeatures::new(&net, split.train.images.as_ref())?;
        let theta0 = kernel_from_features(&features, None, KernelMode::Full, DEFAULT_MAX_ENTRIES)?;
        let train_cfg = TrainConfig {
            steps: cfg.steps,
            eta: cfg.eta,
            log_points: cfg.log_points,
            seed: derive_seed(seed, "ntk/train"),
            ..Default::default()
        };
        let lambda_max = max_eigenvalue(theta0.entries.as_ref(), train_cfg.eig_tol, train_cfg.eig_max_iter)?;
        let eta = match cfg.eta {
            EtaMode::Auto => 2.0 / lambda_max,
            EtaMode::Fixed(e) => e,
        };
        let state = LinearizedState::new(&theta0, features.outputs(), &y, eta, TimeMode::Discrete)?;
        let probe_features = TangentFeatures::sharing(&net, probes.inputs.as_ref(), &features)?;
        let theta_probe = kernel_from_features(&probe_features, Some(&features), KernelMode::Full, DEFAULT_MAX_ENTRIES)?;
        let f0_probe = probe_features.outputs().clone();
        drop((features, theta0, probe_features));
        let mut history = sgd_train(
            &mut net,
            Split { inputs: &split.train.images, labels: &split.train.labels },
            Split { inputs: &split.val.images, labels: &split.val.labels },
            &probes,
            &TrainConfig { eta: EtaMode::Fixed(eta), ..train_cfg },
        )?;
        history.lambda_max = Some(lambda_max);
        let report = compare_dynamics(&history, &state, &theta_probe, &f0_probe)?;
        runs.push(NtkCheckRun { width, lambda_max, eta, history, report, seconds: secs(start) });
    }
    Ok((split, runs))
}

pub fn ntk_check_record(cfg: &NtkCheckConfig, seed: u64, split: &Subsample, runs: &[NtkCheckRun]) -> Result<ExperimentRecord> {
    let mut rec = ExperimentRecord::new("ntk-check", serde_json::to_value(cfg)?, seed);
    let mut summary = Table::new(
        "summary",
        &["width", "lambda_max", "eta", "final_train_loss", "final_train_acc", "final_val_acc", "final_linear_loss", "max_deviation"],
    );
    for run in runs {
        let h = &run.history;
        let last = h.steps.len() - 1;
        summary.push(vec![
            run.width.into(),
            run.lambda_max.into(),
            run.eta.into(),
            h.train_loss[last].into(),
            h.train_acc[last].into(),
            h.val_acc[last].into(),
            run.report.linear_train_loss[last].into(),
            run.report.horizon_max().into(),
        ]);
        rec.tables.push(h.to_table(&format!("history_w{}", run.width)));
        rec.tables.push(run.report.to_table(&format!("dynamics_w{}", run.width), &h.probe_classes));
        rec.manifest.timings.insert(format!("width_{}", run.width), run.seconds);
    }
    rec.tables.insert(0, summary);
    rec.manifest.extra = serde_json::json!({
        "train_indices": split.train_indices,
        "val_indices": split.val_indices,
        "probe_classes": runs.first().map(|r| r.history.probe_classes.clone()),
        "final_params_hash": runs.iter().map(|r| (r.width.to_string(), r.history.final_params_hash.clone())).collect::<BTreeMap<_, _>>(),
        "time_mode": "discrete",
    });
    Ok(rec)
}

// ---------------------------------------------------------------------------
// regress / noise

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressConfig {
    pub models: Vec<u8>,
    pub n_train: usize,
    pub n_test: usize,
    pub trials: usize,
    /// Kernel reductions to regress with; the first is the headline.
    pub modes: Vec<KernelMode>,
    /// Test-set noise levels; `0.0` is the clean test set.
    pub noise_levels: Vec<f64>,
    pub settings: ModelSettings,
}

impl Default for RegressConfig {
    fn default() -> Self {
        Self {
            models: vec![1, 2, 3, 4, 5],
            n_train: 800,
            n_test: 200,
            trials: 5,
            modes: vec![KernelMode::Full, KernelMode::Scalar],
            noise_levels: vec![0.0],
            settings: ModelSettings::default(),
        }
    }
}

impl RegressConfig {
    pub fn noise_default() -> Self {
        Self { noise_levels: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5], ..Self::default() }
    }
}

/// One regression on one test-set variant.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressCell {
    pub model: u8,
    pub trial: usize,
    pub mode: KernelMode,
    pub noise: f64,
    /// Half the mean squared error over all test entries.
    pub loss: f64,
    pub accuracy: f64,
    pub ridge: f64,
}

/// Aggregate over trials.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressSummary {
    pub model: u8,
    pub mode: KernelMode,
    pub noise: f64,
    pub mean_loss: f64,
    pub std_loss: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub trials: usize,
}

pub fn summarize(cells: &[RegressCell]) -> Vec<RegressSummary> {
    let mut keys: Vec<(u8, KernelMode, f64)> = Vec::new();
    for c in cells {
        if !keys.iter().any(|k| k.0 == c.model && k.1 == c.mode && k.2 == c.noise) {
            keys.push((c.model, c.mode, c.noise));
        }
    }
    keys.into_iter()
        .map(|(model, mode, noise)| {
            let sel: Vec<&RegressCell> =
                cells.iter().filter(|c| c.model == model && c.mode == mode && c.noise == noise).collect();
            let (mean_loss, std_loss) = mean_std(&sel.iter().map(|c| c.loss).collect::<Vec<_>>());
            let (mean_acc, std_acc) = mean_std(&sel.iter().map(|c| c.accuracy).collect::<Vec<_>>());
            RegressSummary { model, mode, noise, mean_loss, std_loss, mean_acc, std_acc, trials: sel.len() }
        })
        .collect()
}

fn mode_name(m: KernelMode) -> &'static str {
    match m {
        KernelMode::Full => "full",
        KernelMode::BlockDiagonal => "block_diagonal",
        KernelMode::Scalar => "scalar",
    }
}

/// Kernel regression of every model on `trials` random splits, evaluated on
/// the clean test split and its noisy copies.
///
/// Seeds: split `"regress/trial{t}/split"`, network
/// `"regress/trial{t}/model{m}"`, test noise stream
/// `"regress/trial{t}/noise{k}"` for the `k`-th level (shared by models).
/// `progress` is called after every (trial, model) cell.
pub fn regress_sweep(
    ds: &Dataset,
    cfg: &RegressConfig,
    seed: u64,
    mut progress: impl FnMut(&[RegressCell]),
) -> Result<Vec<RegressCell>> {
    check_models(&cfg.models)?;
    if cfg.trials == 0 || cfg.modes.is_empty() || cfg.noise_levels.is_empty() {
        return Err(RnfError::Config("trials, modes and noise levels must be non-empty".into()));
    }
    let mut cells = Vec::new();
    for trial in 0..cfg.trials {
        let split = subsample(ds, cfg.n_train, cfg.n_test, derive_seed(seed, &format!("regress/trial{trial}/split")))?;
        let y = label_matrix(&split.train.labels)?;
        let y_test = label_matrix(&split.val.labels)?;
        let mut tests = Vec::with_capacity(cfg.noise_levels.len());
        for (k, &level) in cfg.noise_levels.iter().enumerate() {
            let mut rng = child_rng(seed, &format!("regress/trial{trial}/noise{k}"));
            let x = &split.val.images;
            let mut noisy = Mat::<f64>::zeros(x.nrows(), x.ncols());
            for i in 0..x.nrows() {
                let row: Vec<f64> = (0..x.ncols()).map(|j| x[(i, j)]).collect();
                for (j, v) in apply_noise(&row, level, &mut rng)?.into_iter().enumerate() {
                    noisy[(i, j)] = v;
                }
            }
            tests.push(noisy);
        }
        for &model in &cfg.models {
            let net = NetworkModel::build(
                &cfg.settings.model(model, ds.dim()),
                derive_seed(seed, &format!("regress/trial{trial}/model{model}")),
            )?;
            let train = TangentFeatures::new(&net, split.train.images.as_ref())?;
            let full = kernel_from_features(&train, None, KernelMode::Full, DEFAULT_MAX_ENTRIES)?;
            let mut solvers = Vec::new();
            for &mode in &cfg.modes {
                let k = full.to_mode(mode)?;
                solvers.push(RidgeSolver::new(k.entries.as_ref())?);
            }
            drop(full);
            let mut new_cells = Vec::new();
            for (k, x_test) in tests.iter().enumerate() {
                let test = TangentFeatures::sharing(&net, x_test.as_ref(), &train)?;
                let cross = kernel_from_features(&test, Some(&train), KernelMode::Full, DEFAULT_MAX_ENTRIES)?;
                for (&mode, solver) in cfg.modes.iter().zip(&solvers) {
                    let reg = regress_with(solver, &cross.to_mode(mode)?, cfg.n_train, &y)?;
                    new_cells.push(RegressCell {
                        model,
                        trial,
                        mode,
                        noise: cfg.noise_levels[k],
                        loss: entry_loss(&reg.prediction, &y_test)?,
                        accuracy: accuracy(&reg.prediction, &split.val.labels)?,
                        ridge: reg.ridge,
                    });
                }
            }
            cells.extend(new_cells);
            progress(&cells);
        }
    }
    Ok(cells)
}

pub fn regress_record(command: &str, cfg: &RegressConfig, seed: u64, cells: &[RegressCell]) -> Result<ExperimentRecord> {
    let mut rec = ExperimentRecord::new(command, serde_json::to_value(cfg)?, seed);
    let mut t = Table::new("cells", &["model", "trial", "mode", "noise", "loss", "accuracy", "ridge"]);
    for c in cells {
        t.push(vec![
            c.model.into(),
            c.trial.into(),
            mode_name(c.mode).into(),
            c.noise.into(),
            c.loss.into(),
            c.accuracy.into(),
            c.ridge.into(),
        ]);
    }
    rec.tables.push(t);
    let mut s = Table::new("summary", &["model", "mode", "noise", "mean_loss", "std_loss", "mean_acc", "std_acc", "trials"]);
    for r in summarize(cells) {
        s.push(vec![
            r.model.into(),
            mode_name(r.mode).into(),
            r.noise.into(),
            r.mean_loss.into(),
            r.std_loss.into(),
            r.mean_acc.into(),
            r.std_acc.into(),
            r.trials.into(),
        ]);
    }
    rec.tables.push(s);
    let mut ridge: Vec<f64> = cells.iter().map(|c| c.ridge).collect();
    ridge.sort_by(f64::total_cmp);
    ridge.dedup();
    rec.manifest.ridge_eps = ridge;
    let splits: Vec<serde_json::Value> = (0..cfg.trials)
        .map(|t| serde_json::json!({"trial": t, "split_seed": derive_seed(seed, &format!("regress/trial{t}/split"))}))
        .collect();
    rec.manifest.extra = serde_json::json!({ "splits": splits, "loss": "half mean squared error over test entries" });
    Ok(rec)
}

// ---------------------------------------------------------------------------
// stability

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilityConfig {
    pub models: Vec<u8>,
    pub perturbations: Vec<PerturbationKind>,
    pub trials: usize,
    /// Perturbed samples per reference.
    pub count: usize,
    /// Index of the reference digit in the dataset.
    pub reference: usize,
    pub settings: ModelSettings,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            models: vec![1, 2, 3, 4, 5],
            perturbations: vec![PerturbationKind::default_elastic(), PerturbationKind::default_combined()],
            trials: 5,
            count: 50,
            reference: 0,
            settings: ModelSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityCell {
    pub model: u8,
    pub kind: PerturbationKind,
    pub trial: usize,
    pub distance: f64,
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilitySummary {
    pub model: u8,
    pub kind: PerturbationKind,
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
    pub clamped: usize,
}

#[derive(Debug, Clone, Default)]
pub struct StabilityReport {
    pub cells: Vec<StabilityCell>,
    pub summary: Vec<StabilitySummary>,
}

impl StabilityReport {
    pub fn mean(&self, model: u8, kind: &PerturbationKind) -> Option<f64> {
        self.summary.iter().find(|s| s.model == model && &s.kind == kind).map(|s| s.mean)
    }
}

/// Relative kernel distance of perturbed copies of one reference digit.
///
/// Each trial draws a fresh perturbed set (stream
/// `"stability/trial{t}/perturb{k}"`, shared by all models) and fresh
/// networks (`"stability/trial{t}/model{m}"`).
pub fn stability(ds: &Dataset, cfg: &StabilityConfig, seed: u64) -> Result<StabilityReport> {
    check_models(&cfg.models)?;
    if cfg.reference >= ds.len() {
        return Err(RnfError::Config(format!("reference index {} out of range", cfg.reference)));
    }
    if cfg.trials == 0 || cfg.count == 0 {
        return Err(RnfError::Config("trials and count must be positive".into()));
    }
    let x: Vec<f64> = (0..ds.dim()).map(|j| ds.images[(cfg.reference, j)]).collect();
    let mut sets = Vec::new();
    for trial in 0..cfg.trials {
        for (k, kind) in cfg.perturbations.iter().enumerate() {
            let mut rng = child_rng(seed, &format!("stability/trial{trial}/perturb{k}"));
            sets.push((trial, k, perturbed_set(kind, &x, ds.rows, ds.cols, cfg.count, &mut rng)?));
        }
    }
    let jobs: Vec<(usize, u8)> =
        (0..cfg.trials).flat_map(|t| cfg.models.iter().map(move |&m| (t, m))).collect();
    let results: Vec<Result<Vec<StabilityCell>>> = jobs
        .par_iter()
        .map(|&(trial, model)| {
            let net = NetworkModel::build(
                &cfg.settings.model(model, ds.dim()),
                derive_seed(seed, &format!("stability/trial{trial}/model{model}")),
            )?;
            sets.iter()
                .filter(|(t, _, _)| *t == trial)
                .map(|(_, k, s)| {
                    let d = average_relative_distance(&net, &x, s.as_ref())?;
                    Ok(StabilityCell { model, kind: cfg.perturbations[*k], trial, distance: d.mean, clamped: d.clamped })
                })
                .collect()
        })
        .collect();
    let mut cells = Vec::new();
    for r in results {
        cells.extend(r?);
    }
    let mut summary = Vec::new();
    for &model in &cfg.models {
        for kind in &cfg.perturbations {
            let sel: Vec<&StabilityCell> = cells.iter().filter(|c| c.model == model && &c.kind == kind).collect();
            let (mean, std) = mean_std(&sel.iter().map(|c| c.distance).collect::<Vec<_>>());
            summary.push(StabilitySummary {
                model,
                kind: *kind,
                mean,
                std,
                trials: sel.len(),
                clamped: sel.iter().map(|c| c.clamped).sum(),
            });
        }
    }
    Ok(StabilityReport { cells, summary })
}

pub fn stability_record(cfg: &StabilityConfig, seed: u64, rep: &StabilityReport) -> Result<ExperimentRecord> {
    let mut rec = ExperimentRecord::new("stability", serde_json::to_value(cfg)?, seed);
    let mut t = Table::new("cells", &["model", "perturbation", "params", "trial", "distance", "clamped"]);
    for c in &rep.cells {
        t.push(vec![
            c.model.into(),
            c.kind.name().into(),
            serde_json::to_string(&c.kind)?.into(),
            c.trial.into(),
            c.distance.into(),
            c.clamped.into(),
        ]);
    }
    rec.tables.push(t);
    let mut s = Table::new("summary", &["model", "perturbation", "params", "mean", "std", "trials"]);
    for r in &rep.summary {
        s.push(vec![
            r.model.into(),
            r.kind.name().into(),
            serde_json::to_string(&r.kind)?.into(),
            r.mean.into(),
            r.std.into(),
            r.trials.into(),
        ]);
    }
    rec.tables.push(s);
    rec.manifest.extra = serde_json::json!({
        "class_reduction": "trace over class blocks",
        "clamped_radicands": rep.cells.iter().map(|c| c.clamped).sum::<usize>(),
    });
    Ok(rec)
}

// ---------------------------------------------------------------------------
// grid

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMetric {
    Loss,
    Distance,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub model: u8,
    pub sigma_r: Vec<f64>,
    pub sigma_s: Vec<f64>,
    pub metric: GridMetric,
    pub n_train: usize,
    pub n_test: usize,
    pub trials: usize,
    pub perturbation: PerturbationKind,
    pub count: usize,
    pub reference: usize,
    pub settings: ModelSettings,
}

impl Default for GridConfig {
    fn default() -> Self {
        let axis = vec![0.01, 0.05, 0.1, 0.5, 1.0];
        Self {
            model: 1,
            sigma_r: axis.clone(),
            sigma_s: axis,
            metric: GridMetric::Both,
            n_train: 800,
            n_test: 200,
            trials: 1,
            perturbation: PerturbationKind::default_combined(),
            count: 50,
            reference: 0,
            settings: ModelSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub sigma_r: f64,
    pub sigma_s: f64,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub distance: Option<f64>,
}

/// Loss and/or relative distance over a `σ_r × σ_s` grid, averaged over
/// trials. Within a trial every cell shares the split
/// (`"grid/trial{t}/split"`), the network stream
/// (`"grid/trial{t}/model{m}"`) and the perturbed set
/// (`"grid/trial{t}/perturb"`), so cells differ only in the two scales.
pub fn grid(ds: &Dataset, cfg: &GridConfig, seed: u64) -> Result<Vec<GridCell>> {
    check_models(&[cfg.model])?;
    if cfg.sigma_r.is_empty() || cfg.sigma_s.is_empty() || cfg.trials == 0 {
        return Err(RnfError::Config("grid axes and trials must be non-empty".into()));
    }
    let want_loss = cfg.metric != GridMetric::Distance;
    let want_dist = cfg.metric != GridMetric::Loss;
    if want_dist && cfg.reference >= ds.len() {
        return Err(RnfError::Config(format!("reference index {} out of range", cfg.reference)));
    }
    let x: Vec<f64> =
        if want_dist { (0..ds.dim()).map(|j| ds.images[(cfg.reference, j)]).collect() } else { Vec::new() };
    let mut per_trial = Vec::new();
    for trial in 0..cfg.trials {
        let split = if want_loss {
            Some(subsample(ds, cfg.n_train, cfg.n_test, derive_seed(seed, &format!("grid/trial{trial}/split")))?)
        } else {
            None
        };
        let set = if want_dist {
            let mut rng = child_rng(seed, &format!("grid/trial{trial}/perturb"));
            Some(perturbed_set(&cfg.perturbation, &x, ds.rows, ds.cols, cfg.count, &mut rng)?)
        } else {
            None
        };
        per_trial.push((split, set));
    }
    let cells: Vec<(f64, f64)> = cfg.sigma_r.iter().flat_map(|&r| cfg.sigma_s.iter().map(move |&s| (r, s))).collect();
    let results: Vec<Result<GridCell>> = cells
        .par_iter()
        .map(|&(r, s)| {
            let mut settings = cfg.settings.clone();
            settings.receptive.insert(cfg.model, [r, s]);
            let (mut losses, mut accs, mut dists) = (Vec::new(), Vec::new(), Vec::new());
            for (trial, (split, set)) in per_trial.iter().enumerate() {
                let net = NetworkModel::build(
                    &settings.model(cfg.model, ds.dim()),
                    derive_seed(seed, &format!("grid/trial{trial}/model{}", cfg.model)),
                )?;
                if let Some(split) = split {
                    let train = TangentFeatures::new(&net, split.train.images.as_ref())?;
                    let k = kernel_from_features(&train, None, KernelMode::Full, DEFAULT_MAX_ENTRIES)?;
                    let solver = RidgeSolver::new(k.entries.as_ref())?;
                    drop(k);
                    let test = TangentFeatures::sharing(&net, split.val.images.as_ref(), &train)?;
                    let cross = kernel_from_features(&test, Some(&train), KernelMode::Full, DEFAULT_MAX_ENTRIES)?;
                    let reg = regress_with(&solver, &cross, cfg.n_train, &label_matrix(&split.train.labels)?)?;
                    let y_test = label_matrix(&split.val.labels)?;
                    losses.push(entry_loss(&reg.prediction, &y_test)?);
                    accs.push(accuracy(&reg.prediction, &split.val.labels)?);
                }
                if let Some(set) = set {
                    dists.push(average_relative_distance(&net, &x, set.as_ref())?.mean);
                }
            }
            let avg = |v: &Vec<f64>| if v.is_empty() { None } else { Some(mean_std(v).0) };
            Ok(GridCell { sigma_r: r, sigma_s: s, loss: avg(&losses), accuracy: avg(&accs), distance: avg(&dists) })
        })
        .collect();
    results.into_iter().collect()
}

/// Cell with the smallest loss (first on ties).
pub fn grid_argmin(cells: &[GridCell]) -> Option<&GridCell> {
    cells.iter().filter(|c| c.loss.is_some()).min_by(|a, b| a.loss.unwrap().total_cmp(&b.loss.unwrap()))
}

pub fn grid_record(cfg: &GridConfig, seed: u64, cells: &[GridCell]) -> Result<ExperimentRecord> {
    let mut rec = ExperimentRecord::new("grid", serde_json::to_value(cfg)?, seed);
    let opt = |v: Option<f64>| v.map_or(Cell::Text(String::new()), Cell::Num);
    if cfg.metric != GridMetric::Distance {
        let mut t = Table::new("loss_heatmap", &["sigma_r", "sigma_s", "loss", "accuracy"]);
        for c in cells {
            t.push(vec![c.sigma_r.into(), c.sigma_s.into(), opt(c.loss), opt(c.accuracy)]);
        }
        rec.tables.push(t);
    }
    if cfg.metric != GridMetric::Loss {
        let mut t = Table::new("distance_heatmap", &["sigma_r", "sigma_s", "distance"]);
        for c in cells {
            t.push(vec![c.sigma_r.into(), c.sigma_s.into(), opt(c.distance)]);
        }
        rec.tables.push(t);
    }
    rec.manifest.extra = match grid_argmin(cells) {
        Some(best) => serde_json::json!({
            "argmin": {"model": cfg.model, "sigma_r": best.sigma_r, "sigma_s": best.sigma_s, "loss": best.loss}
        }),
        None => serde_json::Value::Null,
    };
    Ok(rec)
}
