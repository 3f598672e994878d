//! Label encoding, losses, full-batch gradient descent and the comparison of
//! trained outputs against the closed-form linearized prediction.

use faer::Mat;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{hex, Cell, Table, CLASSES};
use crate::error::{Result, RnfError};
use crate::network::NetworkModel;
use crate::seed::{child_rng, shuffle};
use crate::tangent::{max_eigenvalue, LinearizedState, TangentKernel};

/// `0.9` at the position of `class` (1-based), `−0.1` elsewhere.
pub fn encode_labels(class: u8) -> Result<[f64; CLASSES]> {
    if !(1..=CLASSES as u8).contains(&class) {
        return Err(RnfError::Config(format!("class {class} outside 1..={CLASSES}")));
    }
    let mut y = [-0.1; CLASSES];
    y[class as usize - 1] = 0.9;
    Ok(y)
}

/// Encoded targets, `N × 10`.
pub fn label_matrix(labels: &[u8]) -> Result<Mat<f64>> {
    let mut y = Mat::<f64>::zeros(labels.len(), CLASSES);
    for (i, &c) in labels.iter().enumerate() {
        for (k, v) in encode_labels(c)?.into_iter().enumerate() {
            y[(i, k)] = v;
        }
    }
    Ok(y)
}

fn check_same(f: &Mat<f64>, y: &Mat<f64>) -> Result<()> {
    if f.nrows() != y.nrows() || f.ncols() != y.ncols() {
        return Err(RnfError::Shape(format!(
            "outputs are {}x{}, targets {}x{}",
            f.nrows(),
            f.ncols(),
            y.nrows(),
            y.ncols()
        )));
    }
    Ok(())
}

fn sq_dist(f: &Mat<f64>, y: &Mat<f64>) -> f64 {
    (f - y).squared_norm_l2()
}

/// Training loss `‖f − Y‖²_F / (2N)`.
pub fn mse_loss(f: &Mat<f64>, y: &Mat<f64>) -> Result<f64> {
    check_same(f, y)?;
    Ok(sq_dist(f, y) / (2.0 * f.nrows().max(1) as f64))
}

/// Reported test loss: half the mean squared error over all `N·C` entries.
pub fn entry_loss(f: &Mat<f64>, y: &Mat<f64>) -> Result<f64> {
    check_same(f, y)?;
    Ok(sq_dist(f, y) / (2.0 * (f.nrows() * f.ncols()).max(1) as f64))
}

/// Predicted class (1-based) per row; ties go to the lowest index.
pub fn predicted_classes(f: &Mat<f64>) -> Vec<u8> {
    (0..f.nrows())
        .map(|i| {
            let mut best = 0;
            for k in 1..f.ncols() {
                if f[(i, k)] > f[(i, best)] {
                    best = k;
                }
            }
            best as u8 + 1
        })
        .collect()
}

pub fn accuracy(f: &Mat<f64>, labels: &[u8]) -> Result<f64> {
    if f.nrows() != labels.len() {
        return Err(RnfError::Shape(format!("{} predictions for {} labels", f.nrows(), labels.len())));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = predicted_classes(f).iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// How the learning rate is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EtaMode {
    /// `η = 2/λ_max(Θ̂₀)` on the training set.
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub eta: EtaMode,
    /// Approximate number of logged steps, spaced geometrically.
    pub log_points: usize,
    /// `None` for full batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub divergence_threshold: f64,
    pub eig_tol: f64,
    pub eig_max_iter: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1_000_000,
            eta: EtaMode::Auto,
            log_points: 60,
            batch_size: None,
            seed: 0,
            divergence_threshold: 1e6,
            eig_tol: 1e-10,
            eig_max_iter: 100_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(RnfError::Config("steps must be at least 1".into()));
        }
        if let EtaMode::Fixed(eta) = self.eta {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(RnfError::Config(format!("learning rate must be non-negative, got {eta}")));
            }
        }
        if self.batch_size == Some(0) {
            return Err(RnfError::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    /// Step 0, every step up to 10, then roughly `log_points` geometrically
    /// spaced steps up to and including `steps`; sorted and unique.
    pub fn log_schedule(&self) -> Vec<u64> {
        let mut out: Vec<u64> = (0..=self.steps.min(10)).collect();
        let n = self.log_points.max(2) as f64;
        let top = self.steps as f64;
        for k in 0..=self.log_points.max(2) {
            out.push(top.powf(k as f64 / n).round() as u64);
        }
        out.push(self.steps);
        out.sort_unstable();
        out.dedup();
        out.retain(|&s| s <= self.steps);
        out
    }
}

/// `2/λ_max` of a training kernel.
pub fn auto_eta(theta0: &TangentKernel, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let lambda = max_eigenvalue(theta0.entries.as_ref(), cfg.eig_tol, cfg.eig_max_iter)?;
    if !(lambda > 0.0) {
        return Err(RnfError::Numeric(format!("largest kernel eigenvalue is {lambda}")));
    }
    Ok((2.0 / lambda, lambda))
}

/// Fixed inputs whose outputs are traced during training.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    /// `M × d`.
    pub inputs: Mat<f64>,
    pub classes: Vec<u8>,
}

/// One example per class: the lowest index carrying it.
pub fn select_probes(inputs: &Mat<f64>, labels: &[u8]) -> ProbeSet {
    let mut rows = Vec::new();
    let mut classes = Vec::new();
    for c in 1..=CLASSES as u8 {
        if let Some(i) = labels.iter().position(|&l| l == c) {
            rows.push(i);
            classes.push(c);
        }
    }
    ProbeSet { inputs: Mat::from_fn(rows.len(), inputs.ncols(), |r, j| inputs[(rows[r], j)]), classes }
}

/// A labelled split, borrowed.
#[derive(Debug, Clone, Copy)]
pub struct Split<'a> {
    pub inputs: &'a Mat<f64>,
    pub labels: &'a [u8],
}

/// Logged training curves.
#[derive(Debug, Clone, Default)]
pub struct TrainingHistory {
    pub steps: Vec<u64>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub train_acc: Vec<f64>,
    pub val_acc: Vec<f64>,
    /// Full probe outputs (`M × C`) at each logged step.
    pub probe_outputs: Vec<Mat<f64>>,
    pub probe_classes: Vec<u8>,
    pub eta: f64,
    pub lambda_max: Option<f64>,
    /// SHA-256 of the final trainable parameters.
    pub final_params_hash: String,
}

impl TrainingHistory {
    /// Output coordinate of each probe's own class.
    pub fn probe_trace(&self, row: usize) -> Vec<f64> {
        let p = &self.probe_outputs[row];
        self.probe_classes.iter().enumerate().map(|(m, &c)| p[(m, c as usize - 1)]).collect()
    }

    /// Columns `step, train_loss, val_loss, train_acc, val_acc, probe_0..`.
    pub fn to_table(&self, name: &str) -> Table {
        let mut header = vec!["step", "train_loss", "val_loss", "train_acc", "val_acc"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        header.extend((0..self.probe_classes.len()).map(|m| format!("probe_{m}")));
        let mut t = Table { name: name.into(), header, rows: Vec::new() };
        for r in 0..self.steps.len() {
            let mut row: Vec<Cell> = vec![
                self.steps[r].into(),
                self.train_loss[r].into(),
                self.val_loss[r].into(),
                self.train_acc[r].into(),
                self.val_acc[r].into(),
            ];
            row.extend(self.probe_trace(r).into_iter().map(Cell::from));
            t.rows.push(row);
        }
        t
    }
}

pub fn params_hash(net: &NetworkModel) -> String {
    let mut h = Sha256::new();
    for l in 0..net.n_layers() {
        if let Some(p) = net.params(l) {
            for j in 0..p.n_out() {
                for i in 0..p.n_in() {
                    h.update(p.w_tilde[(i, j)].to_le_bytes());
                }
            }
            for b in &p.beta {
                h.update(b.to_le_bytes());
            }
        }
    }
    hex(&h.finalize())
}

/// Gradient descent on `‖f − Y‖²/(2N)` with learning rate `eta`.
///
/// Full batch unless `cfg.batch_size` is set. `cfg.eta` must already be
/// resolved; [`EtaMode::Auto`] is rejected here (see [`auto_eta`]).
pub fn sgd_train(
    net: &mut NetworkModel,
    train: Split<'_>,
    val: Split<'_>,
    probes: &ProbeSet,
    cfg: &TrainConfig,
) -> Result<TrainingHistory> {
    cfg.validate()?;
    let EtaMode::Fixed(eta) = cfg.eta else {
        return Err(RnfError::Config("resolve the automatic learning rate before training".into()));
    };
    let y_train = label_matrix(train.labels)?;
    let y_val = label_matrix(val.labels)?;
    if train.inputs.nrows() != y_train.nrows() || val.inputs.nrows() != y_val.nrows() {
        return Err(RnfError::Shape("inputs and labels disagree on the number of examples".into()));
    }
    let n = train.inputs.nrows();
    if n == 0 {
        return Err(RnfError::Config("empty training set".into()));
    }
    let schedule = cfg.log_schedule();
    let mut next_log = 0;
    let mut hist =
        TrainingHistory { probe_classes: probes.classes.clone(), eta, ..Default::default() };
    let xt = train.inputs.transpose().to_owned();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut batch_rng = child_rng(cfg.seed, "minibatch");

    for step in 0..=cfg.steps {
        let trace = net.forward_features(xt.clone())?;
        let f = trace.outputs();
        let loss = mse_loss(&f, &y_train)?;
        if !loss.is_finite() || loss > cfg.divergence_threshold {
            return Err(RnfError::Divergence { step, loss });
        }
        if next_log < schedule.len() && schedule[next_log] == step {
            let fv = net.predict(val.inputs.as_ref())?;
            hist.steps.push(step);
            hist.train_loss.push(loss);
            hist.train_acc.push(accuracy(&f, train.labels)?);
            hist.val_loss.push(if y_val.nrows() > 0 { mse_loss(&fv, &y_val)? } else { 0.0 });
            hist.val_acc.push(accuracy(&fv, val.labels)?);
            hist.probe_outputs.push(net.predict(probes.inputs.as_ref())?);
            next_log += 1;
        }
        if step == cfg.steps {
            break;
        }
        let grads = match cfg.batch_size {
            None => {
                let cot = (&f - &y_train) * faer::Scale(1.0 / n as f64);
                net.backward(&trace, cot.as_ref())?
            }
            Some(b) => {
                let b = b.min(n);
                let mut idx = Vec::with_capacity(b);
                while idx.len() < b {
                    if cursor == n {
                        shuffle(&mut batch_rng, &mut order);
                        cursor = 0;
                    }
                    idx.push(order[cursor]);
                    cursor += 1;
                }
                let mut cot = Mat::<f64>::zeros(n, f.ncols());
                for &i in &idx {
                    for k in 0..f.ncols() {
                        cot[(i, k)] += (f[(i, k)] - y_train[(i, k)]) / b as f64;
                    }
                }
                net.backward(&trace, cot.as_ref())?
            }
        };
        net.apply_update(&grads, eta)?;
    }
    hist.final_params_hash = params_hash(net);
    Ok(hist)
}

/// Per-step gap between trained and linearized outputs.
#[derive(Debug, Clone, Default)]
pub struct DynamicsReport {
    pub steps: Vec<u64>,
    /// Max absolute probe-output deviation.
    pub max_deviation: Vec<f64>,
    pub mean_deviation: Vec<f64>,
    /// Linearized training loss.
    pub linear_train_loss: Vec<f64>,
    /// `|L_sgd − L_lin|` on the training set.
    pub loss_deviation: Vec<f64>,
    /// Linearized probe outputs per step.
    pub linear_probe_outputs: Vec<Mat<f64>>,
}

impl DynamicsReport {
    /// Largest probe deviation over the horizon.
    pub fn horizon_max(&self) -> f64 {
        self.max_deviation.iter().copied().fold(0.0, f64::max)
    }

    pub fn to_table(&self, name: &str, probe_classes: &[u8]) -> Table {
        let mut header: Vec<String> =
            ["step", "max_deviation", "mean_deviation", "linear_train_loss", "loss_deviation"]
                .into_iter()
                .map(String::from)
                .collect();
        header.extend((0..probe_classes.len()).map(|m| format!("linear_probe_{m}")));
        let mut t = Table { name: name.into(), header, rows: Vec::new() };
        for r in 0..self.steps.len() {
            let mut row: Vec<Cell> = vec![
                self.steps[r].into(),
                self.max_deviation[r].into(),
                self.mean_deviation[r].into(),
                self.linear_train_loss[r].into(),
                self.loss_deviation[r].into(),
            ];
            let p = &self.linear_probe_outputs[r];
            row.extend(probe_classes.iter().enumerate().map(|(m, &c)| Cell::from(p[(m, c as usize - 1)])));
            t.rows.push(row);
        }
        t
    }
}

/// Compare a training history with the linearized prediction made from the
/// same initialization: `state` on the training set, `theta_probe_train`
/// (full block, probes × training set) and `f0_probe` for the probes.
pub fn compare_dynamics(
    history: &TrainingHistory,
    state: &LinearizedState,
    theta_probe_train: &TangentKernel,
    f0_probe: &Mat<f64>,
) -> Result<DynamicsReport> {
    if (history.eta - state.eta).abs() > 1e-12 * state.eta.abs() {
        return Err(RnfError::Config(format!(
            "learning rates differ: trained with {}, linearized with {}",
            history.eta, state.eta
        )));
    }
    if theta_probe_train.n_rows != history.probe_classes.len() {
        return Err(RnfError::Config("probe kernel does not match the traced probes".into()));
    }
    let mut rep = DynamicsReport::default();
    for (r, &step) in history.steps.iter().enumerate() {
        let t = step as f64;
        let lin = state.output(theta_probe_train, f0_probe, t)?;
        let sgd = &history.probe_outputs[r];
        if sgd.nrows() != lin.nrows() || sgd.ncols() != lin.ncols() {
            return Err(RnfError::Shape("probe output shapes differ".into()));
        }
        let diff = sgd - &lin;
        let count = (diff.nrows() * diff.ncols()).max(1) as f64;
        let (mut max, mut sum) = (0.0f64, 0.0);
        for j in 0..diff.ncols() {
            for i in 0..diff.nrows() {
                max = max.max(diff[(i, j)].abs());
                sum += diff[(i, j)].abs();
            }
        }
        let lin_loss = mse_loss(&state.train_output(t), state.y_train())?;
        rep.steps.push(step);
        rep.max_deviation.push(max);
        rep.mean_deviation.push(sum / count);
        rep.linear_train_loss.push(lin_loss);
        rep.loss_deviation.push((history.train_loss[r] - lin_loss).abs());
        rep.linear_probe_outputs.push(lin);
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_examples() {
        let y = encode_labels(1).unwrap();
        assert_eq!(y[0], 0.9);
        assert!(y[1..].iter().all(|&v| v == -0.1));
        for c in 1..=10 {
            assert!(encode_labels(c).unwrap().iter().sum::<f64>().abs() < 1e-15);
        }
        let (a, b) = (encode_labels(3).unwrap(), encode_labels(7).unwrap());
        let d: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
        assert!(encode_labels(0).is_err() && encode_labels(11).is_err());
    }

    #[test]
    fn loss_examples() {
        let y = Mat::from_fn(1, 1, |_, _| 0.0);
        let f = Mat::from_fn(1, 1, |_, _| 0.2);
        assert!((mse_loss(&f, &y).unwrap() - 0.02).abs() < 1e-16);
        assert_eq!(mse_loss(&y, &y).unwrap(), 0.0);
        let y = Mat::from_fn(4, 3, |i, k| (i + k) as f64);
        let f = Mat::from_fn(4, 3, |i, k| (i * k) as f64 * 0.3);
        let r = mse_loss(&f, &y).unwrap();
        let f2 = &y + (&f - &y) * faer::Scale(2.0);
        assert!((mse_loss(&f2, &y).unwrap() - 4.0 * r).abs() < 1e-12 * r);
        assert!((entry_loss(&f, &y).unwrap() * 3.0 - r).abs() < 1e-12 * r);
        assert!(mse_loss(&f, &Mat::zeros(3, 3)).is_err());
    }

    #[test]
    fn accuracy_ties_go_low() {
        let f = Mat::from_fn(2, 10, |i, k| if i == 0 { 1.0 } else { k as f64 });
        assert_eq!(predicted_classes(&f), vec![1, 10]);
        assert_eq!(accuracy(&f, &[1, 3]).unwrap(), 0.5);
    }

    #[test]
    fn schedule_is_sorted_and_bounded() {
        for steps in [1u64, 7, 100, 100_000] {
            let s = TrainConfig { steps, log_points: 40, ..Default::default() }.log_schedule();
            assert_eq!(s[0], 0);
            assert_eq!(*s.last().unwrap(), steps);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
        }
        assert!(TrainConfig { steps: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn probes_take_lowest_index_per_class() {
        let x = Mat::from_fn(5, 2, |i, _| i as f64);
        let p = select_probes(&x, &[3, 1, 3, 2, 1]);
        assert_eq!(p.classes, vec![1, 2, 3]);
        assert_eq!((p.inputs[(0, 0)], p.inputs[(1, 0)], p.inputs[(2, 0)]), (1.0, 3.0, 0.0));
    }
}
