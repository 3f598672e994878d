//! Empirical tangent kernels, linearized training dynamics and kernel
//! regression.
//!
//! Kernel rows and columns are indexed by `(example, class)` pairs laid out
//! as `i·C + k`. The kernel is assembled layer by layer from forward
//! activations and reverse-mode signals, without forming Jacobians:
//!
//! ```text
//! Θ((i,k),(j,k')) = Σ_l Σ_c δ^l_{ik,c} δ^l_{jk',c} · [ s_l² Σ_a R²_{ac} x_{ia} x_{ja} + σ_b² ]
//! ```
//!
//! with `s_l = σ_w/√n_in`. Unmasked layers collapse the bracket to
//! `s_l² x_i·x_j + σ_b²`, so their term is a Hadamard product of two Gram
//! matrices.

use std::sync::Arc;

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RnfError};
use crate::network::{Layer, NetworkModel};
use crate::par;

/// Which part of the vector-output kernel to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    /// All `(i,k),(j,k')` entries.
    #[default]
    Full,
    /// Entries with `k = k'` only; cross-class entries set to zero.
    BlockDiagonal,
    /// One scalar kernel per example pair: the trace over classes.
    Scalar,
}

/// Default cap on the number of kernel entries (1.5e8 doubles, 1.2 GB).
pub const DEFAULT_MAX_ENTRIES: usize = 150_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TangentKernel {
    pub n_rows: usize,
    pub n_cols: usize,
    pub classes: usize,
    pub mode: KernelMode,
    /// `(n_rows·C) × (n_cols·C)`, or `n_rows × n_cols` in scalar mode.
    pub entries: Mat<f64>,
}

impl TangentKernel {
    /// `C × C` block between examples `i` and `j` (full or block-diagonal modes).
    pub fn block(&self, i: usize, j: usize) -> Mat<f64> {
        let c = self.classes;
        match self.mode {
            KernelMode::Scalar => Mat::from_fn(1, 1, |_, _| self.entries[(i, j)]),
            _ => self.entries.submatrix(i * c, j * c, c, c).to_owned(),
        }
    }

    /// Trace of the `(i, j)` class block.
    pub fn trace_block(&self, i: usize, j: usize) -> f64 {
        match self.mode {
            KernelMode::Scalar => self.entries[(i, j)],
            _ => (0..self.classes).map(|k| self.entries[(i * self.classes + k, j * self.classes + k)]).sum(),
        }
    }

    /// Reduce to another mode. Reductions only go from more to less detail.
    pub fn to_mode(&self, mode: KernelMode) -> Result<TangentKernel> {
        let c = self.classes;
        let entries = match (self.mode, mode) {
            (a, b) if a == b => self.entries.clone(),
            (KernelMode::Full, KernelMode::BlockDiagonal) => Mat::from_fn(self.entries.nrows(), self.entries.ncols(), |r, s| {
                if r % c == s % c {
                    self.entries[(r, s)]
                } else {
                    0.0
                }
            }),
            (KernelMode::Full | KernelMode::BlockDiagonal, KernelMode::Scalar) => {
                Mat::from_fn(self.n_rows, self.n_cols, |i, j| self.trace_block(i, j))
            }
            (from, to) => return Err(RnfError::Config(format!("cannot convert a {from:?} kernel to {to:?}"))),
        };
        Ok(TangentKernel { n_rows: self.n_rows, n_cols: self.n_cols, classes: c, mode, entries })
    }

    /// Scalar kernel in the class-trace reduction.
    pub fn scalar(&self) -> Mat<f64> {
        Mat::from_fn(self.n_rows, self.n_cols, |i, j| self.trace_block(i, j))
    }

    /// Write `<stem>.bin` (little-endian column-major `f64`) and a JSON sidecar.
    pub fn save(&self, dir: &std::path::Path, stem: &str, meta: serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| RnfError::io(dir, e))?;
        let mut bytes = Vec::with_capacity(8 * self.entries.nrows() * self.entries.ncols());
        for j in 0..self.entries.ncols() {
            for i in 0..self.entries.nrows() {
                bytes.extend_from_slice(&self.entries[(i, j)].to_le_bytes());
            }
        }
        let bin = dir.join(format!("{stem}.bin"));
        std::fs::write(&bin, bytes).map_err(|e| RnfError::io(&bin, e))?;
        let sidecar = serde_json::json!({
            "schema": 1,
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
            "classes": self.classes,
            "mode": self.mode,
            "layout": "row index = example * classes + class; column-major f64 little endian",
            "meta": meta,
        });
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| RnfError::io(&json, e))
    }
}

/// `R² ≈ U·Vᵀ`; `v = None` means `U = R²` itself.
#[derive(Debug)]
struct MaskFactor {
    u: Mat<f64>,
    v: Option<Mat<f64>>,
}

impl MaskFactor {
    /// Truncated SVD of `R∘R` when it pays off; singular values below
    /// `1e−14·s_max` are dropped, which is below the rounding noise of the
    /// uncompressed product.
    fn new(mask: &Mat<f64>) -> Result<Self> {
        let r2 = Mat::from_fn(mask.nrows(), mask.ncols(), |i, j| mask[(i, j)] * mask[(i, j)]);
        let (n_in, n_out) = (r2.nrows(), r2.ncols());
        if n_in.min(n_out) < 32 {
            return Ok(Self { u: r2, v: None });
        }
        let svd = r2.thin_svd().map_err(|e| RnfError::Decomposition(format!("mask SVD failed: {e:?}")))?;
        let s = svd.S().column_vector();
        let top = s[0];
        let q = (0..s.nrows()).take_while(|&k| s[k] > 1e-14 * top).count().max(1);
        if q * (n_in + n_out) >= n_in * n_out / 2 {
            return Ok(Self { u: r2, v: None });
        }
        let u = Mat::from_fn(n_in, q, |i, k| svd.U()[(i, k)] * s[k]);
        let v = svd.V().subcols(0, q).to_owned();
        Ok(Self { u, v: Some(v) })
    }
}

#[derive(Debug, Clone)]
struct LayerFeatures {
    /// Layer input, `n_in × N`.
    x: Mat<f64>,
    /// Signals `∂f_k(x_i)/∂h`, `n_out × (N·C)`.
    delta: Mat<f64>,
    scale_sq: f64,
    bias_sq: f64,
    mask: Option<Arc<MaskFactor>>,
}

/// Per-layer activations and reverse-mode signals for one input set.
///
/// Built once per (network, inputs) and reused for every kernel block that
/// involves those inputs.
#[derive(Debug, Clone)]
pub struct TangentFeatures {
    n: usize,
    classes: usize,
    version: u64,
    layers: Vec<LayerFeatures>,
    outputs: Mat<f64>,
}

impl TangentFeatures {
    /// Features of `x` (`N × input_dim`).
    pub fn new(net: &NetworkModel, x: MatRef<'_, f64>) -> Result<Self> {
        Self::build(net, x, None)
    }

    /// Features of `x` reusing the mask factorizations of `other`, which must
    /// come from the same network.
    pub fn sharing(net: &NetworkModel, x: MatRef<'_, f64>, other: &TangentFeatures) -> Result<Self> {
        Self::build(net, x, Some(other))
    }

    fn build(net: &NetworkModel, x: MatRef<'_, f64>, other: Option<&TangentFeatures>) -> Result<Self> {
        let trace = net.forward(x)?;
        let n = trace.n_examples();
        let c = net.output_dim();
        let mut seed = Mat::<f64>::zeros(c, n * c);
        for m in 0..n * c {
            seed[(m % c, m)] = 1.0;
        }
        let mut signals = net.propagate(&trace, seed, |m| m / c)?;
        let mut layers = Vec::new();
        let mut dense_index = 0;
        for (l, layer) in net.layers().iter().enumerate() {
            let Layer::Dense { params, .. } = layer else { continue };
            let mask = match (&params.mask, other) {
                (None, _) => None,
                (Some(_), Some(o)) if o.version == net.version() && o.layers.len() > dense_index => {
                    o.layers[dense_index].mask.clone()
                }
                (Some(r), _) => Some(Arc::new(MaskFactor::new(r)?)),
            };
            layers.push(LayerFeatures {
                x: trace.inputs[l].clone(),
                delta: signals[l].take().expect("dense layer signal"),
                scale_sq: params.scale().powi(2),
                bias_sq: params.sigma_b.powi(2),
                mask,
            });
            dense_index += 1;
        }
        Ok(Self { n, classes: c, version: net.version(), layers, outputs: trace.outputs() })
    }

    pub fn n_examples(&self) -> usize {
        self.n
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Network outputs on these inputs, `N × C`.
    pub fn outputs(&self) -> &Mat<f64> {
        &self.outputs
    }
}

/// Kernel between two feature sets; `cols = None` gives the symmetric block
/// of `rows` with itself.
pub fn kernel_from_features(
    rows: &TangentFeatures,
    cols: Option<&TangentFeatures>,
    mode: KernelMode,
    max_entries: usize,
) -> Result<TangentKernel> {
    let symmetric = cols.is_none();
    let cols = cols.unwrap_or(rows);
    if rows.classes != cols.classes || rows.layers.len() != cols.layers.len() || rows.version != cols.version {
        return Err(RnfError::Shape("feature sets come from different networks".into()));
    }
    let c = rows.classes;
    let (nr, nc) = (rows.n * c, cols.n * c);
    if nr.saturating_mul(nc) > max_entries {
        return Err(RnfError::MemoryGuard { rows: nr, cols: nc, cap: max_entries });
    }
    let mut theta = Mat::<f64>::zeros(nr, nc);
    for (a, b) in rows.layers.iter().zip(&cols.layers) {
        match &a.mask {
            None => add_dense(&mut theta, a, b, c, symmetric),
            Some(mask) => add_masked(&mut theta, a, b, mask, c, symmetric),
        }
    }
    if symmetric {
        for j in 0..nc {
            for i in 0..j {
                theta[(i, j)] = theta[(j, i)];
            }
        }
    }
    let full = TangentKernel { n_rows: rows.n, n_cols: cols.n, classes: c, mode: KernelMode::Full, entries: theta };
    if mode == KernelMode::Full {
        Ok(full)
    } else {
        full.to_mode(mode)
    }
}

/// Empirical kernel `Θ(x_rows, x_cols)` at the current parameters.
pub fn empirical_ntk(
    net: &NetworkModel,
    x_rows: MatRef<'_, f64>,
    x_cols: Option<MatRef<'_, f64>>,
    mode: KernelMode,
) -> Result<TangentKernel> {
    let rows = TangentFeatures::new(net, x_rows)?;
    match x_cols {
        None => kernel_from_features(&rows, None, mode, DEFAULT_MAX_ENTRIES),
        Some(x) => {
            let cols = TangentFeatures::sharing(net, x, &rows)?;
            kernel_from_features(&rows, Some(&cols), mode, DEFAULT_MAX_ENTRIES)
        }
    }
}

const COL_CHUNK: usize = 1024;
const PAIR_CHUNK: usize = 8192;

/// Unmasked layer: `Θ += (s² XᵀX' + σ_b²) ∘ (ΔᵀΔ')` with the Gram expanded over classes.
fn add_dense(theta: &mut Mat<f64>, a: &LayerFeatures, b: &LayerFeatures, c: usize, symmetric: bool) {
    let mut g = Mat::<f64>::zeros(a.x.ncols(), b.x.ncols());
    matmul(g.as_mut(), Accum::Replace, a.x.transpose(), b.x.as_ref(), a.scale_sq, par());
    let nr = theta.nrows();
    let nc = theta.ncols();
    let mut start = 0;
    while start < nc {
        let width = COL_CHUNK.min(nc - start);
        // rows above the chunk are mirrored later in the symmetric case
        let row0 = if symmetric { start } else { 0 };
        let mut d = Mat::<f64>::zeros(nr - row0, width);
        matmul(
            d.as_mut(),
            Accum::Replace,
            a.delta.subcols(row0, nr - row0).transpose(),
            b.delta.subcols(start, width),
            1.0,
            par(),
        );
        for jj in 0..width {
            let col = start + jj;
            let je = col / c;
            for ii in 0..nr - row0 {
                let row = row0 + ii;
                theta[(row, col)] += (g[(row / c, je)] + a.bias_sq) * d[(ii, jj)];
            }
        }
        start += width;
    }
}

/// Masked layer: per example pair, `G_ij = s² R²ᵀ(x_i ∘ x'_j) + σ_b²` over the
/// output neurons, then `Θ_(i·),(j·) += Δ_iᵀ diag(G_ij) Δ'_j`.
fn add_masked(theta: &mut Mat<f64>, a: &LayerFeatures, b: &LayerFeatures, mask: &MaskFactor, c: usize, symmetric: bool) {
    let (na, nb) = (a.x.ncols(), b.x.ncols());
    let n_in = a.x.nrows();
    let n_out = a.delta.nrows();
    // pixels that are zero on either side contribute nothing
    let nonzero = |m: &Mat<f64>, p: usize| (0..m.ncols()).any(|j| m[(p, j)] != 0.0);
    let active: Vec<usize> = (0..n_in).filter(|&p| nonzero(&a.x, p) && nonzero(&b.x, p)).collect();
    let n_act = active.len();
    let u_act = Mat::from_fn(n_act, mask.u.ncols(), |t, k| mask.u[(active[t], k)]);
    let xb = Mat::from_fn(nb, n_act, |j, t| b.x[(active[t], j)]);

    let mut i0 = 0;
    let mut bi = Mat::<f64>::zeros(n_out, nb * c);
    while i0 < na {
        // rows·span ≤ PAIR_CHUNK, where span grows with the chunk when symmetric
        let rows = if symmetric {
            let i0f = i0 as f64;
            ((-i0f + (i0f * i0f + 4.0 * PAIR_CHUNK as f64).sqrt()) / 2.0) as usize
        } else {
            PAIR_CHUNK / nb
        }
        .clamp(1, na - i0);
        let i1 = i0 + rows;
        let span = if symmetric { i1 } else { nb };
        let pairs = rows * span;

        let mut p = Mat::<f64>::zeros(pairs, n_act);
        for t in 0..n_act {
            let pix = active[t];
            for ii in 0..rows {
                let xa = a.x[(pix, i0 + ii)];
                for j in 0..span {
                    p[(ii * span + j, t)] = xa * xb[(j, t)];
                }
            }
        }
        let mut z = Mat::<f64>::zeros(pairs, u_act.ncols());
        matmul(z.as_mut(), Accum::Replace, p.as_ref(), u_act.as_ref(), 1.0, par());
        drop(p);
        let mut gt = match &mask.v {
            Some(v) => {
                let mut gt = Mat::<f64>::zeros(n_out, pairs);
                matmul(gt.as_mut(), Accum::Replace, v.as_ref(), z.transpose(), 1.0, par());
                gt
            }
            None => z.transpose().to_owned(),
        };
        drop(z);
        for col in gt.col_iter_mut() {
            for v in col.iter_mut() {
                *v = a.scale_sq * *v + a.bias_sq;
            }
        }

        for ii in 0..rows {
            let i = i0 + ii;
            for j in 0..span {
                let g = gt.col(ii * span + j);
                for k in 0..c {
                    let m = j * c + k;
                    let src = b.delta.col(m);
                    let mut dst = bi.col_mut(m);
                    for r in 0..n_out {
                        dst[r] = g[r] * src[r];
                    }
                }
            }
            matmul(
                theta.submatrix_mut(i * c, 0, c, span * c),
                Accum::Add,
                a.delta.subcols(i * c, c).transpose(),
                bi.subcols(0, span * c),
                1.0,
                par(),
            );
        }
        i0 = i1;
    }
}

/// Dominant eigenvalue of a symmetric PSD matrix by power iteration.
///
/// Stops when the Rayleigh quotient changes by less than `tol` relatively.
pub fn max_eigenvalue(theta: MatRef<'_, f64>, tol: f64, max_iter: usize) -> Result<f64> {
    let n = theta.nrows();
    if n == 0 || theta.ncols() != n {
        return Err(RnfError::Shape(format!("expected a non-empty square matrix, got {}x{}", n, theta.ncols())));
    }
    // deterministic start with no special alignment
    let mut v = Mat::from_fn(n, 1, |i, _| 1.0 + 0.5 * ((i as f64 + 1.0) * 0.618_033_988_749_895).fract());
    let norm = v.norm_l2();
    v /= faer::Scale(norm);
    let mut w = Mat::<f64>::zeros(n, 1);
    let mut lambda = 0.0;
    let mut change = f64::INFINITY;
    for _ in 0..max_iter {
        matmul(w.as_mut(), Accum::Replace, theta, v.as_ref(), 1.0, par());
        let next: f64 = (0..n).map(|i| v[(i, 0)] * w[(i, 0)]).sum();
        let wn = w.norm_l2();
        if wn == 0.0 {
            return Ok(0.0);
        }
        change = (next - lambda).abs() / next.abs().max(f64::MIN_POSITIVE);
        lambda = next;
        v = &w * faer::Scale(1.0 / wn);
        if change < tol {
            return Ok(lambda);
        }
    }
    Err(RnfError::NoConvergence { iterations: max_iter, residual: change })
}

/// How the closed-form dynamics map step counts to time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    /// Gradient flow, `exp(−a·λ·t)`.
    #[default]
    Continuous,
    /// Full-batch gradient descent on the linearized model, `(1 − a·λ)^t`.
    Discrete,
}

/// Eigendecomposed training kernel and the initial residual.
#[derive(Debug, Clone)]
pub struct LinearizedState {
    eigenvalues: Vec<f64>,
    eigenvectors: Mat<f64>,
    /// `Vᵀ(f0(X) − Y)`.
    residual_coeffs: Vec<f64>,
    f0_train: Mat<f64>,
    y_train: Mat<f64>,
    pub eta: f64,
    pub n_train: usize,
    pub time_mode: TimeMode,
    ridge: f64,
}

impl LinearizedState {
    /// `theta0` must be the full symmetric training kernel; `f0_train` and
    /// `y_train` are `N × C`.
    pub fn new(theta0: &TangentKernel, f0_train: &Mat<f64>, y_train: &Mat<f64>, eta: f64, time_mode: TimeMode) -> Result<Self> {
        if theta0.mode != KernelMode::Full || theta0.n_rows != theta0.n_cols {
            return Err(RnfError::Config("linearized dynamics need the full square training kernel".into()));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(RnfError::Config(format!("learning rate must be positive, got {eta}")));
        }
        let n = theta0.n_rows;
        let c = theta0.classes;
        check_nc(f0_train, n, c, "f0_train")?;
        check_nc(y_train, n, c, "y_train")?;
        let evd = theta0
            .entries
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| RnfError::Decomposition(format!("kernel eigendecomposition failed: {e:?}")))?;
        let eigenvalues: Vec<f64> = evd.S().column_vector().iter().copied().collect();
        let eigenvectors = evd.U().to_owned();
        let r = flatten(f0_train) - flatten(y_train);
        let mut coeffs = Mat::<f64>::zeros(n * c, 1);
        matmul(coeffs.as_mut(), Accum::Replace, eigenvectors.transpose(), r.as_ref(), 1.0, par());
        let mean_diag = (0..n * c).map(|i| theta0.entries[(i, i)]).sum::<f64>() / (n * c) as f64;
        Ok(Self {
            eigenvalues,
            eigenvectors,
            residual_coeffs: coeffs.col(0).iter().copied().collect(),
            f0_train: f0_train.clone(),
            y_train: y_train.clone(),
            eta,
            n_train: n,
            time_mode,
            ridge: 1e-8 * mean_diag,
        })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    fn rate(&self) -> f64 {
        self.eta / self.n_train as f64
    }

    /// Decay `1 − e(λ, t)` of each eigen-mode of the residual.
    fn settled(&self, lambda: f64, t: f64) -> f64 {
        if t.is_infinite() {
            return lambda / (lambda + self.ridge);
        }
        let a = self.rate();
        match self.time_mode {
            TimeMode::Continuous => -(-a * lambda * t).exp_m1(),
            TimeMode::Discrete => -(t * (-a * lambda).ln_1p()).exp_m1(),
        }
    }

    /// `φ(λ) = settled(λ)/λ`, continuous at `λ = 0`.
    fn phi(&self, lambda: f64, t: f64) -> f64 {
        if t.is_infinite() {
            return 1.0 / (lambda + self.ridge);
        }
        if lambda.abs() < 1e-300 {
            return self.rate() * t;
        }
        self.settled(lambda, t) / lambda
    }

    /// Predicted training outputs at time `t` (`N × C`).
    pub fn train_output(&self, t: f64) -> Mat<f64> {
        let weights: Vec<f64> =
            self.eigenvalues.iter().zip(&self.residual_coeffs).map(|(&l, &r)| self.settled(l, t) * r).collect();
        let corr = &self.eigenvectors * Mat::from_fn(weights.len(), 1, |i, _| weights[i]);
        let f = flatten(&self.f0_train) - corr;
        unflatten(&f, self.n_train, self.f0_train.ncols())
    }

    /// Predicted outputs at time `t` on inputs with kernel block
    /// `theta_test_train` (`M·C × N·C`, full mode) and initial outputs `f0_test` (`M × C`).
    pub fn output(&self, theta_test_train: &TangentKernel, f0_test: &Mat<f64>, t: f64) -> Result<Mat<f64>> {
        if theta_test_train.mode != KernelMode::Full || theta_test_train.n_cols != self.n_train {
            return Err(RnfError::Shape("test kernel must be a full block against the training set".into()));
        }
        let m = theta_test_train.n_rows;
        let c = theta_test_train.classes;
        check_nc(f0_test, m, c, "f0_test")?;
        if !(t >= 0.0) {
            return Err(RnfError::Config(format!("time must be non-negative, got {t}")));
        }
        let weights = Mat::from_fn(self.eigenvalues.len(), 1, |i, _| self.phi(self.eigenvalues[i], t) * self.residual_coeffs[i]);
        let coeffs = &self.eigenvectors * weights;
        let corr = &theta_test_train.entries * coeffs;
        Ok(unflatten(&(flatten(f0_test) - corr), m, c))
    }

    pub fn y_train(&self) -> &Mat<f64> {
        &self.y_train
    }
}

/// Result of kernel regression.
#[derive(Debug, Clone)]
pub struct Regression {
    /// Predictions, `M × C`.
    pub prediction: Mat<f64>,
    /// Relative ridge `ε` actually used (multiplies the mean kernel diagonal).
    pub ridge: f64,
}

/// Cholesky factorization of `Θ + ε·mean(diag)·I`, escalating `ε` from 1e−8
/// by ×10 up to 1e−4.
pub struct RidgeSolver {
    llt: faer::linalg::solvers::Llt<f64>,
    pub ridge: f64,
}

impl RidgeSolver {
    pub fn new(theta: MatRef<'_, f64>) -> Result<Self> {
        let n = theta.nrows();
        if n == 0 || theta.ncols() != n {
            return Err(RnfError::Shape("training kernel must be square".into()));
        }
        let mean_diag = (0..n).map(|i| theta[(i, i)]).sum::<f64>() / n as f64;
        let mut eps = 1e-8;
        while eps <= 1e-4 * 1.000_001 {
            let mut m = theta.to_owned();
            for i in 0..n {
                m[(i, i)] += eps * mean_diag;
            }
            if let Ok(llt) = m.llt(Side::Lower) {
                return Ok(Self { llt, ridge: eps });
            }
            eps *= 10.0;
        }
        Err(RnfError::Decomposition("training kernel is not positive definite even with ridge 1e-4".into()))
    }

    pub fn solve(&self, rhs: MatRef<'_, f64>) -> Mat<f64> {
        use faer::linalg::solvers::Solve;
        self.llt.solve(rhs)
    }
}

/// `f* = Θ(x', X)·Θ(X, X)⁻¹·Y`.
///
/// Full and block-diagonal kernels regress the flattened `N·C` targets;
/// scalar kernels regress each class column with the shared `N × N` kernel.
pub fn ntk_regression(theta_test_train: &TangentKernel, theta_train_train: &TangentKernel, y: &Mat<f64>) -> Result<Regression> {
    let solver = RidgeSolver::new(theta_train_train.entries.as_ref())?;
    regress_with(&solver, theta_test_train, theta_train_train.n_rows, y)
}

/// Regression against a prefactorized training kernel.
pub fn regress_with(solver: &RidgeSolver, theta_test_train: &TangentKernel, n_train: usize, y: &Mat<f64>) -> Result<Regression> {
    let c = y.ncols();
    if y.nrows() != n_train || theta_test_train.n_cols != n_train {
        return Err(RnfError::Shape("targets and kernel disagree on the training size".into()));
    }
    let m = theta_test_train.n_rows;
    let prediction = match theta_test_train.mode {
        KernelMode::Scalar => {
            let alpha = solver.solve(y.as_ref());
            &theta_test_train.entries * alpha
        }
        _ => {
            let alpha = solver.solve(flatten(y).as_ref());
            unflatten(&(&theta_test_train.entries * alpha), m, c)
        }
    };
    Ok(Regression { prediction, ridge: solver.ridge })
}

/// `N × C` → `N·C × 1` in `(example, class)` order.
pub fn flatten(m: &Mat<f64>) -> Mat<f64> {
    let c = m.ncols();
    Mat::from_fn(m.nrows() * c, 1, |r, _| m[(r / c, r % c)])
}

pub fn unflatten(v: &Mat<f64>, n: usize, c: usize) -> Mat<f64> {
    Mat::from_fn(n, c, |i, k| v[(i * c + k, 0)])
}

fn check_nc(m: &Mat<f64>, n: usize, c: usize, name: &str) -> Result<()> {
    if m.nrows() != n || m.ncols() != c {
        return Err(RnfError::Shape(format!("{name} is {}x{}, expected {n}x{c}", m.nrows(), m.ncols())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_iteration_examples() {
        let id = Mat::<f64>::identity(6, 6);
        assert!((max_eigenvalue(id.as_ref(), 1e-6, 10_000).unwrap() - 1.0).abs() < 1e-12);
        let d = Mat::from_fn(3, 3, |i, j| if i == j { [1.0, 2.0, 5.0][i] } else { 0.0 });
        assert!((max_eigenvalue(d.as_ref(), 1e-6, 10_000).unwrap() - 5.0).abs() < 1e-5);
    }

    #[test]
    fn regression_with_identity_kernel() {
        let n = 4;
        let c = 2;
        let train = TangentKernel { n_rows: n, n_cols: n, classes: c, mode: KernelMode::Full, entries: Mat::identity(n * c, n * c) };
        let cross = TangentKernel { n_rows: 1, n_cols: n, classes: c, mode: KernelMode::Full, entries: Mat::zeros(c, n * c) };
        let y = Mat::from_fn(n, c, |i, k| (i + k) as f64);
        let out = ntk_regression(&cross, &train, &y).unwrap();
        assert_eq!(out.prediction.norm_l2(), 0.0);
        assert_eq!(out.ridge, 1e-8);
    }

    #[test]
    fn mode_reductions() {
        let c = 2;
        let e = Mat::from_fn(4, 4, |i, j| (i * 4 + j) as f64);
        let k = TangentKernel { n_rows: 2, n_cols: 2, classes: c, mode: KernelMode::Full, entries: e };
        let bd = k.to_mode(KernelMode::BlockDiagonal).unwrap();
        assert_eq!(bd.entries[(0, 1)], 0.0);
        assert_eq!(bd.entries[(0, 2)], 2.0);
        let s = k.to_mode(KernelMode::Scalar).unwrap();
        assert_eq!(s.entries[(0, 1)], 2.0 + 7.0);
        assert!(s.to_mode(KernelMode::Full).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let m = Mat::from_fn(3, 2, |i, j| (10 * i + j) as f64);
        let f = flatten(&m);
        assert_eq!(f[(3, 0)], 11.0);
        assert_eq!(unflatten(&f, 3, 2), m);
    }
}
