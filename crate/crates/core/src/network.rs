//! The discretized network: architecture builder, forward pass and
//! reverse-mode differentiation.
//!
//! Hidden layers compute `h = x·W + b`, `x' = φ(h)`; the last layer is a
//! linear readout with one column per class. Internally activations are kept
//! feature-major (`width × N`).

use std::io::{Read, Write};
use std::path::Path;

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceSpec, FactorKind};
use crate::error::{Result, RnfError};
use crate::fields::{receptive_mask, sample_bias, sample_correlated_weights, ReceptiveFieldSpec, WeightBundle};
use crate::par;
use crate::seed::child_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, h: f64) -> f64 {
        match self {
            Activation::Relu => h.max(0.0),
            Activation::Identity => h,
        }
    }

    /// Derivative, with ReLU'(0) = 0.
    #[inline]
    fn slope(self, h: f64) -> f64 {
        match self {
            Activation::Relu => f64::from(u8::from(h > 0.0)),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    MaskedDense { n_in: usize, n_out: usize, rf: ReceptiveFieldSpec, cov: CovarianceSpec, activation: Activation },
    MaxPool { n_in: usize, window: usize, stride: usize },
}

impl LayerSpec {
    pub fn dense(n_in: usize, n_out: usize, activation: Activation) -> Self {
        LayerSpec::MaskedDense {
            n_in,
            n_out,
            rf: ReceptiveFieldSpec::none(),
            cov: CovarianceSpec::independent(),
            activation,
        }
    }

    pub fn n_in(&self) -> usize {
        match self {
            LayerSpec::MaskedDense { n_in, .. } | LayerSpec::MaxPool { n_in, .. } => *n_in,
        }
    }

    pub fn n_out(&self) -> usize {
        match self {
            LayerSpec::MaskedDense { n_out, .. } => *n_out,
            LayerSpec::MaxPool { n_in, window, stride } => (n_in - window) / stride + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::MaskedDense { n_in, n_out, rf, cov, .. } => {
                if *n_in == 0 || *n_out == 0 {
                    return Err(RnfError::Config("dense layer dimensions must be positive".into()));
                }
                rf.validate()?;
                cov.validate()
            }
            LayerSpec::MaxPool { n_in, window, stride } => {
                if *window == 0 || *stride == 0 || window > n_in {
                    return Err(RnfError::Config(format!(
                        "pooling window {window} / stride {stride} invalid for width {n_in}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Scale parameters shared by every model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaParams {
    /// Receptive-field width of the first layer; model default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_r: Option<f64>,
    /// Correlation scale of the first layer; model default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_s: Option<f64>,
    #[serde(default = "default_sigma_w")]
    pub sigma_w: f64,
    #[serde(default = "default_sigma_b")]
    pub sigma_b: f64,
    #[serde(default = "default_nu")]
    pub nu: f64,
}

fn default_sigma_w() -> f64 {
    1.0
}
fn default_sigma_b() -> f64 {
    0.1
}
fn default_nu() -> f64 {
    0.5
}

impl Default for SigmaParams {
    fn default() -> Self {
        Self { sigma_r: None, sigma_s: None, sigma_w: 1.0, sigma_b: 0.1, nu: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_id: u8,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default)]
    pub sigma: SigmaParams,
    #[serde(default = "default_pool")]
    pub pool_window: usize,
    #[serde(default = "default_pool")]
    pub pool_stride: usize,
    #[serde(default)]
    pub factor: FactorKind,
}

fn default_input_dim() -> usize {
    784
}
fn default_width() -> usize {
    2048
}
fn default_classes() -> usize {
    10
}
fn default_pool() -> usize {
    2
}

impl ModelConfig {
    pub fn new(model_id: u8) -> Self {
        Self {
            model_id,
            input_dim: 784,
            width: 2048,
            classes: 10,
            sigma: SigmaParams::default(),
            pool_window: 2,
            pool_stride: 2,
            factor: FactorKind::Auto,
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn with_receptive(mut self, sigma_r: f64, sigma_s: f64) -> Self {
        self.sigma.sigma_r = Some(sigma_r);
        self.sigma.sigma_s = Some(sigma_s);
        self
    }

    /// `(σ_r, σ_s)` of the first layer, falling back to the per-model defaults.
    pub fn receptive(&self) -> (f64, f64) {
        let (r, s) = default_receptive(self.model_id);
        (self.sigma.sigma_r.unwrap_or(r), self.sigma.sigma_s.unwrap_or(s))
    }

    /// Layer list including the readout.
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        if !(1..=5).contains(&self.model_id) {
            return Err(RnfError::Config(format!("model id must be in 1..=5, got {}", self.model_id)));
        }
        if self.width == 0 || self.input_dim == 0 || self.classes == 0 {
            return Err(RnfError::Config("input, width and class counts must be positive".into()));
        }
        let (sigma_r, sigma_s) = self.receptive();
        let (d, w) = (self.input_dim, self.width);
        let relu = Activation::Relu;
        let first = |rf, cov| LayerSpec::MaskedDense { n_in: d, n_out: w, rf, cov, activation: relu };
        let mut layers = match self.model_id {
            1 => vec![first(ReceptiveFieldSpec::gaussian(sigma_r), CovarianceSpec::gaussian(sigma_s))],
            2 => vec![first(ReceptiveFieldSpec::gaussian(sigma_r), CovarianceSpec::gaussian(sigma_s))],
            3 => vec![first(ReceptiveFieldSpec::mexican_hat(sigma_r), CovarianceSpec::gaussian(sigma_s))],
            4 => vec![first(ReceptiveFieldSpec::gaussian(sigma_r), CovarianceSpec::matern(sigma_s, self.sigma.nu))],
            _ => vec![LayerSpec::dense(d, w, relu)],
        };
        if self.model_id == 2 {
            let pool = LayerSpec::MaxPool { n_in: w, window: self.pool_window, stride: self.pool_stride };
            pool.validate()?;
            let pooled = pool.n_out();
            layers.push(pool);
            layers.push(LayerSpec::dense(pooled, w, relu));
        } else {
            layers.push(LayerSpec::dense(w, w, relu));
            layers.push(LayerSpec::dense(w, w, relu));
        }
        layers.push(LayerSpec::dense(w, self.classes, Activation::Identity));
        Ok(layers)
    }
}

/// Per-model `(σ_r, σ_s)` defaults.
pub fn default_receptive(model_id: u8) -> (f64, f64) {
    match model_id {
        3 => (0.01, 0.01),
        _ => (0.5, 0.01),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layer {
    Dense { params: WeightBundle, activation: Activation },
    Pool { window: usize, stride: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    config: Option<ModelConfig>,
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    seed: u64,
    version: u64,
}

/// Activations recorded by [`NetworkModel::forward`]; all matrices are
/// feature-major (`width × N`).
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub(crate) version: u64,
    /// Layer inputs: `inputs[l]` feeds layer `l`.
    pub inputs: Vec<Mat<f64>>,
    /// Pre-activations of dense layers (`None` for pooling layers).
    pub pre: Vec<Option<Mat<f64>>>,
    /// Argmax indices of pooling layers, `n_out × N`.
    pub argmax: Vec<Option<Vec<usize>>>,
    /// Readout, `C × N`.
    pub output: Mat<f64>,
}

impl ForwardTrace {
    pub fn n_examples(&self) -> usize {
        self.output.ncols()
    }

    /// Outputs as `N × C`.
    pub fn outputs(&self) -> Mat<f64> {
        self.output.transpose().to_owned()
    }

    /// Post-activation of layer `l` (the input of layer `l + 1`).
    pub fn activation(&self, l: usize) -> MatRef<'_, f64> {
        if l + 1 < self.inputs.len() {
            self.inputs[l + 1].as_ref()
        } else {
            self.output.as_ref()
        }
    }
}

/// Gradients with respect to the trainable tensors, indexed by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_tilde: Vec<Option<Mat<f64>>>,
    pub beta: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Squared Euclidean norm over all entries.
    pub fn norm_sq(&self) -> f64 {
        let w: f64 = self.w_tilde.iter().flatten().map(|g| g.norm_l2().powi(2)).sum();
        let b: f64 = self.beta.iter().flatten().flat_map(|v| v.iter()).map(|v| v * v).sum();
        w + b
    }
}

/// Max pooling over a 1-D signal; ties go to the lowest index.
pub fn max_pool_forward(x: &[f64], window: usize, stride: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if window == 0 || stride == 0 || window > x.len() {
        return Err(RnfError::Config(format!("pooling window {window} / stride {stride} invalid for width {}", x.len())));
    }
    let n_out = (x.len() - window) / stride + 1;
    let mut out = Vec::with_capacity(n_out);
    let mut idx = Vec::with_capacity(n_out);
    for k in 0..n_out {
        let start = k * stride;
        let mut best = start;
        for j in start + 1..start + window {
            if x[j] > x[best] {
                best = j;
            }
        }
        out.push(x[best]);
        idx.push(best);
    }
    Ok((out, idx))
}

impl NetworkModel {
    /// Build one of the five reference architectures.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let specs = config.layer_specs()?;
        let mut net = Self::from_specs(specs, config.sigma.sigma_w, config.sigma.sigma_b, config.factor, seed)?;
        net.config = Some(config.clone());
        Ok(net)
    }

    /// Build an arbitrary stack. Layer `l` draws its weights from the stream
    /// `"layer{l}/weights"` and its bias from `"layer{l}/bias"`.
    pub fn from_specs(specs: Vec<LayerSpec>, sigma_w: f64, sigma_b: f64, factor: FactorKind, seed: u64) -> Result<Self> {
        check_chain(&specs)?;
        let layers = specs
            .iter()
            .enumerate()
            .map(|(l, spec)| match spec {
                LayerSpec::MaskedDense { n_in, n_out, rf, cov, activation } => {
                    let mut rng = child_rng(seed, &format!("layer{l}/weights"));
                    let mut params = sample_correlated_weights(*n_in, *n_out, cov, rf, sigma_w, factor, &mut rng)?;
                    let mut rng = child_rng(seed, &format!("layer{l}/bias"));
                    params.beta = sample_bias(*n_out, 1.0, &mut rng);
                    params.sigma_b = sigma_b;
                    params.refresh();
                    Ok(Layer::Dense { params, activation: *activation })
                }
                LayerSpec::MaxPool { window, stride, .. } => Ok(Layer::Pool { window: *window, stride: *stride }),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config: None, specs, layers, seed, version: 0 })
    }

    /// Assemble a network from explicit parameters, one entry per spec
    /// (`None` for pooling layers).
    pub fn from_parts(specs: Vec<LayerSpec>, params: Vec<Option<WeightBundle>>, seed: u64) -> Result<Self> {
        check_chain(&specs)?;
        if params.len() != specs.len() {
            return Err(RnfError::Shape("one parameter slot per layer is required".into()));
        }
        let layers = specs
            .iter()
            .zip(params)
            .map(|(spec, p)| match (spec, p) {
                (LayerSpec::MaskedDense { n_in, n_out, activation, .. }, Some(params)) => {
                    if params.n_in() != *n_in || params.n_out() != *n_out {
                        return Err(RnfError::Shape(format!(
                            "parameters are {}x{}, spec is {n_in}x{n_out}",
                            params.n_in(),
                            params.n_out()
                        )));
                    }
                    Ok(Layer::Dense { params, activation: *activation })
                }
                (LayerSpec::MaxPool { window, stride, .. }, None) => Ok(Layer::Pool { window: *window, stride: *stride }),
                _ => Err(RnfError::Shape("parameter slot does not match layer kind".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config: None, specs, layers, seed, version: 0 })
    }

    pub fn config(&self) -> Option<&ModelConfig> {
        self.config.as_ref()
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Incremented on every parameter update.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].n_in()
    }

    pub fn output_dim(&self) -> usize {
        self.specs.last().map_or(0, LayerSpec::n_out)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Parameters of layer `l` if it is dense.
    pub fn params(&self, l: usize) -> Option<&WeightBundle> {
        match &self.layers[l] {
            Layer::Dense { params, .. } => Some(params),
            Layer::Pool { .. } => None,
        }
    }

    /// Mutable access; bumps the version so that older traces are rejected.
    /// Call [`WeightBundle::refresh`] after editing the trainable tensors.
    pub fn params_mut(&mut self, l: usize) -> Option<&mut WeightBundle> {
        self.version += 1;
        match &mut self.layers[l] {
            Layer::Dense { params, .. } => Some(params),
            Layer::Pool { .. } => None,
        }
    }

    pub(crate) fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// `Σ (n_in·n_out + n_out)` over dense layers, readout included.
    pub fn parameter_count(&self) -> usize {
        self.specs
            .iter()
            .map(|s| match s {
                LayerSpec::MaskedDense { n_in, n_out, .. } => n_in * n_out + n_out,
                LayerSpec::MaxPool { .. } => 0,
            })
            .sum()
    }

    /// Forward pass on `N × input_dim` data.
    pub fn forward(&self, x: MatRef<'_, f64>) -> Result<ForwardTrace> {
        if x.ncols() != self.input_dim() {
            return Err(RnfError::Shape(format!("input has {} features, network expects {}", x.ncols(), self.input_dim())));
        }
        self.forward_features(x.transpose().to_owned())
    }

    /// Forward pass on feature-major data (`input_dim × N`).
    pub fn forward_features(&self, xt: Mat<f64>) -> Result<ForwardTrace> {
        if xt.nrows() != self.input_dim() {
            return Err(RnfError::Shape(format!("input has {} features, network expects {}", xt.nrows(), self.input_dim())));
        }
        let n = xt.ncols();
        let mut inputs = vec![xt];
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut argmax = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x = inputs.last().expect("input present");
            match layer {
                Layer::Dense { params, activation } => {
                    let mut h = Mat::<f64>::zeros(params.n_out(), n);
                    matmul(h.as_mut(), Accum::Replace, params.w().transpose(), x.as_ref(), 1.0, par());
                    let b = params.b();
                    for j in 0..n {
                        let col = h.col_mut(j).try_as_col_major_mut().expect("contiguous").as_slice_mut();
                        for (v, bias) in col.iter_mut().zip(b) {
                            *v += bias;
                        }
                    }
                    let out = Mat::from_fn(h.nrows(), n, |i, j| activation.apply(h[(i, j)]));
                    pre.push(Some(h));
                    argmax.push(None);
                    inputs.push(out);
                }
                Layer::Pool { window, stride } => {
                    let n_out = (x.nrows() - window) / stride + 1;
                    let mut out = Mat::<f64>::zeros(n_out, n);
                    let mut idx = vec![0usize; n_out * n];
                    for j in 0..n {
                        let col = x.col(j).try_as_col_major().expect("contiguous").as_slice();
                        let (v, arg) = max_pool_forward(col, *window, *stride)?;
                        for k in 0..n_out {
                            out[(k, j)] = v[k];
                            idx[j * n_out + k] = arg[k];
                        }
                    }
                    pre.push(None);
                    argmax.push(Some(idx));
                    inputs.push(out);
                }
            }
        }
        let output = inputs.pop().expect("output present");
        Ok(ForwardTrace { version: self.version, inputs, pre, argmax, output })
    }

    /// Outputs `N × C`.
    pub fn predict(&self, x: MatRef<'_, f64>) -> Result<Mat<f64>> {
        Ok(self.forward(x)?.outputs())
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        if trace.version != self.version {
            return Err(RnfError::StaleTrace { trace: trace.version, network: self.version });
        }
        Ok(())
    }

    /// Reverse pass from a readout cotangent `seed` (`C × M`), where column
    /// `m` belongs to example `example_of(m)`. Returns, for each dense layer,
    /// the signal `∂/∂h` (`n_out × M`).
    pub(crate) fn propagate(
        &self,
        trace: &ForwardTrace,
        seed: Mat<f64>,
        example_of: impl Fn(usize) -> usize,
    ) -> Result<Vec<Option<Mat<f64>>>> {
        self.check_trace(trace)?;
        let m = seed.ncols();
        let mut signals: Vec<Option<Mat<f64>>> = vec![None; self.layers.len()];
        // cotangent of the current layer's output
        let mut upstream = seed;
        for l in (0..self.layers.len()).rev() {
            match &self.layers[l] {
                Layer::Dense { params, activation } => {
                    let h = trace.pre[l].as_ref().expect("dense layer has pre-activation");
                    let mut delta = upstream;
                    if *activation != Activation::Identity {
                        for c in 0..m {
                            let e = example_of(c);
                            for r in 0..delta.nrows() {
                                delta[(r, c)] *= activation.slope(h[(r, e)]);
                            }
                        }
                    }
                    if l > 0 {
                        let mut down = Mat::<f64>::zeros(params.n_in(), m);
                        matmul(down.as_mut(), Accum::Replace, params.w().as_ref(), delta.as_ref(), 1.0, par());
                        upstream = down;
                    } else {
                        upstream = Mat::zeros(0, 0);
                    }
                    signals[l] = Some(delta);
                }
                Layer::Pool { .. } => {
                    let idx = trace.argmax[l].as_ref().expect("pool layer has argmax");
                    let n_in = trace.inputs[l].nrows();
                    let n_out = upstream.nrows();
                    let mut down = Mat::<f64>::zeros(n_in, m);
                    for c in 0..m {
                        let e = example_of(c);
                        for k in 0..n_out {
                            down[(idx[e * n_out + k], c)] += upstream[(k, c)];
                        }
                    }
                    upstream = down;
                }
            }
        }
        Ok(signals)
    }

    /// Gradients of `Σ_{i,k} g_{ik} f_k(x_i)` for a cotangent `g` (`N × C`).
    pub fn backward(&self, trace: &ForwardTrace, cotangent: MatRef<'_, f64>) -> Result<Gradients> {
        let n = trace.n_examples();
        if cotangent.nrows() != n || cotangent.ncols() != self.output_dim() {
            return Err(RnfError::Shape(format!(
                "cotangent is {}x{}, expected {n}x{}",
                cotangent.nrows(),
                cotangent.ncols(),
                self.output_dim()
            )));
        }
        let signals = self.propagate(trace, cotangent.transpose().to_owned(), |m| m)?;
        let mut grads = Gradients { w_tilde: vec![None; self.layers.len()], beta: vec![None; self.layers.len()] };
        for (l, layer) in self.layers.iter().enumerate() {
            let Layer::Dense { params, .. } = layer else { continue };
            let delta = signals[l].as_ref().expect("dense signal");
            let mut gw = Mat::<f64>::zeros(params.n_in(), params.n_out());
            matmul(gw.as_mut(), Accum::Replace, trace.inputs[l].as_ref(), delta.transpose(), params.scale(), par());
            if let Some(r) = &params.mask {
                for j in 0..gw.ncols() {
                    let r = r.col(j);
                    let mut g = gw.col_mut(j);
                    for i in 0..g.nrows() {
                        g[i] *= r[i];
                    }
                }
            }
            let gb = (0..params.n_out())
                .map(|j| params.sigma_b * delta.row(j).iter().sum::<f64>())
                .collect();
            grads.w_tilde[l] = Some(gw);
            grads.beta[l] = Some(gb);
        }
        Ok(grads)
    }

    /// `θ ← θ − lr·g` on the trainable tensors.
    pub fn apply_update(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let Layer::Dense { params, .. } = layer else { continue };
            let (Some(gw), Some(gb)) = (&grads.w_tilde[l], &grads.beta[l]) else {
                return Err(RnfError::Shape(format!("missing gradient for layer {l}")));
            };
            if gw.nrows() != params.n_in() || gw.ncols() != params.n_out() || gb.len() != params.n_out() {
                return Err(RnfError::Shape(format!("gradient shape mismatch at layer {l}")));
            }
            params.descend(gw, gb, lr);
        }
        self.version += 1;
        Ok(())
    }

    /// Write `<stem>.json` (architecture and scales) and `<stem>.bin`
    /// (little-endian `f64` tensors: for each dense layer `w_tilde`
    /// column-major, then `beta`).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| RnfError::io(dir, e))?;
        let header = self.header();
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&json_path, serde_json::to_vec_pretty(&header)?).map_err(|e| RnfError::io(&json_path, e))?;
        let bin_path = dir.join(format!("{stem}.bin"));
        let mut buf = Vec::with_capacity(8 * self.parameter_count());
        for layer in &self.layers {
            if let Layer::Dense { params, .. } = layer {
                for j in 0..params.n_out() {
                    for i in 0..params.n_in() {
                        buf.extend_from_slice(&params.w_tilde[(i, j)].to_le_bytes());
                    }
                }
                for b in &params.beta {
                    buf.extend_from_slice(&b.to_le_bytes());
                }
            }
        }
        let mut f = std::fs::File::create(&bin_path).map_err(|e| RnfError::io(&bin_path, e))?;
        f.write_all(&buf).map_err(|e| RnfError::io(&bin_path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let json_path = dir.join(format!("{stem}.json"));
        let text = std::fs::read(&json_path).map_err(|e| RnfError::io(&json_path, e))?;
        let header: CheckpointHeader = serde_json::from_slice(&text)?;
        let bin_path = dir.join(format!("{stem}.bin"));
        let mut bytes = Vec::new();
        std::fs::File::open(&bin_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| RnfError::io(&bin_path, e))?;
        let mut values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut params = Vec::with_capacity(header.layers.len());
        for spec in &header.layers {
            match spec {
                LayerSpec::MaskedDense { n_in, n_out, rf, .. } => {
                    let count = n_in * n_out + n_out;
                    let chunk: Vec<f64> = values.by_ref().take(count).collect();
                    if chunk.len() != count {
                        return Err(RnfError::Data { path: bin_path, reason: "parameter file is truncated".into() });
                    }
                    let w_tilde = Mat::from_fn(*n_in, *n_out, |i, j| chunk[j * n_in + i]);
                    let beta = chunk[n_in * n_out..].to_vec();
                    let mask = if rf.is_none() { None } else { Some(receptive_mask(*n_out, *n_in, rf)?) };
                    params.push(Some(WeightBundle::new(w_tilde, mask, beta, header.sigma_w, header.sigma_b)?));
                }
                LayerSpec::MaxPool { .. } => params.push(None),
            }
        }
        if values.next().is_some() {
            return Err(RnfError::Data { path: bin_path, reason: "parameter file has trailing data".into() });
        }
        let mut net = Self::from_parts(header.layers, params, header.seed)?;
        net.config = header.model;
        Ok(net)
    }

    fn header(&self) -> CheckpointHeader {
        let (sigma_w, sigma_b) = self
            .layers
            .iter()
            .find_map(|l| match l {
                Layer::Dense { params, .. } => Some((params.sigma_w, params.sigma_b)),
                Layer::Pool { .. } => None,
            })
            .unwrap_or((1.0, 0.0));
        CheckpointHeader { schema: 1, model: self.config.clone(), layers: self.specs.clone(), sigma_w, sigma_b, seed: self.seed }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    schema: u32,
    model: Option<ModelConfig>,
    layers: Vec<LayerSpec>,
    sigma_w: f64,
    sigma_b: f64,
    seed: u64,
}

fn check_chain(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(RnfError::Config("network needs at least one layer".into()));
    }
    for s in specs {
        s.validate()?;
    }
    for pair in specs.windows(2) {
        if pair[0].n_out() != pair[1].n_in() {
            return Err(RnfError::Config(format!(
                "layer output width {} does not match next input width {}",
                pair[0].n_out(),
                pair[1].n_in()
            )));
        }
    }
    if !matches!(specs.last(), Some(LayerSpec::MaskedDense { .. })) {
        return Err(RnfError::Config("the last layer must be dense".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_examples() {
        assert_eq!(max_pool_forward(&[1.0, 3.0, 2.0, 4.0], 2, 2).unwrap(), (vec![3.0, 4.0], vec![1, 3]));
        assert_eq!(max_pool_forward(&[2.0; 6], 2, 2).unwrap(), (vec![2.0; 3], vec![0, 2, 4]));
        assert_eq!(max_pool_forward(&[5.0, 1.0, 1.0, 1.0], 2, 2).unwrap(), (vec![5.0, 1.0], vec![0, 2]));
        assert!(max_pool_forward(&[1.0], 2, 2).is_err());
    }

    #[test]
    fn model_layouts() {
        let specs = ModelConfig::new(2).with_width(16).layer_specs().unwrap();
        assert!(matches!(specs[1], LayerSpec::MaxPool { n_in: 16, window: 2, stride: 2 }));
        assert_eq!(specs[2].n_in(), 8);
        assert_eq!(specs.last().unwrap().n_out(), 10);
        let specs = ModelConfig::new(4).with_width(16).layer_specs().unwrap();
        let LayerSpec::MaskedDense { cov, .. } = &specs[0] else { panic!() };
        assert_eq!(cov.family, crate::CovarianceFamily::Matern);
        assert_eq!(cov.nu, Some(0.5));
        let specs = ModelConfig::new(5).with_width(16).layer_specs().unwrap();
        assert!(specs.iter().all(|s| matches!(s, LayerSpec::MaskedDense { rf, .. } if rf.is_none())));
        assert!(ModelConfig::new(6).layer_specs().is_err());
    }

    #[test]
    fn parameter_count_formula() {
        for id in 1..=5u8 {
            let net = NetworkModel::build(&ModelConfig::new(id).with_width(16), 3).unwrap();
            let mut expected = 784 * 16 + 16 + 16 * 10 + 10;
            expected += if id == 2 { 8 * 16 + 16 } else { 2 * (16 * 16 + 16) };
            assert_eq!(net.parameter_count(), expected, "model {id}");
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let spec = LayerSpec::dense(3, 3, Activation::Identity);
        let wb = WeightBundle::new(Mat::<f64>::identity(3, 3) * faer::Scale(3f64.sqrt()), None, vec![0.0; 3], 1.0, 0.0).unwrap();
        let net = NetworkModel::from_parts(vec![spec], vec![Some(wb)], 0).unwrap();
        let x = Mat::from_fn(2, 3, |i, j| (i * 3 + j) as f64 * 0.1);
        let y = net.predict(x.as_ref()).unwrap();
        assert!((&y - &x).norm_l2() < 1e-15);
    }

    #[test]
    fn zero_input_and_bias_give_zero_output() {
        let mut cfg = ModelConfig::new(1).with_width(8);
        cfg.sigma.sigma_b = 0.0;
        let net = NetworkModel::build(&cfg, 1).unwrap();
        let trace = net.forward(Mat::<f64>::zeros(3, 784).as_ref()).unwrap();
        assert_eq!(trace.output.norm_l2(), 0.0);
        for x in &trace.inputs[1..] {
            assert_eq!(x.norm_l2(), 0.0);
        }
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut net = NetworkModel::build(&ModelConfig::new(5).with_width(4), 1).unwrap();
        let x = Mat::from_fn(2, 784, |i, j| ((i + j) % 7) as f64 / 7.0);
        let trace = net.forward(x.as_ref()).unwrap();
        let g = net.backward(&trace, Mat::<f64>::zeros(2, 10).as_ref()).unwrap();
        assert_eq!(g.norm_sq(), 0.0);
        net.apply_update(&g, 0.1).unwrap();
        assert!(matches!(net.backward(&trace, Mat::<f64>::zeros(2, 10).as_ref()), Err(RnfError::StaleTrace { .. })));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let net = NetworkModel::build(&ModelConfig::new(2).with_width(12), 42).unwrap();
        net.save(dir.path(), "model").unwrap();
        let back = NetworkModel::load(dir.path(), "model").unwrap();
        assert_eq!(back, net);
    }
}
