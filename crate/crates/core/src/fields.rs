//! Receptive-field masks and correlated initial weights.
//!
//! A layer from `n_in` to `n_out` neurons stores its matrices input-major,
//! `n_in × n_out`, so that column `c` holds the incoming weights of output
//! neuron `c`. Neuron positions are `i/n` on the unit interval (1-based).

use faer::Mat;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::covariance::{factor_for, CovarianceSpec, FactorKind};
use crate::error::{Result, RnfError};
use crate::seed::{fill_standard_normal, standard_normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReceptiveFieldFamily {
    None,
    GaussianFilter,
    MexicanHat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReceptiveFieldSpec {
    pub family: ReceptiveFieldFamily,
    #[serde(default = "default_sigma_r")]
    pub sigma_r: f64,
}

fn default_sigma_r() -> f64 {
    1.0
}

impl ReceptiveFieldSpec {
    pub fn none() -> Self {
        Self { family: ReceptiveFieldFamily::None, sigma_r: 1.0 }
    }

    pub fn gaussian(sigma_r: f64) -> Self {
        Self { family: ReceptiveFieldFamily::GaussianFilter, sigma_r }
    }

    pub fn mexican_hat(sigma_r: f64) -> Self {
        Self { family: ReceptiveFieldFamily::MexicanHat, sigma_r }
    }

    pub fn is_none(&self) -> bool {
        self.family == ReceptiveFieldFamily::None
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_none() && !(self.sigma_r > 0.0 && self.sigma_r.is_finite()) {
            return Err(RnfError::Config(format!("sigma_r must be positive and finite, got {}", self.sigma_r)));
        }
        Ok(())
    }

    /// Filter value at offset `u` = (output position − input position).
    pub fn value(&self, offset: f64) -> f64 {
        let u = offset / self.sigma_r;
        let bump = (-0.5 * u * u).exp();
        match self.family {
            ReceptiveFieldFamily::None => 1.0,
            ReceptiveFieldFamily::GaussianFilter => bump,
            ReceptiveFieldFamily::MexicanHat => {
                let amp = 2.0 / ((3.0 * self.sigma_r).sqrt() * std::f64::consts::PI.powf(0.25));
                amp * (1.0 - u * u) * bump
            }
        }
    }
}

/// Mask `R` as an `n_in × n_out` matrix; entry `(a, c)` is the filter at
/// offset `(c+1)/n_out − (a+1)/n_in`.
pub fn receptive_mask(n_out: usize, n_in: usize, spec: &ReceptiveFieldSpec) -> Result<Mat<f64>> {
    spec.validate()?;
    if n_out == 0 || n_in == 0 {
        return Err(RnfError::Config("mask dimensions must be positive".into()));
    }
    Ok(Mat::from_fn(n_in, n_out, |a, c| {
        spec.value((c + 1) as f64 / n_out as f64 - (a + 1) as f64 / n_in as f64)
    }))
}

/// Parameters of one dense layer.
///
/// Invariants: `w = (σ_w/√n_in)·R∘w_tilde` and `b = σ_b·beta`. The trainable
/// tensors are `w_tilde` and `beta`; call [`WeightBundle::refresh`] after
/// changing them.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    pub w_tilde: Mat<f64>,
    /// `None` stands for the all-ones mask.
    pub mask: Option<Mat<f64>>,
    pub beta: Vec<f64>,
    pub sigma_w: f64,
    pub sigma_b: f64,
    w: Mat<f64>,
    b: Vec<f64>,
}

impl WeightBundle {
    pub fn new(w_tilde: Mat<f64>, mask: Option<Mat<f64>>, beta: Vec<f64>, sigma_w: f64, sigma_b: f64) -> Result<Self> {
        if let Some(m) = &mask {
            if m.nrows() != w_tilde.nrows() || m.ncols() != w_tilde.ncols() {
                return Err(RnfError::Shape(format!(
                    "mask is {}x{}, weights are {}x{}",
                    m.nrows(),
                    m.ncols(),
                    w_tilde.nrows(),
                    w_tilde.ncols()
                )));
            }
        }
        if beta.len() != w_tilde.ncols() {
            return Err(RnfError::Shape(format!("bias has {} entries, layer has {} outputs", beta.len(), w_tilde.ncols())));
        }
        let mut bundle =
            Self { w: Mat::zeros(0, 0), b: Vec::new(), w_tilde, mask, beta, sigma_w, sigma_b };
        bundle.refresh();
        Ok(bundle)
    }

    pub fn n_in(&self) -> usize {
        self.w_tilde.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.w_tilde.ncols()
    }

    /// `σ_w/√n_in`.
    pub fn scale(&self) -> f64 {
        self.sigma_w / (self.n_in() as f64).sqrt()
    }

    /// Effective weights.
    pub fn w(&self) -> &Mat<f64> {
        &self.w
    }

    /// Effective bias.
    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// Recompute the effective weights and bias from the trainable tensors.
    pub fn refresh(&mut self) {
        let s = self.scale();
        let (n_in, n_out) = (self.n_in(), self.n_out());
        if self.w.nrows() != n_in || self.w.ncols() != n_out {
            self.w = Mat::zeros(n_in, n_out);
        }
        for j in 0..n_out {
            let wt = self.w_tilde.col(j);
            let mut w = self.w.col_mut(j);
            match &self.mask {
                Some(r) => {
                    let r = r.col(j);
                    for i in 0..n_in {
                        w[i] = s * r[i] * wt[i];
                    }
                }
                None => {
                    for i in 0..n_in {
                        w[i] = s * wt[i];
                    }
                }
            }
        }
        self.b.clear();
        self.b.extend(self.beta.iter().map(|v| self.sigma_b * v));
    }

    /// `w_tilde -= lr·gw`, `beta -= lr·gb`, refreshing the effective
    /// tensors in the same pass.
    pub(crate) fn descend(&mut self, gw: &Mat<f64>, gb: &[f64], lr: f64) {
        let s = self.scale();
        let n_in = self.n_in();
        for j in 0..self.n_out() {
            let g = gw.col(j);
            let mut wt = self.w_tilde.col_mut(j);
            let mut w = self.w.col_mut(j);
            match &self.mask {
                Some(r) => {
                    let r = r.col(j);
                    for i in 0..n_in {
                        wt[i] -= lr * g[i];
                        w[i] = s * r[i] * wt[i];
                    }
                }
                None => {
                    for i in 0..n_in {
                        wt[i] -= lr * g[i];
                        w[i] = s * wt[i];
                    }
                }
            }
        }
        for ((beta, b), g) in self.beta.iter_mut().zip(self.b.iter_mut()).zip(gb) {
            *beta -= lr * g;
            *b = self.sigma_b * *beta;
        }
    }

    pub fn mask_value(&self, i: usize, j: usize) -> f64 {
        self.mask.as_ref().map_or(1.0, |r| r[(i, j)])
    }
}

/// Draw `w_tilde = A·Ω` with `Ω` standard normal, so that each column is
/// `N(0, A·Aᵀ)` over the input index, and assemble the layer with zero bias.
///
/// `Ω` is filled column by column from `rng`.
pub fn sample_correlated_weights(
    n_in: usize,
    n_out: usize,
    cov: &CovarianceSpec,
    rf: &ReceptiveFieldSpec,
    sigma_w: f64,
    factor: FactorKind,
    rng: &mut impl RngCore,
) -> Result<WeightBundle> {
    if n_in == 0 || n_out == 0 {
        return Err(RnfError::Config("layer dimensions must be positive".into()));
    }
    let w_tilde = if cov.family == crate::CovarianceFamily::Independent {
        cov.validate()?;
        standard_normal_matrix(n_in, n_out, rng)
    } else {
        correlated_sample(&factor_for(n_in, cov, factor)?, n_out, rng)
    };
    let mask = if rf.is_none() { None } else { Some(receptive_mask(n_out, n_in, rf)?) };
    WeightBundle::new(w_tilde, mask, vec![0.0; n_out], sigma_w, 0.0)
}

/// `n_out` columns `A·ω`, `ω` standard normal, so each column is `N(0, A·Aᵀ)`.
pub fn correlated_sample(a: &Mat<f64>, n_out: usize, rng: &mut impl RngCore) -> Mat<f64> {
    let omega = standard_normal_matrix(a.ncols(), n_out, rng);
    a * &omega
}

/// `b_j = σ_b·β_j` with `β_j` i.i.d. standard normal.
pub fn sample_bias(n: usize, sigma_b: f64, rng: &mut impl RngCore) -> Vec<f64> {
    (0..n).map(|_| sigma_b * standard_normal(rng)).collect()
}

pub(crate) fn standard_normal_matrix(rows: usize, cols: usize, rng: &mut impl RngCore) -> Mat<f64> {
    let mut m = Mat::<f64>::zeros(rows, cols);
    let mut buf = vec![0.0; rows];
    for j in 0..cols {
        fill_standard_normal(rng, &mut buf);
        for (i, v) in buf.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    #[test]
    fn mask_examples() {
        let g = receptive_mask(4, 8, &ReceptiveFieldSpec::gaussian(0.3)).unwrap();
        // (c+1)/4 == (a+1)/8 at a=1, c=0
        assert_eq!(g[(1, 0)], 1.0);
        let mh = ReceptiveFieldSpec::mexican_hat(0.2);
        let r = receptive_mask(4, 8, &mh).unwrap();
        let peak = 2.0 / ((3.0 * 0.2f64).sqrt() * std::f64::consts::PI.powf(0.25));
        assert!((r[(3, 1)] - peak).abs() < 1e-15);
        assert!(mh.value(0.2).abs() < 1e-15);
        let ones = receptive_mask(3, 5, &ReceptiveFieldSpec::none()).unwrap();
        assert!((0..5).all(|a| (0..3).all(|c| ones[(a, c)] == 1.0)));
    }

    #[test]
    fn bias_examples() {
        let mut rng = rng_from_seed(1);
        assert!(sample_bias(5, 0.0, &mut rng).iter().all(|&v| v == 0.0));
        let b = sample_bias(10_000, 0.1, &mut rng);
        let mean = b.iter().sum::<f64>() / b.len() as f64;
        let sd = (b.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b.len() - 1) as f64).sqrt();
        assert!((0.097..=0.103).contains(&sd), "std {sd}");
        assert_eq!(sample_bias(7, 0.1, &mut rng_from_seed(9)), sample_bias(7, 0.1, &mut rng_from_seed(9)));
    }

    #[test]
    fn effective_weights_follow_the_invariant() {
        let mut rng = rng_from_seed(4);
        let mut wb = sample_correlated_weights(
            12,
            7,
            &CovarianceSpec::gaussian(0.1),
            &ReceptiveFieldSpec::mexican_hat(0.3),
            1.3,
            FactorKind::Auto,
            &mut rng,
        )
        .unwrap();
        wb.w_tilde[(3, 2)] += 0.5;
        wb.refresh();
        let s = 1.3 / 12f64.sqrt();
        for i in 0..12 {
            for j in 0..7 {
                let expected = s * wb.mask_value(i, j) * wb.w_tilde[(i, j)];
                assert!((wb.w()[(i, j)] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn unmasked_weights_have_ntk_variance() {
        let mut rng = rng_from_seed(5);
        let n_in = 50;
        let wb = sample_correlated_weights(
            n_in,
            2000,
            &CovarianceSpec::independent(),
            &ReceptiveFieldSpec::none(),
            1.0,
            FactorKind::Auto,
            &mut rng,
        )
        .unwrap();
        let w = wb.w();
        let var = (0..n_in).flat_map(|i| (0..2000).map(move |j| (i, j))).map(|(i, j)| w[(i, j)].powi(2)).sum::<f64>()
            / (n_in * 2000) as f64;
        assert!((var * n_in as f64 - 1.0).abs() < 0.02, "n_in·Var = {}", var * n_in as f64);
    }

    #[test]
    fn spec_json_shape() {
        let rf: ReceptiveFieldSpec = serde_json::from_str(r#"{"family":"gaussian_filter","sigma_r":0.5}"#).unwrap();
        assert_eq!(rf, ReceptiveFieldSpec::gaussian(0.5));
        assert_eq!(serde_json::to_string(&ReceptiveFieldSpec::none()).unwrap(), r#"{"family":"none","sigma_r":1.0}"#);
    }
}
