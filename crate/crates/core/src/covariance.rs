//! Stationary covariance functions on the 1-torus, lattice covariance
//! matrices `Σ` and square-root factors `A` with `Σ ≈ A·Aᵀ`.

use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::bessel::{bessel_k_closed_form, bessel_k_scaled, matern_correlation};
use crate::error::{Result, RnfError};
use crate::quad;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceFamily {
    Gaussian,
    Matern,
    /// No spatial correlation, `Σ = I`.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub family: CovarianceFamily,
    /// Correlation length in torus units (the torus has circumference 1).
    #[serde(default = "default_sigma_s")]
    pub sigma_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    #[serde(default = "default_wrap_terms")]
    pub wrap_terms: u32,
    /// Allow Matérn orders without an elementary closed form.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub numeric_bessel: bool,
}

fn default_sigma_s() -> f64 {
    0.01
}

fn default_wrap_terms() -> u32 {
    3
}

impl CovarianceSpec {
    pub fn gaussian(sigma_s: f64) -> Self {
        Self { family: CovarianceFamily::Gaussian, sigma_s, nu: None, wrap_terms: 3, numeric_bessel: false }
    }

    pub fn matern(sigma_s: f64, nu: f64) -> Self {
        Self { family: CovarianceFamily::Matern, sigma_s, nu: Some(nu), wrap_terms: 3, numeric_bessel: false }
    }

    pub fn independent() -> Self {
        Self { family: CovarianceFamily::Independent, sigma_s: 1.0, nu: None, wrap_terms: 0, numeric_bessel: false }
    }

    pub fn with_wrap_terms(mut self, wrap_terms: u32) -> Self {
        self.wrap_terms = wrap_terms;
        self
    }

    pub fn with_numeric_bessel(mut self, on: bool) -> Self {
        self.numeric_bessel = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            CovarianceFamily::Independent => Ok(()),
            _ if !(self.sigma_s > 0.0 && self.sigma_s.is_finite()) => {
                Err(RnfError::Config(format!("sigma_s must be positive and finite, got {}", self.sigma_s)))
            }
            CovarianceFamily::Gaussian => Ok(()),
            CovarianceFamily::Matern => {
                let nu = self.nu()?;
                if !self.numeric_bessel && !has_closed_form(nu) {
                    return Err(RnfError::Config(format!(
                        "Matérn order {nu} has no closed form; enable numeric_bessel to use it"
                    )));
                }
                Ok(())
            }
        }
    }

    fn nu(&self) -> Result<f64> {
        match self.nu {
            Some(nu) if nu > 0.0 && nu.is_finite() => Ok(nu),
            Some(nu) => Err(RnfError::Config(format!("Matérn nu must be positive, got {nu}"))),
            None => Err(RnfError::Config("Matérn covariance requires nu".into())),
        }
    }

    /// Un-normalized kernel on ℝ at distance `r ≥ 0`, measured in units of `scale`.
    fn profile(&self, r: f64, scale: f64) -> f64 {
        match self.family {
            CovarianceFamily::Gaussian => (-0.5 * (r / scale).powi(2)).exp(),
            CovarianceFamily::Matern => {
                let nu = self.nu.unwrap_or(0.5);
                let z = (2.0 * nu).sqrt() * r / scale;
                matern_correlation(z, nu, true).unwrap_or(0.0)
            }
            CovarianceFamily::Independent => f64::from(u8::from(r == 0.0)),
        }
    }

    /// Periodized kernel `Σ_{|m| ≤ wrap} k(|r + m·period|)`, normalized to 1 at `r = 0`.
    /// Wrap sum around the reduced offset, so torus-equivalent offsets give
    /// bitwise equal values; `wrap_terms = 0` is the unwrapped line kernel.
    fn wrapped(&self, r: f64, scale: f64, period: f64) -> f64 {
        let r = if self.wrap_terms == 0 {
            r
        } else {
            let m = r.rem_euclid(period);
            m.min(period - m)
        };
        let raw = |r: f64| {
            let w = self.wrap_terms as i64;
            (-w..=w).map(|m| self.profile((r + m as f64 * period).abs(), scale)).sum::<f64>()
        };
        raw(r) / raw(0.0)
    }
}

fn has_closed_form(nu: f64) -> bool {
    [0.5, 1.5, 2.5].iter().any(|&c| (nu - c).abs() < 1e-12)
}

/// Kernel value at torus distance `dist`.
///
/// Distances beyond 1/2 are reduced modulo the torus unless `wrap_terms`
/// is 0.
pub fn covariance_value(dist: f64, spec: &CovarianceSpec) -> Result<f64> {
    spec.validate()?;
    if !(dist >= 0.0 && dist.is_finite()) {
        return Err(RnfError::Config(format!("distance must be non-negative, got {dist}")));
    }
    Ok(spec.wrapped(dist, spec.sigma_s, 1.0))
}

/// Lattice covariance `Σ_{ii'} = K(|i − i'|/n)` on `n` equally spaced torus points.
pub fn discrete_covariance(n: usize, spec: &CovarianceSpec) -> Result<Mat<f64>> {
    spec.validate()?;
    if n < 2 {
        return Err(RnfError::Config(format!("covariance dimension must be at least 2, got {n}")));
    }
    // Toeplitz: one value per offset, in lattice units (scale σ_s·n, period n).
    let scale = spec.sigma_s * n as f64;
    let per_offset: Vec<f64> = (0..n).map(|d| spec.wrapped(d as f64, scale, n as f64)).collect();
    Ok(Mat::from_fn(n, n, |i, j| per_offset[i.abs_diff(j)]))
}

/// How the square-root factor of a layer covariance is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    /// Quadrature when the correlation spans at least one lattice cell,
    /// otherwise Cholesky with an eigendecomposition fallback.
    #[default]
    Auto,
    Quadrature,
    Cholesky,
    Eigen,
}

/// Closed-form quadrature factor of the covariance on ℝ, sampled on the lattice.
///
/// Gaussian: `A_ij = (2/(π c²))^{1/4} exp(−(i−j)²/c²)` with `c = σ_s·n`.
/// Matérn: `A_ij` is the cell average over `[i−j−½, i−j+½]` of the Fourier
/// square root `g(u) = α (κ|u|)^μ K_μ(κ|u|)`, `μ = ν/2 − 1/4`,
/// `κ = √(2ν)/c`, normalized so that `g * g` is the unit-variance Matérn kernel.
pub fn factor_matrix(n: usize, spec: &CovarianceSpec) -> Result<Mat<f64>> {
    spec.validate()?;
    if n < 2 {
        return Err(RnfError::Config(format!("factor dimension must be at least 2, got {n}")));
    }
    let c = spec.sigma_s * n as f64;
    let per_offset: Vec<f64> = match spec.family {
        CovarianceFamily::Independent => return Ok(Mat::identity(n, n)),
        CovarianceFamily::Gaussian => {
            let norm = (2.0 / (std::f64::consts::PI * c * c)).powf(0.25);
            (0..n).map(|d| norm * (-((d * d) as f64) / (c * c)).exp()).collect()
        }
        CovarianceFamily::Matern => {
            let g = MaternRoot::new(spec.nu()?, c);
            (0..n).map(|d| g.cell_average(d)).collect()
        }
    };
    Ok(Mat::from_fn(n, n, |i, j| per_offset[i.abs_diff(j)]))
}

struct MaternRoot {
    nu: f64,
    mu: f64,
    kappa: f64,
    alpha: f64,
}

impl MaternRoot {
    fn new(nu: f64, scale: f64) -> Self {
        let mu = nu / 2.0 - 0.25;
        let kappa = (2.0 * nu).sqrt() / scale;
        let pi = std::f64::consts::PI;
        let spectral = 2.0 * pi.sqrt() * libm::tgamma(nu + 0.5) / libm::tgamma(nu);
        let alpha = spectral.sqrt() * kappa.sqrt() / (2f64.powf(mu) * pi.sqrt() * libm::tgamma(mu + 0.5));
        Self { nu, mu, kappa, alpha }
    }

    fn eval(&self, u: f64) -> f64 {
        let x = self.kappa * u.abs();
        if x > 740.0 {
            return 0.0;
        }
        let k = match bessel_k_closed_form(self.mu, x) {
            Some(k) => k.ln(),
            None => bessel_k_scaled(self.mu, x).ln() - x,
        };
        self.alpha * (self.mu * x.ln() + k).exp()
    }

    fn cell_average(&self, d: usize) -> f64 {
        if d == 0 {
            // g(u) ~ u^{ν−1/2} (or log) near 0; u = s^q flattens it.
            let q = (3.0 / (self.nu + 0.5)).max(1.0);
            let top = 0.5f64.powf(1.0 / q);
            let f = |s: f64| q * s.powf(q - 1.0) * self.eval(s.powf(q));
            2.0 * quad::integrate(f, 0.0, top, 1e-14)
        } else {
            let a = d as f64 - 0.5;
            if self.kappa * a > 740.0 {
                return 0.0;
            }
            quad::integrate(|u| self.eval(u), a, a + 1.0, 1e-15)
        }
    }
}

/// Lower-triangular Cholesky factor, retrying once with `1e−10·I` jitter.
pub fn cholesky_factor(sigma: &Mat<f64>) -> Result<Mat<f64>> {
    check_square(sigma)?;
    if let Ok(llt) = sigma.llt(Side::Lower) {
        return Ok(llt.L().to_owned());
    }
    let n = sigma.nrows();
    let jittered = sigma + Mat::<f64>::identity(n, n) * faer::Scale(1e-10);
    jittered
        .llt(Side::Lower)
        .map(|llt| llt.L().to_owned())
        .map_err(|e| RnfError::Decomposition(format!("Cholesky failed after 1e-10 jitter: {e:?}")))
}

/// `V·diag(√max(λ, 0))` from the symmetric eigendecomposition; works for
/// semidefinite `Σ`.
pub fn eigen_factor(sigma: &Mat<f64>) -> Result<Mat<f64>> {
    check_square(sigma)?;
    let evd = sigma
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| RnfError::Decomposition(format!("eigendecomposition failed: {e:?}")))?;
    let u = evd.U();
    let s = evd.S().column_vector();
    Ok(Mat::from_fn(u.nrows(), u.ncols(), |i, j| u[(i, j)] * s[j].max(0.0).sqrt()))
}

/// Factor used to draw correlated weights for an `n`-dimensional input.
pub fn factor_for(n: usize, spec: &CovarianceSpec, kind: FactorKind) -> Result<Mat<f64>> {
    if spec.family == CovarianceFamily::Independent {
        spec.validate()?;
        return Ok(Mat::identity(n, n));
    }
    match kind {
        FactorKind::Quadrature => factor_matrix(n, spec),
        FactorKind::Cholesky => cholesky_factor(&discrete_covariance(n, spec)?),
        FactorKind::Eigen => eigen_factor(&discrete_covariance(n, spec)?),
        FactorKind::Auto if spec.sigma_s * n as f64 >= 1.0 => factor_matrix(n, spec),
        FactorKind::Auto => {
            let sigma = discrete_covariance(n, spec)?;
            cholesky_factor(&sigma).or_else(|_| eigen_factor(&sigma))
        }
    }
}

/// `‖Σ − A·Aᵀ‖_F / ‖Σ‖_F`.
pub fn relative_residual(sigma: &Mat<f64>, a: &Mat<f64>) -> f64 {
    let diff = sigma - a * a.transpose();
    diff.norm_l2() / sigma.norm_l2()
}

fn check_square(m: &Mat<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(RnfError::Shape(format!("expected a square matrix, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn value_examples() {
        assert_eq!(covariance_value(0.0, &CovarianceSpec::gaussian(0.3)).unwrap(), 1.0);
        let g = CovarianceSpec::gaussian(0.1).with_wrap_terms(0);
        assert_relative_eq!(covariance_value(0.1, &g).unwrap(), (-0.5f64).exp(), epsilon = 1e-15);
        let m = CovarianceSpec::matern(0.07, 0.5).with_wrap_terms(0);
        for r in [0.01, 0.1, 0.25] {
            assert!((covariance_value(r, &m).unwrap() - (-r / 0.07f64).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn unsupported_order_is_a_config_error() {
        let spec = CovarianceSpec::matern(0.1, 0.8);
        assert!(matches!(covariance_value(0.1, &spec), Err(RnfError::Config(_))));
        assert!(covariance_value(0.1, &spec.with_numeric_bessel(true)).is_ok());
        assert!(CovarianceSpec::gaussian(0.0).validate().is_err());
    }

    #[test]
    fn lattice_examples() {
        let s = discrete_covariance(100, &CovarianceSpec::gaussian(0.01)).unwrap();
        assert_relative_eq!(s[(10, 11)], (-0.5f64).exp(), epsilon = 1e-14);
        let m = discrete_covariance(100, &CovarianceSpec::matern(0.01, 0.5)).unwrap();
        assert_relative_eq!(m[(10, 12)], (-2.0f64).exp(), epsilon = 1e-14);
        let small = discrete_covariance(4, &CovarianceSpec::gaussian(0.2)).unwrap();
        for i in 0..4 {
            assert_eq!(small[(i, i)], 1.0);
        }
        let flat = discrete_covariance(4, &CovarianceSpec::gaussian(1e8)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_relative_eq!(flat[(i, j)], 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn wrapped_lattice_is_periodic() {
        let spec = CovarianceSpec::gaussian(0.2);
        let s = discrete_covariance(10, &spec).unwrap();
        // offsets 3 and 7 are the same torus distance
        assert_relative_eq!(s[(0, 3)], s[(0, 7)], epsilon = 1e-12);
        assert_relative_eq!(s[(0, 1)], s[(0, 9)], epsilon = 1e-12);
    }

    #[test]
    fn gaussian_factor_diagonal_and_residual() {
        let spec = CovarianceSpec::gaussian(0.01);
        let a = factor_matrix(100, &spec).unwrap();
        assert_relative_eq!(a[(5, 5)], (2.0 / std::f64::consts::PI).powf(0.25), epsilon = 1e-15);
        let sigma = discrete_covariance(100, &spec.clone().with_wrap_terms(0)).unwrap();
        let r = relative_residual(&sigma, &a);
        assert!(r < 0.05, "residual {r}");
    }

    #[test]
    fn quadrature_residual_decreases_with_n() {
        let res: Vec<f64> = [50usize, 100, 200]
            .iter()
            .map(|&n| {
                let spec = CovarianceSpec::gaussian(1.0 / n as f64).with_wrap_terms(0);
                relative_residual(&discrete_covariance(n, &spec).unwrap(), &factor_matrix(n, &spec).unwrap())
            })
            .collect();
        assert!(res[0] > res[1] && res[1] > res[2], "{res:?}");
    }

    #[test]
    fn matern_root_convolves_to_kernel() {
        // ∫ g(x−u) g(u) du over a fine grid reproduces the Matérn kernel.
        for nu in [0.5, 1.5, 2.5] {
            let g = MaternRoot::new(nu, 1.0);
            let h = 1e-3;
            for lag in [0.0, 0.5, 1.3] {
                let conv: f64 = (-40_000..40_000)
                    .map(|k| {
                        let u = (k as f64 + 0.5) * h;
                        g.eval(u) * g.eval(lag - u)
                    })
                    .sum::<f64>()
                    * h;
                let expected = matern_correlation((2.0 * nu).sqrt() * lag, nu, false).unwrap();
                let tol = if nu == 0.5 { 5e-3 } else { 1e-4 };
                assert!((conv - expected).abs() < tol, "nu={nu} lag={lag}: {conv} vs {expected}");
            }
        }
    }

    #[test]
    fn matern_factor_tracks_lattice_kernel() {
        for nu in [0.5, 1.5, 2.5] {
            let spec = CovarianceSpec::matern(0.05, nu).with_wrap_terms(0);
            let n = 200;
            let r = relative_residual(&discrete_covariance(n, &spec).unwrap(), &factor_matrix(n, &spec).unwrap());
            assert!(r < 0.05, "nu={nu}: residual {r}");
        }
    }

    #[test]
    fn cholesky_examples() {
        let id = Mat::<f64>::identity(5, 5);
        assert_eq!(cholesky_factor(&id).unwrap(), id);
        let rho: f64 = 0.3;
        let s = Mat::from_fn(2, 2, |i, j| if i == j { 1.0 } else { rho });
        let l = cholesky_factor(&s).unwrap();
        assert_relative_eq!(l[(0, 0)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(l[(1, 0)], rho, epsilon = 1e-15);
        assert_relative_eq!(l[(1, 1)], (1.0 - rho * rho).sqrt(), epsilon = 1e-15);
        assert_eq!(l[(0, 1)], 0.0);
        let sigma = discrete_covariance(100, &CovarianceSpec::gaussian(0.01)).unwrap();
        let l = cholesky_factor(&sigma).unwrap();
        assert!((&l * l.transpose() - &sigma).norm_l2() < 1e-8);
    }

    #[test]
    fn eigen_factor_handles_rank_deficiency() {
        let ones = Mat::from_fn(4, 4, |_, _| 1.0);
        assert!(cholesky_factor(&ones).is_err() || relative_residual(&ones, &cholesky_factor(&ones).unwrap()) < 1e-8);
        let a = eigen_factor(&ones).unwrap();
        assert!(relative_residual(&ones, &a) < 1e-12);
    }

    #[test]
    fn spec_json_shape() {
        let spec: CovarianceSpec = serde_json::from_str(r#"{"family":"matern","sigma_s":0.01,"nu":0.5,"wrap_terms":3}"#).unwrap();
        assert_eq!(spec, CovarianceSpec::matern(0.01, 0.5));
        let back = serde_json::to_string(&CovarianceSpec::gaussian(0.5)).unwrap();
        assert_eq!(back, r#"{"family":"gaussian","sigma_s":0.5,"wrap_terms":3}"#);
    }
}
