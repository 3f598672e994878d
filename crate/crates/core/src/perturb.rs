//! Input perturbations (noise, translation, elastic deformation) and the
//! relative distance of perturbed inputs in the tangent-kernel geometry.

use faer::{Mat, MatRef};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RnfError};
use crate::network::NetworkModel;
use crate::seed::{below, fill_standard_normal, standard_normal, unit_interval, Rng};
use crate::tangent::{empirical_ntk, KernelMode};

pub const MAX_SHIFT: i32 = 4;

/// Add i.i.d. `N(0, σ²)` noise to every pixel and clamp to `[0, 1]`.
pub fn apply_noise(image: &[f64], sigma: f64, rng: &mut impl RngCore) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(RnfError::Config(format!("noise level must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.to_vec());
    }
    Ok(image.iter().map(|&p| (p + sigma * standard_normal(rng)).clamp(0.0, 1.0)).collect())
}

/// Shift a `rows × cols` row-major image by whole pixels, `dx` to the right
/// and `dy` down, filling vacated pixels with zero.
pub fn translate(image: &[f64], rows: usize, cols: usize, dx: i32, dy: i32) -> Result<Vec<f64>> {
    if dx.abs() > MAX_SHIFT || dy.abs() > MAX_SHIFT {
        return Err(RnfError::Config(format!("shift ({dx}, {dy}) exceeds {MAX_SHIFT} pixels")));
    }
    check_image(image, rows, cols)?;
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows as i32 {
        let sr = r - dy;
        if sr < 0 || sr >= rows as i32 {
            continue;
        }
        for c in 0..cols as i32 {
            let sc = c - dx;
            if sc >= 0 && sc < cols as i32 {
                out[(r * cols as i32 + c) as usize] = image[(sr * cols as i32 + sc) as usize];
            }
        }
    }
    Ok(out)
}

fn check_image(image: &[f64], rows: usize, cols: usize) -> Result<()> {
    if image.len() != rows * cols {
        return Err(RnfError::Shape(format!("image has {} pixels, expected {rows}x{cols}", image.len())));
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps on `−radius..=radius`.
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// White noise smoothed by a normalized separable Gaussian. The noise is
/// drawn on a grid padded by the filter radius so the field is stationary up
/// to the image border; its variance is `Σ taps²` squared, about
/// `1/(4πσ²)`.
fn smooth_field(rows: usize, cols: usize, sigma: f64, rng: &mut impl RngCore) -> Vec<f64> {
    let taps = gaussian_taps(sigma);
    let rad = taps.len() / 2;
    let (pr, pc) = (rows + 2 * rad, cols + 2 * rad);
    let mut noise = vec![0.0; pr * pc];
    fill_standard_normal(rng, &mut noise);
    // rows pass: pr × cols
    let mut tmp = vec![0.0; pr * cols];
    for r in 0..pr {
        for c in 0..cols {
            tmp[r * cols + c] = taps.iter().enumerate().map(|(k, t)| t * noise[r * pc + c + k]).sum();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let v: f64 = taps.iter().enumerate().map(|(k, t)| t * tmp[(r + k) * cols + c]).sum();
            out[r * cols + c] = v;
        }
    }
    out
}

/// Bilinear sample with zero outside the image.
fn bilinear(image: &[f64], rows: usize, cols: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |r: f64, c: f64| -> f64 {
        if r < 0.0 || c < 0.0 || r >= rows as f64 || c >= cols as f64 {
            0.0
        } else {
            image[r as usize * cols + c as usize]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0)) + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0))
}

/// Random smooth warp: each displacement component is standard normal
/// noise filtered by a normalized Gaussian of width `sigma_def` pixels and
/// scaled by `alpha`. The image is resampled bilinearly at the displaced
/// positions.
pub fn elastic_deform(
    image: &[f64],
    rows: usize,
    cols: usize,
    alpha: f64,
    sigma_def: f64,
    rng: &mut impl RngCore,
) -> Result<Vec<f64>> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(RnfError::Config(format!("deformation magnitude must be non-negative, got {alpha}")));
    }
    if !(sigma_def > 0.0 && sigma_def.is_finite()) {
        return Err(RnfError::Config(format!("deformation smoothing must be positive, got {sigma_def}")));
    }
    check_image(image, rows, cols)?;
    if alpha == 0.0 {
        return Ok(image.to_vec());
    }
    let dx = smooth_field(rows, cols, sigma_def, rng);
    let dy = smooth_field(rows, cols, sigma_def, rng);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            out[i] = bilinear(image, rows, cols, r as f64 + alpha * dy[i], c as f64 + alpha * dx[i]);
        }
    }
    Ok(out)
}

/// A family of random perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationKind {
    Noise { sigma: f64 },
    /// Uniform integer shifts in `−max_shift..=max_shift` on both axes.
    Translate { max_shift: i32 },
    /// Magnitude uniform in `[alpha_min, alpha_max]`.
    Elastic { alpha_min: f64, alpha_max: f64, sigma_def: f64 },
    TranslateThenElastic { max_shift: i32, alpha_min: f64, alpha_max: f64, sigma_def: f64 },
}

impl PerturbationKind {
    pub fn default_translate() -> Self {
        Self::Translate { max_shift: 2 }
    }

    pub fn default_elastic() -> Self {
        Self::Elastic { alpha_min: 1.0, alpha_max: 3.0, sigma_def: 4.0 }
    }

    pub fn default_combined() -> Self {
        Self::TranslateThenElastic { max_shift: 2, alpha_min: 1.0, alpha_max: 3.0, sigma_def: 4.0 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Noise { .. } => "noise",
            Self::Translate { .. } => "translate",
            Self::Elastic { .. } => "elastic",
            Self::TranslateThenElastic { .. } => "translate_elastic",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let shift_ok = |s: i32| (0..=MAX_SHIFT).contains(&s);
        let alpha_ok = |lo: f64, hi: f64, sd: f64| lo >= 0.0 && hi >= lo && hi.is_finite() && sd > 0.0 && sd.is_finite();
        let ok = match *self {
            Self::Noise { sigma } => sigma >= 0.0 && sigma.is_finite(),
            Self::Translate { max_shift } => shift_ok(max_shift),
            Self::Elastic { alpha_min, alpha_max, sigma_def } => alpha_ok(alpha_min, alpha_max, sigma_def),
            Self::TranslateThenElastic { max_shift, alpha_min, alpha_max, sigma_def } => {
                shift_ok(max_shift) && alpha_ok(alpha_min, alpha_max, sigma_def)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(RnfError::Config(format!("invalid perturbation parameters {self:?}")))
        }
    }

    fn shift(max_shift: i32, rng: &mut impl RngCore) -> i32 {
        below(rng, (2 * max_shift + 1) as u64) as i32 - max_shift
    }

    /// One perturbed copy of `image`.
    pub fn apply(&self, image: &[f64], rows: usize, cols: usize, rng: &mut impl RngCore) -> Result<Vec<f64>> {
        match *self {
            Self::Noise { sigma } => apply_noise(image, sigma, rng),
            Self::Translate { max_shift } => {
                let dx = Self::shift(max_shift, rng);
                let dy = Self::shift(max_shift, rng);
                translate(image, rows, cols, dx, dy)
            }
            Self::Elastic { alpha_min, alpha_max, sigma_def } => {
                let alpha = alpha_min + (alpha_max - alpha_min) * unit_interval(rng);
                elastic_deform(image, rows, cols, alpha, sigma_def, rng)
            }
            Self::TranslateThenElastic { max_shift, alpha_min, alpha_max, sigma_def } => {
                let dx = Self::shift(max_shift, rng);
                let dy = Self::shift(max_shift, rng);
                let moved = translate(image, rows, cols, dx, dy)?;
                let alpha = alpha_min + (alpha_max - alpha_min) * unit_interval(rng);
                elastic_deform(&moved, rows, cols, alpha, sigma_def, rng)
            }
        }
    }
}

/// `count` perturbed copies of one image, as rows.
pub fn perturbed_set(
    kind: &PerturbationKind,
    image: &[f64],
    rows: usize,
    cols: usize,
    count: usize,
    rng: &mut Rng,
) -> Result<Mat<f64>> {
    kind.validate()?;
    let mut out = Mat::<f64>::zeros(count, rows * cols);
    for s in 0..count {
        let p = kind.apply(image, rows, cols, rng)?;
        for (j, v) in p.into_iter().enumerate() {
            out[(s, j)] = v;
        }
    }
    Ok(out)
}

/// Mean relative distance and how many radicands had to be clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distance {
    pub mean: f64,
    pub clamped: usize,
}

/// `(1/|S|) Σ √(Θ(x,x) + Θ(x',x') − 2Θ(x,x')) / √Θ(x,x)` from a scalar
/// kernel over the stacked inputs `[x; S]` (`(1+|S|)²`).
///
/// Small negative radicands (above `−1e−8·Θ(x,x)`) are clamped to zero and
/// counted; larger ones are an error.
pub fn relative_distance_from_kernel(k: MatRef<'_, f64>) -> Result<Distance> {
    let m = k.nrows();
    if m < 2 || k.ncols() != m {
        return Err(RnfError::Shape(format!("expected a square kernel over at least two inputs, got {}x{}", m, k.ncols())));
    }
    let kxx = k[(0, 0)];
    if !(kxx > 0.0) {
        return Err(RnfError::Numeric(format!("reference self-kernel is {kxx}")));
    }
    let mut clamped = 0;
    let mut sum = 0.0;
    for s in 1..m {
        let mut rad = kxx + k[(s, s)] - 2.0 * k[(0, s)];
        if rad < 0.0 {
            if rad < -1e-8 * kxx {
                return Err(RnfError::Numeric(format!("negative squared distance {rad:e} for sample {}", s - 1)));
            }
            rad = 0.0;
            clamped += 1;
        }
        sum += rad.sqrt();
    }
    Ok(Distance { mean: sum / (m - 1) as f64 / kxx.sqrt(), clamped })
}

/// Relative distance of the perturbed set `s` (rows) from `x` under the
/// empirical kernel of `net`, with classes reduced by trace.
pub fn average_relative_distance(net: &NetworkModel, x: &[f64], s: MatRef<'_, f64>) -> Result<Distance> {
    if x.len() != s.ncols() {
        return Err(RnfError::Shape("reference and perturbed inputs differ in size".into()));
    }
    let stacked = Mat::from_fn(s.nrows() + 1, x.len(), |i, j| if i == 0 { x[j] } else { s[(i - 1, j)] });
    let k = empirical_ntk(net, stacked.as_ref(), None, KernelMode::Scalar)?;
    relative_distance_from_kernel(k.entries.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    fn blob() -> Vec<f64> {
        (0..784)
            .map(|i| {
                let (r, c) = ((i / 28) as f64 - 13.5, (i % 28) as f64 - 13.5);
                (-(r * r + c * c) / 40.0).exp()
            })
            .collect()
    }

    #[test]
    fn noise_examples() {
        let img = blob();
        let mut rng = rng_from_seed(1);
        assert_eq!(apply_noise(&img, 0.0, &mut rng).unwrap(), img);
        let a = apply_noise(&img, 0.3, &mut rng_from_seed(2)).unwrap();
        assert_eq!(a, apply_noise(&img, 0.3, &mut rng_from_seed(2)).unwrap());
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(apply_noise(&img, -0.1, &mut rng).is_err());
    }

    #[test]
    fn noise_mean_change_is_half_normal() {
        // a mid-grey image keeps clamping rare at σ = 0.1
        let img = vec![0.5; 784];
        let sigma = 0.1;
        let mut rng = rng_from_seed(3);
        let mut total = 0.0;
        for _ in 0..1000 {
            let out = apply_noise(&img, sigma, &mut rng).unwrap();
            total += out.iter().zip(&img).map(|(a, b)| (a - b).abs()).sum::<f64>() / 784.0;
        }
        let mean = total / 1000.0;
        let expected = sigma * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean - expected).abs() < 0.005 * expected, "{mean} vs {expected}");
    }

    #[test]
    fn translation_examples() {
        let img = blob();
        assert_eq!(translate(&img, 28, 28, 0, 0).unwrap(), img);
        let back = translate(&translate(&img, 28, 28, 1, 0).unwrap(), 28, 28, -1, 0).unwrap();
        for r in 0..28 {
            for c in 1..27 {
                assert_eq!(back[r * 28 + c], img[r * 28 + c]);
            }
        }
        assert!(translate(&[0.0; 784], 28, 28, 3, -2).unwrap().iter().all(|&v| v == 0.0));
        let moved = translate(&img, 28, 28, 2, -1).unwrap();
        assert_eq!(moved[5 * 28 + 7], img[6 * 28 + 5]);
        assert!(translate(&img, 28, 28, 5, 0).is_err());
    }

    #[test]
    fn elastic_examples() {
        let img = blob();
        assert_eq!(elastic_deform(&img, 28, 28, 0.0, 4.0, &mut rng_from_seed(1)).unwrap(), img);
        let a = elastic_deform(&img, 28, 28, 2.0, 4.0, &mut rng_from_seed(5)).unwrap();
        assert_eq!(a, elastic_deform(&img, 28, 28, 2.0, 4.0, &mut rng_from_seed(5)).unwrap());
        assert_ne!(a, img);
        assert!(elastic_deform(&img, 28, 28, -1.0, 4.0, &mut rng_from_seed(1)).is_err());
        assert!(elastic_deform(&img, 28, 28, 1.0, 0.0, &mut rng_from_seed(1)).is_err());
    }

    #[test]
    fn smoothed_field_variance_matches_filter_energy() {
        let mut rng = rng_from_seed(8);
        let mut acc = 0.0;
        let mut count = 0.0;
        for _ in 0..200 {
            let f = smooth_field(28, 28, 4.0, &mut rng);
            acc += f.iter().map(|v| v * v).sum::<f64>();
            count += f.len() as f64;
        }
        let var = acc / count;
        let taps = gaussian_taps(4.0);
        let expected = taps.iter().map(|t| t * t).sum::<f64>().powi(2);
        assert!((var / expected - 1.0).abs() < 0.1, "variance {var} vs {expected}");
    }

    #[test]
    fn distance_from_kernel_examples() {
        let k = Mat::from_fn(2, 2, |_, _| 3.0);
        assert_eq!(relative_distance_from_kernel(k.as_ref()).unwrap(), Distance { mean: 0.0, clamped: 0 });
        // x' = 2x in a 2-homogeneous kernel
        let k = Mat::from_fn(2, 2, |i, j| [1.0, 2.0][i] * [1.0, 2.0][j] * 5.0);
        assert!((relative_distance_from_kernel(k.as_ref()).unwrap().mean - 1.0).abs() < 1e-15);
        let mut k = Mat::from_fn(2, 2, |_, _| 1.0);
        k[(1, 1)] = 1.0 - 1e-12;
        assert_eq!(relative_distance_from_kernel(k.as_ref()).unwrap().clamped, 1);
        k[(1, 1)] = 0.5;
        assert!(relative_distance_from_kernel(k.as_ref()).is_err());
        assert!(relative_distance_from_kernel(Mat::<f64>::zeros(2, 2).as_ref()).is_err());
    }
}
