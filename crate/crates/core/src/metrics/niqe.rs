//! NIQE-style naturalness score: statistics of mean-subtracted
//! contrast-normalized (MSCN) luminance, fitted locally on a pristine set.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::gaussian_kernel;
use crate::error::{invalid, Error, Result};
use crate::imaging::{reflect_index, resize_bilinear, Image};

pub const NIQE_MIN_PRISTINE: usize = 20;
const PATCH: usize = 96;
const FEATURES_PER_SCALE: usize = 18;
const SHARPNESS_FRACTION: f64 = 0.75;
const MSCN_C: f64 = 1.0;

/// Multivariate Gaussian over 36-dimensional patch features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NiqeModel {
    pub mean: Vec<f64>,
    /// Row-major `d x d` covariance.
    pub covariance: Vec<f64>,
    pub patch_size: usize,
    pub sharpness_threshold: f64,
}

impl NiqeModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn gamma_ratio_table() -> &'static [(f64, f64, f64)] {
    // (alpha, GGD ratio, AGGD ratio)
    static TABLE: OnceLock<Vec<(f64, f64, f64)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..9801)
            .map(|i| {
                let a = 0.2 + i as f64 * 0.001;
                let (g1, g2, g3) = (ln_gamma(1.0 / a), ln_gamma(2.0 / a), ln_gamma(3.0 / a));
                let ggd = (g1 + g3 - 2.0 * g2).exp();
                (a, ggd, 1.0 / ggd)
            })
            .collect()
    })
}

fn closest_alpha(target: f64, column: impl Fn(&(f64, f64, f64)) -> f64) -> f64 {
    gamma_ratio_table()
        .iter()
        .min_by(|x, y| {
            (column(x) - target)
                .abs()
                .partial_cmp(&(column(y) - target).abs())
                .expect("finite table")
        })
        .map(|e| e.0)
        .expect("non-empty table")
}

/// Generalized Gaussian shape and variance by moment matching.
fn ggd_fit(x: &[f64]) -> [f64; 2] {
    let n = x.len() as f64;
    let var = x.iter().map(|v| v * v).sum::<f64>() / n;
    let mean_abs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    if var <= 0.0 || mean_abs <= 0.0 {
        return [10.0, 0.0];
    }
    let rho = var / (mean_abs * mean_abs);
    [closest_alpha(rho, |e| e.1), var]
}

/// Asymmetric generalized Gaussian: shape, mean, left and right variances.
fn aggd_fit(x: &[f64]) -> [f64; 4] {
    let (mut ls, mut ln, mut rs, mut rn) = (0.0, 0usize, 0.0, 0usize);
    for &v in x {
        if v < 0.0 {
            ls += v * v;
            ln += 1;
        } else if v > 0.0 {
            rs += v * v;
            rn += 1;
        }
    }
    let left = if ln > 0 { (ls / ln as f64).sqrt() } else { 0.0 };
    let right = if rn > 0 { (rs / rn as f64).sqrt() } else { 0.0 };
    if left <= 0.0 || right <= 0.0 {
        return [10.0, 0.0, left * left, right * right];
    }
    let n = x.len() as f64;
    let g = left / right;
    let mean_abs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / n;
    let r = mean_abs * mean_abs / mean_sq;
    let r_norm = r * (g.powi(3) + 1.0) * (g + 1.0) / (g * g + 1.0).powi(2);
    let alpha = closest_alpha(r_norm, |e| e.2);
    let (g1, g2, g3) = (ln_gamma(1.0 / alpha), ln_gamma(2.0 / alpha), ln_gamma(3.0 / alpha));
    let eta = (right - left) * (g2 - g1).exp() * ((g1 - g3) / 2.0).exp();
    [alpha, eta, left * left, right * right]
}

/// Luminance on a 0..255 scale.
fn gray255(img: &Image) -> Vec<f64> {
    img.luma().into_iter().map(|v| v as f64 * 255.0).collect()
}

fn blur(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * src[y * w + reflect_index(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * rows[reflect_index(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// MSCN coefficients and the local standard deviation map.
fn mscn(gray: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let k = gaussian_kernel(7, 7.0 / 6.0);
    let mu = blur(gray, h, w, &k);
    let sq: Vec<f64> = gray.iter().map(|v| v * v).collect();
    let mu_sq = blur(&sq, h, w, &k);
    let sigma: Vec<f64> = mu_sq.iter().zip(&mu).map(|(s, m)| (s - m * m).abs().sqrt()).collect();
    let coeffs = gray
        .iter()
        .zip(&mu)
        .zip(&sigma)
        .map(|((g, m), s)| (g - m) / (s + MSCN_C))
        .collect();
    (coeffs, sigma)
}

struct ScaleFeatures {
    features: Vec<[f64; FEATURES_PER_SCALE]>,
    sharpness: Vec<f64>,
}

fn scale_features(gray: &[f64], h: usize, w: usize, patch: usize) -> ScaleFeatures {
    let (m, sigma) = mscn(gray, h, w);
    let (py, px) = (h / patch, w / patch);
    let mut features = Vec::with_capacity(py * px);
    let mut sharpness = Vec::with_capacity(py * px);
    let mut buf = Vec::with_capacity(patch * patch);
    for by in 0..py {
        for bx in 0..px {
            let (y0, x0) = (by * patch, bx * patch);
            let at = |y: usize, x: usize| m[(y0 + y) * w + x0 + x];
            let mut f = [0.0; FEATURES_PER_SCALE];
            buf.clear();
            buf.extend((0..patch).flat_map(|y| (0..patch).map(move |x| (y, x))).map(|(y, x)| at(y, x)));
            f[..2].copy_from_slice(&ggd_fit(&buf));
            let shifts: [(usize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];
            for (o, (dy, dx)) in shifts.into_iter().enumerate() {
                buf.clear();
                for y in 0..patch - dy {
                    for x in 0..patch {
                        let x2 = x as isize + dx;
                        if x2 < 0 || x2 >= patch as isize {
                            continue;
                        }
                        buf.push(at(y, x) * at(y + dy, x2 as usize));
                    }
                }
                f[2 + 4 * o..6 + 4 * o].copy_from_slice(&aggd_fit(&buf));
            }
            features.push(f);
            let s: f64 = (0..patch)
                .flat_map(|y| (0..patch).map(move |x| (y, x)))
                .map(|(y, x)| sigma[(y0 + y) * w + x0 + x])
                .sum();
            sharpness.push(s / (patch * patch) as f64);
        }
    }
    ScaleFeatures { features, sharpness }
}

/// Per-patch 36-dimensional features and patch sharpness at full scale.
pub fn niqe_features(img: &Image) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let (h, w) = img.dims();
    if h < PATCH || w < PATCH {
        return Err(invalid(format!("NIQE needs at least {PATCH}x{PATCH} pixels, got {h}x{w}")));
    }
    let (h1, w1) = (h / PATCH * PATCH, w / PATCH * PATCH);
    let img = if (h1, w1) != (h, w) { img.crop(0, 0, h1, w1)? } else { img.clone() };
    let full = scale_features(&gray255(&img), h1, w1, PATCH);
    let half_img = resize_bilinear(&img, h1 / 2, w1 / 2)?;
    let half = scale_features(&gray255(&half_img), h1 / 2, w1 / 2, PATCH / 2);
    debug_assert_eq!(full.features.len(), half.features.len());
    let feats = full
        .features
        .iter()
        .zip(&half.features)
        .map(|(a, b)| a.iter().chain(b.iter()).copied().collect())
        .collect();
    Ok((feats, full.sharpness))
}

fn mean_cov(rows: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = rows[0].len();
    let n = rows.len();
    let mut mean = DVector::zeros(d);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for r in rows {
            let c = DVector::from_column_slice(r) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
    }
    (mean, cov)
}

/// Fits the pristine model from sharp patches of at least
/// [`NIQE_MIN_PRISTINE`] images.
pub fn niqe_fit(pristine: &[Image]) -> Result<NiqeModel> {
    if pristine.len() < NIQE_MIN_PRISTINE {
        return Err(Error::Config(format!(
            "NIQE fitting needs at least {NIQE_MIN_PRISTINE} pristine images, got {}",
            pristine.len()
        )));
    }
    let mut rows = Vec::new();
    for img in pristine {
        let (feats, sharp) = niqe_features(img)?;
        let max = sharp.iter().cloned().fold(0.0, f64::max);
        let keep = SHARPNESS_FRACTION * max;
        rows.extend(feats.into_iter().zip(sharp).filter(|(_, s)| *s >= keep).map(|(f, _)| f));
    }
    if rows.len() < 2 {
        return Err(Error::Config("pristine set yields fewer than two sharp patches".into()));
    }
    let (mean, cov) = mean_cov(&rows);
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(NiqeModel {
        mean: mean.iter().copied().collect(),
        covariance: cov.iter().copied().collect::<Vec<_>>(),
        patch_size: PATCH,
        sharpness_threshold: SHARPNESS_FRACTION,
    })
}

/// Distance between the image's patch statistics and the pristine model.
pub fn niqe_score(img: &Image, model: &NiqeModel) -> Result<f64> {
    let d = model.dim();
    if model.covariance.len() != d * d || model.patch_size != PATCH {
        return Err(invalid("malformed NIQE model"));
    }
    let (feats, _) = niqe_features(img)?;
    if feats[0].len() != d {
        return Err(invalid(format!("NIQE model has {d} features, image yields {}", feats[0].len())));
    }
    let (mu2, cov2) = mean_cov(&feats);
    let mu1 = DVector::from_column_slice(&model.mean);
    // nalgebra stores column-major; the covariance is symmetric so either order works
    let cov1 = DMatrix::from_column_slice(d, d, &model.covariance);
    let pooled = (cov1 + cov2) * 0.5;
    let pinv = pooled
        .pseudo_inverse(1e-10)
        .map_err(|e| invalid(format!("NIQE covariance inversion failed: {e}")))?;
    let diff = mu1 - mu2;
    let q = (diff.transpose() * pinv * &diff)[(0, 0)];
    Ok(q.max(0.0).sqrt())
}
