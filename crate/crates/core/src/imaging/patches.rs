use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{invalid, Result};

/// Patch size and the filters that decide which training patches are kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub size: usize,
    pub min_mean_intensity: f64,
    pub max_mean_intensity: f64,
    pub min_mean_gradient: f64,
    pub flip_probability: f64,
}

impl PatchSpec {
    /// Thresholds used for the published training runs.
    pub fn standard(size: usize) -> Self {
        Self {
            size,
            min_mean_intensity: 0.02,
            max_mean_intensity: 0.98,
            min_mean_gradient: 0.06,
            flip_probability: 0.5,
        }
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        if !(0.0 <= self.min_mean_intensity
            && self.min_mean_intensity < self.max_mean_intensity
            && self.max_mean_intensity <= 1.0)
        {
            return Err(invalid(format!(
                "patch intensity bounds must satisfy 0 <= min < max <= 1, got [{}, {}]",
                self.min_mean_intensity, self.max_mean_intensity
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(invalid("flip probability must lie in [0, 1]"));
        }
        let unit = 1usize << levels.saturating_sub(1);
        if self.size == 0 || self.size % unit != 0 {
            return Err(invalid(format!(
                "patch size {} not divisible by 2^(n-1) = {unit}",
                self.size
            )));
        }
        Ok(())
    }

    /// True when `patch` passes both filters.
    pub fn accepts(&self, patch: &Image) -> bool {
        let m = mean_intensity(patch);
        m > self.min_mean_intensity
            && m < self.max_mean_intensity
            && mean_gradient_magnitude(patch) >= self.min_mean_gradient
    }
}

pub fn mean_intensity(img: &Image) -> f64 {
    img.mean()
}

/// Mean over pixels of the luma gradient magnitude, using central
/// differences `(f[i+1] - f[i-1]) / 2` with replicated borders.
pub fn mean_gradient_magnitude(img: &Image) -> f64 {
    let (h, w) = img.dims();
    let luma = img.luma();
    let at = |y: usize, x: usize| luma[y * w + x] as f64;
    let mut total = 0.0;
    for y in 0..h {
        let (ym, yp) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            let (xm, xp) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let gx = (at(y, xp) - at(y, xm)) * 0.5;
            let gy = (at(yp, x) - at(ym, x)) * 0.5;
            total += (gx * gx + gy * gy).sqrt();
        }
    }
    total / (h * w) as f64
}

/// Cuts aligned input/target patches from a randomly offset, non-overlapping
/// tiling of the pair, keeps the tiles whose input passes the filters and
/// mirrors each kept pair with probability `spec.flip_probability`.
///
/// The result depends only on the pair, the spec and the seed.
pub fn extract_patches(
    pair: (&Image, &Image),
    spec: &PatchSpec,
    seed: u64,
) -> Result<Vec<(Image, Image)>> {
    let (input, target) = pair;
    input.ensure_same_dims(target)?;
    let (h, w) = input.dims();
    let size = spec.size;
    if size == 0 {
        return Err(invalid("patch size must be positive"));
    }
    if h < size || w < size {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oy = rng.gen_range(0..=(h % size));
    let ox = rng.gen_range(0..=(w % size));
    let mut out = Vec::new();
    for ty in 0..(h - oy) / size {
        for tx in 0..(w - ox) / size {
            let flip = rng.gen_bool(spec.flip_probability);
            let (y0, x0) = (oy + ty * size, ox + tx * size);
            let inp = input.crop(y0, x0, size, size)?;
            if !spec.accepts(&inp) {
                continue;
            }
            let tgt = target.crop(y0, x0, size, size)?;
            if flip {
                out.push((inp.flip_horizontal(), tgt.flip_horizontal()));
            } else {
                out.push((inp, tgt));
            }
        }
    }
    Ok(out)
}
