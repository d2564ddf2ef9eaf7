//! Gaussian and Laplacian pyramids built on the 5-tap binomial kernel.
//!
//! `laplacian_collapse(laplacian_decompose(img, n))` reproduces `img` up to
//! float rounding: every detail level is defined as the exact difference the
//! collapse adds back.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imaging::{reflect_index, Image, CHANNELS};

/// `[1, 4, 6, 4, 1] / 16`
pub const KERNEL: [f32; 5] = [0.0625, 0.25, 0.375, 0.25, 0.0625];

/// Per-level multipliers applied to a pyramid before correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScaleVector(Vec<f32>);

impl ScaleVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("scale vector is empty"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(invalid(format!("scale {v} must be finite and non-negative")));
        }
        Ok(Self(values))
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    /// `[1.8, 1.8, 1.8, 1.12]` for four levels; other depths repeat 1.8 on
    /// the detail levels and keep 1.12 on the residual.
    pub fn editing_default(n: usize) -> Self {
        let mut v = vec![1.8; n];
        if let Some(last) = v.last_mut() {
            *last = 1.12;
        }
        Self(v)
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Laplacian pyramid; `levels[0]` is the finest detail band and the last
/// level is the low-frequency residual.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    levels: Vec<Image>,
}

impl Pyramid {
    pub fn from_levels(levels: Vec<Image>) -> Result<Self> {
        if levels.is_empty() {
            return Err(invalid("pyramid needs at least one level"));
        }
        for pair in levels.windows(2) {
            let (h, w) = pair[0].dims();
            if pair[1].dims() != (h / 2, w / 2) || h % 2 != 0 || w % 2 != 0 {
                return Err(invalid(format!(
                    "level sizes {:?} -> {:?} do not halve",
                    pair[0].dims(),
                    pair[1].dims()
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Image] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<Image> {
        self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn base_dims(&self) -> (usize, usize) {
        self.levels[0].dims()
    }

    /// Level `l` in 1-based numbering (1 = finest).
    pub fn level(&self, l: usize) -> &Image {
        &self.levels[l - 1]
    }
}

/// Separable 5-tap filter with reflected borders along one axis.
fn filter_rows(src: &[f32], h: usize, w: usize, taps: &[f32; 5], dst: &mut [f32]) {
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0f32;
            for (k, t) in taps.iter().enumerate() {
                acc += t * row[reflect_index(x as isize + k as isize - 2, w)];
            }
            dst[y * w + x] = acc;
        }
    }
}

fn filter_cols(src: &[f32], h: usize, w: usize, taps: &[f32; 5], dst: &mut [f32]) {
    for y in 0..h {
        let rows: [usize; 5] = std::array::from_fn(|k| reflect_index(y as isize + k as isize - 2, h));
        for x in 0..w {
            let mut acc = 0.0f32;
            for (k, t) in taps.iter().enumerate() {
                acc += t * src[rows[k] * w + x];
            }
            dst[y * w + x] = acc;
        }
    }
}

/// Blur with the binomial kernel, then keep every second row and column.
pub fn downsample2x(img: &Image) -> Result<Image> {
    let (h, w) = img.dims();
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(invalid(format!("downsample2x needs even dimensions, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Image::new(oh, ow, img.space());
    let mut tmp = vec![0f32; h * w];
    let mut blurred = vec![0f32; h * w];
    for c in 0..CHANNELS {
        filter_rows(img.plane(c), h, w, &KERNEL, &mut tmp);
        filter_cols(&tmp, h, w, &KERNEL, &mut blurred);
        let dst = out.plane_mut(c);
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = blurred[(2 * y) * w + 2 * x];
            }
        }
    }
    Ok(out)
}

/// Zero-insertion to double size followed by the binomial kernel scaled by
/// two along each axis, so constants are preserved.
pub fn upsample2x(img: &Image) -> Image {
    let (h, w) = img.dims();
    let (oh, ow) = (2 * h, 2 * w);
    let taps: [f32; 5] = KERNEL.map(|k| 2.0 * k);
    let mut out = Image::new(oh, ow, img.space());
    let mut zeros = vec![0f32; oh * ow];
    let mut tmp = vec![0f32; oh * ow];
    for c in 0..CHANNELS {
        zeros.iter_mut().for_each(|v| *v = 0.0);
        let src = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                zeros[(2 * y) * ow + 2 * x] = src[y * w + x];
            }
        }
        filter_rows(&zeros, oh, ow, &taps, &mut tmp);
        filter_cols(&tmp, oh, ow, &taps, out.plane_mut(c));
    }
    out
}

fn check_divisible(img: &Image, n: usize) -> Result<()> {
    if n == 0 {
        return Err(invalid("pyramid level count must be at least 1"));
    }
    let unit = 1usize << (n - 1);
    let (h, w) = img.dims();
    if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
        return Err(invalid(format!(
            "{h}x{w} image not divisible by 2^(n-1) = {unit} for {n} levels"
        )));
    }
    Ok(())
}

/// `G1 = img`, `G(l+1) = downsample2x(G(l))`, `n` levels in total.
pub fn gaussian_pyramid(img: &Image, n: usize) -> Result<Vec<Image>> {
    check_divisible(img, n)?;
    let mut levels = vec![img.clone()];
    for _ in 1..n {
        let next = downsample2x(levels.last().expect("non-empty"))?;
        levels.push(next);
    }
    Ok(levels)
}

pub fn laplacian_decompose(img: &Image, n: usize) -> Result<Pyramid> {
    let gauss = gaussian_pyramid(img, n)?;
    let mut levels = Vec::with_capacity(n);
    for l in 0..n - 1 {
        levels.push(gauss[l].sub(&upsample2x(&gauss[l + 1]))?);
    }
    levels.push(gauss[n - 1].clone());
    Ok(Pyramid { levels })
}

pub fn laplacian_collapse(pyr: &Pyramid) -> Result<Image> {
    let mut levels = pyr.levels.iter().rev();
    let mut acc = levels
        .next()
        .ok_or_else(|| invalid("cannot collapse an empty pyramid"))?
        .clone();
    for detail in levels {
        acc = upsample2x(&acc).add(detail)?;
    }
    Ok(acc)
}

pub fn scale_levels(pyr: &Pyramid, s: &ScaleVector) -> Result<Pyramid> {
    if s.len() != pyr.len() {
        return Err(invalid(format!(
            "scale vector has {} entries for a {}-level pyramid",
            s.len(),
            pyr.len()
        )));
    }
    Ok(Pyramid {
        levels: pyr
            .levels
            .iter()
            .zip(s.values())
            .map(|(lvl, &k)| lvl.scale(k))
            .collect(),
    })
}

/// Maps a level into `[0, 1]` for viewing: detail bands are offset by 0.5,
/// the residual is left as is.
pub fn visualize_level(pyr: &Pyramid, index: usize) -> Image {
    let lvl = &pyr.levels[index];
    if index + 1 == pyr.len() {
        lvl.clamp01()
    } else {
        lvl.map(|v| (v + 0.5).clamp(0.0, 1.0))
    }
}
