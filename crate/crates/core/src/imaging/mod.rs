//! Planar float images and the pixel-level operations the rest of the crate
//! builds on: sRGB transfer, exposure emulation, resizing, padding and
//! simple image statistics.

mod dataset;
mod io;
mod patches;
pub mod synthetic;

pub use dataset::{ev_file_name, synthesize_dataset, DatasetManifest, ManifestEntry, Split, DEFAULT_EVS};
pub use io::{decode_image, encode_png, load_image, save_image};
pub use patches::{extract_patches, mean_gradient_magnitude, mean_intensity, PatchSpec};

use crate::error::{invalid, Result};

/// Number of color channels; every image in the crate is RGB.
pub const CHANNELS: usize = 3;

/// Rec.709 luma weights.
pub const LUMA_WEIGHTS: [f32; 3] = [0.2126, 0.7152, 0.0722];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ColorSpace {
    Srgb,
    Linear,
}

/// A three-channel float image stored as planes (`c`, then rows, then columns).
///
/// Values are nominally in `[0, 1]`; intermediate results (pyramid detail
/// levels, network outputs during training) may leave that range.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
    space: ColorSpace,
}

impl Image {
    pub fn new(height: usize, width: usize, space: ColorSpace) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
            space,
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
            space: ColorSpace::Srgb,
        }
    }

    pub fn from_planar(
        height: usize,
        width: usize,
        data: Vec<f32>,
        space: ColorSpace,
    ) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(invalid(format!(
                "planar buffer has {} values, expected {}x{}x3 = {}",
                data.len(),
                height,
                width,
                height * width * CHANNELS
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite pixel value at index {bad}")));
        }
        Ok(Self {
            height,
            width,
            data,
            space,
        })
    }

    /// Builds an image by evaluating `f(channel, y, x)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut img = Self::new(height, width, ColorSpace::Srgb);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    img.data[(c * height + y) * width + x] = f(c, y, x);
                }
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn with_space(mut self, space: ColorSpace) -> Self {
        self.space = space;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
            space: self.space,
        }
    }

    fn zip_map(&self, other: &Image, f: impl Fn(f32, f32) -> f32) -> Result<Image> {
        self.ensure_same_dims(other)?;
        Ok(Image {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            space: self.space,
        })
    }

    pub fn add(&self, other: &Image) -> Result<Image> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Image) -> Result<Image> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f32) -> Image {
        self.map(|v| v * factor)
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn ensure_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(invalid(format!(
                "image dimensions differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Rec.709 luma plane, row-major.
    pub fn luma(&self) -> Vec<f32> {
        let n = self.height * self.width;
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        (0..n)
            .map(|i| LUMA_WEIGHTS[0] * r[i] + LUMA_WEIGHTS[1] * g[i] + LUMA_WEIGHTS[2] * b[i])
            .collect()
    }

    /// Copies the `h`x`w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(invalid(format!(
                "crop {h}x{w} at ({y0},{x0}) outside {}x{} image",
                self.height, self.width
            )));
        }
        let mut out = Image::new(h, w, self.space);
        for c in 0..CHANNELS {
            for y in 0..h {
                let src = &self.plane(c)[(y0 + y) * self.width + x0..][..w];
                out.plane_mut(c)[y * w..(y + 1) * w].copy_from_slice(src);
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for c in 0..CHANNELS {
            for row in out.plane_mut(c).chunks_mut(self.width) {
                row.reverse();
            }
        }
        out
    }

    /// Pads the bottom and right edges by mirror reflection (edge sample not
    /// repeated) up to `new_h` x `new_w`.
    pub fn pad_reflect(&self, new_h: usize, new_w: usize) -> Result<Image> {
        if new_h < self.height || new_w < self.width {
            return Err(invalid("pad target smaller than image"));
        }
        let mut out = Image::new(new_h, new_w, self.space);
        for c in 0..CHANNELS {
            for y in 0..new_h {
                let sy = reflect_index(y as isize, self.height);
                for x in 0..new_w {
                    let sx = reflect_index(x as isize, self.width);
                    out.set(c, y, x, self.get(c, sy, sx));
                }
            }
        }
        Ok(out)
    }
}

/// Mirror-reflects an index into `[0, n)` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`). Degenerate length-1 axes map everything to 0.
#[inline]
pub fn reflect_index(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

#[inline]
fn srgb_decode(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn srgb_encode(v: f64) -> f64 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_to_linear(img: &Image) -> Result<Image> {
    if img.space != ColorSpace::Srgb {
        return Err(invalid("srgb_to_linear expects an sRGB-tagged image"));
    }
    let mut out = img.map(|v| srgb_decode(v as f64) as f32);
    out.space = ColorSpace::Linear;
    Ok(out)
}

pub fn linear_to_srgb(img: &Image) -> Result<Image> {
    if img.space != ColorSpace::Linear {
        return Err(invalid("linear_to_srgb expects a linear-tagged image"));
    }
    let mut out = img.map(|v| srgb_encode(v as f64) as f32);
    out.space = ColorSpace::Srgb;
    Ok(out)
}

/// Largest exposure change accepted by [`apply_relative_ev`].
pub const MAX_RELATIVE_EV: f64 = 3.0;

/// Emulates re-rendering at a different exposure: linearize, scale by
/// `2^ev`, clip to `[0, 1]` and re-encode.
pub fn apply_relative_ev(img: &Image, ev: f64) -> Result<Image> {
    if img.space != ColorSpace::Srgb {
        return Err(invalid("apply_relative_ev expects an sRGB-tagged image"));
    }
    if !ev.is_finite() || ev.abs() > MAX_RELATIVE_EV {
        return Err(invalid(format!(
            "relative EV {ev} outside [-{MAX_RELATIVE_EV}, {MAX_RELATIVE_EV}]"
        )));
    }
    if ev == 0.0 {
        return Ok(img.clone());
    }
    let gain = 2f64.powf(ev);
    Ok(img.map(|v| {
        let lin = (srgb_decode(v as f64) * gain).clamp(0.0, 1.0);
        srgb_encode(lin) as f32
    }))
}

/// Sampling taps for one output coordinate of a half-pixel-centred linear
/// resampler: `out = (1 - frac) * in[lo] + frac * in[hi]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearTap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f32,
}

pub(crate) fn linear_taps(src: usize, dst: usize) -> Vec<LinearTap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            LinearTap {
                lo,
                hi,
                frac: (pos - lo as f64) as f32,
            }
        })
        .collect()
}

/// Bilinear resize with half-pixel-centred sampling and clamped borders.
pub fn resize_bilinear(img: &Image, new_h: usize, new_w: usize) -> Result<Image> {
    if new_h == 0 || new_w == 0 {
        return Err(invalid(format!("cannot resize to {new_h}x{new_w}")));
    }
    if img.dims() == (new_h, new_w) {
        return Ok(img.clone());
    }
    let ty = linear_taps(img.height, new_h);
    let tx = linear_taps(img.width, new_w);
    let mut out = Image::new(new_h, new_w, img.space);
    let mut rows = vec![0f32; img.height * new_w];
    for c in 0..CHANNELS {
        let src = img.plane(c);
        for y in 0..img.height {
            let row = &src[y * img.width..(y + 1) * img.width];
            for (x, t) in tx.iter().enumerate() {
                rows[y * new_w + x] = row[t.lo] + t.frac * (row[t.hi] - row[t.lo]);
            }
        }
        let dst = out.plane_mut(c);
        for (y, t) in ty.iter().enumerate() {
            for x in 0..new_w {
                let a = rows[t.lo * new_w + x];
                let b = rows[t.hi * new_w + x];
                dst[y * new_w + x] = a + t.frac * (b - a);
            }
        }
    }
    Ok(out)
}

/// Output size that fits `max_dim` on the longer side while keeping aspect.
pub fn fit_within(h: usize, w: usize, max_dim: usize) -> (usize, usize) {
    let longest = h.max(w);
    if longest <= max_dim {
        return (h, w);
    }
    let s = max_dim as f64 / longest as f64;
    let nh = ((h as f64 * s).round() as usize).clamp(1, max_dim);
    let nw = ((w as f64 * s).round() as usize).clamp(1, max_dim);
    (nh, nw)
}
