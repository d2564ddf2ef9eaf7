//! Exposure correction of arbitrary-size images.

mod bgu;

pub use bgu::{bgu_apply, bgu_fit, BilateralGrid, BGU_LAMBDA, GRID_DEPTH, GRID_HEIGHT, GRID_WIDTH};

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::imaging::{fit_within, resize_bilinear, Image};
use crate::model::{Checkpoint, Corrector};
use crate::pyramid::{laplacian_decompose, ScaleVector};

/// Longest side processed directly by the network.
pub const DEFAULT_MAX_DIM: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Direct,
    Guided,
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct Timings {
    pub resize_ms: f64,
    pub network_ms: f64,
    pub bgu_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug)]
pub struct Correction {
    pub image: Image,
    pub route: Route,
    pub timings: Timings,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Loads the corrector weights from a checkpoint file.
pub fn load_corrector(path: impl AsRef<Path>) -> Result<Corrector<f32>> {
    let ck = Checkpoint::load(path)?;
    let mut model = Corrector::new(ck.model.clone(), 0)?;
    model.load_tensors(&ck.tensors)?;
    Ok(model)
}

/// Network pass at the image's own resolution: reflect-pad to a multiple of
/// `2^(n-1)`, run, crop and clamp.
pub fn correct_direct(img: &Image, model: &Corrector<f32>, s: &ScaleVector) -> Result<Image> {
    let n = model.config().n;
    let unit = 1usize << (n - 1);
    let (h, w) = img.dims();
    let (ph, pw) = (h.div_ceil(unit) * unit, w.div_ceil(unit) * unit);
    let padded = if (ph, pw) == (h, w) { img.clone() } else { img.pad_reflect(ph, pw)? };
    let pyr = laplacian_decompose(&padded, n)?;
    let out = model.run(&pyr, s)?;
    let out = if (ph, pw) == (h, w) { out } else { out.crop(0, 0, h, w)? };
    Ok(out.clamp01())
}

/// Corrects `img`, routing images larger than `max_dim` through the guided
/// upsampling path.
pub fn correct(img: &Image, model: &Corrector<f32>, s: &ScaleVector, max_dim: usize) -> Result<Correction> {
    if max_dim == 0 {
        return Err(invalid("max_dim must be positive"));
    }
    if s.len() != model.config().n {
        return Err(invalid(format!(
            "scale vector has {} entries, model has {} levels",
            s.len(),
            model.config().n
        )));
    }
    let start = Instant::now();
    let (h, w) = img.dims();
    if h.max(w) <= max_dim {
        let t = Instant::now();
        let image = correct_direct(img, model, s)?;
        let network_ms = ms(t);
        return Ok(Correction {
            image,
            route: Route::Direct,
            timings: Timings {
                network_ms,
                total_ms: ms(start),
                ..Timings::default()
            },
        });
    }
    let t = Instant::now();
    let (lh, lw) = fit_within(h, w, max_dim);
    let low_in = resize_bilinear(img, lh, lw)?;
    let resize_ms = ms(t);
    let t = Instant::now();
    let low_out = correct_direct(&low_in, model, s)?;
    let network_ms = ms(t);
    let t = Instant::now();
    let grid = bgu_fit(&low_in, &low_out)?;
    let image = bgu_apply(&grid, img);
    let bgu_ms = ms(t);
    Ok(Correction {
        image,
        route: Route::Guided,
        timings: Timings {
            resize_ms,
            network_ms,
            bgu_ms,
            total_ms: ms(start),
        },
    })
}
