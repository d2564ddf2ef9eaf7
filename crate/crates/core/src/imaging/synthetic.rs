//! Procedural test scenes: smooth color ramps, hard-edged shapes and
//! oriented gratings. Used to build desk-scale datasets and test fixtures
//! without shipping photographs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ColorSpace, Image, CHANNELS};

const SEED_SALT: u64 = 0x5eed_0001;

enum Shape {
    Disc { cy: f32, cx: f32, r: f32 },
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
}

impl Shape {
    fn contains(&self, y: f32, x: f32) -> bool {
        match *self {
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
        }
    }
}

struct Grating {
    fy: f32,
    fx: f32,
    phase: f32,
    amp: f32,
}

/// A deterministic, well-exposed sRGB scene of the requested size.
pub fn scene(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SEED_SALT);
    let (hf, wf) = (height as f32, width as f32);

    let c0: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.8));
    let c1: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.8));
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (dy, dx) = angle.sin_cos();

    let shapes: Vec<(Shape, [f32; 3])> = (0..rng.gen_range(5..10))
        .map(|_| {
            let color = std::array::from_fn(|_| rng.gen_range(0.05..0.95));
            let shape = if rng.gen_bool(0.5) {
                Shape::Disc {
                    cy: rng.gen_range(0.0..hf),
                    cx: rng.gen_range(0.0..wf),
                    r: rng.gen_range(0.08..0.3) * hf.min(wf),
                }
            } else {
                let (y0, x0) = (rng.gen_range(0.0..hf), rng.gen_range(0.0..wf));
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + rng.gen_range(0.1..0.5) * hf,
                    x1: x0 + rng.gen_range(0.1..0.5) * wf,
                }
            };
            (shape, color)
        })
        .collect();

    let gratings: Vec<Grating> = (0..3)
        .map(|_| {
            let period = rng.gen_range(3.0f32..7.0);
            let theta = rng.gen_range(0.0..std::f32::consts::PI);
            let k = std::f32::consts::TAU / period;
            Grating {
                fy: k * theta.sin(),
                fx: k * theta.cos(),
                phase: rng.gen_range(0.0..std::f32::consts::TAU),
                amp: rng.gen_range(0.1..0.16),
            }
        })
        .collect();

    let mut img = Image::new(height, width, ColorSpace::Srgb);
    let norm = (hf * dy.abs() + wf * dx.abs()).max(1.0);
    for y in 0..height {
        for x in 0..width {
            let (yf, xf) = (y as f32, x as f32);
            let t = ((yf * dy + xf * dx) / norm + 0.5).clamp(0.0, 1.0);
            let mut px: [f32; 3] = std::array::from_fn(|c| c0[c] + t * (c1[c] - c0[c]));
            for (shape, color) in &shapes {
                if shape.contains(yf, xf) {
                    px = *color;
                }
            }
            let tex: f32 = gratings
                .iter()
                .map(|g| g.amp * (g.fy * yf + g.fx * xf + g.phase).sin())
                .sum();
            for (c, v) in px.iter().enumerate().take(CHANNELS) {
                img.set(c, y, x, (v + tex).clamp(0.0, 1.0));
            }
        }
    }
    img
}
