//! Bilateral guided upsampling: local affine colour transforms fitted on a
//! low-resolution input/output pair in a (x, y, luma) grid, then sliced at
//! full resolution.

use nalgebra::{Matrix3x4, Matrix4, Matrix4x3};
use rayon::prelude::*;

use crate::error::Result;
use crate::imaging::{Image, CHANNELS, LUMA_WEIGHTS};

pub const GRID_WIDTH: usize = 22;
pub const GRID_HEIGHT: usize = 22;
pub const GRID_DEPTH: usize = 8;
/// Ridge weight pulling each cell toward the global fit.
pub const BGU_LAMBDA: f64 = 1e-3;

const ROWS_PER_CHUNK: usize = 16;

/// Affine RGB transforms (3x4, acting on `[r, g, b, 1]`) on a
/// `22 x 22 x 8` lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct BilateralGrid {
    cells: Vec<Matrix3x4<f64>>,
}

impl Default for BilateralGrid {
    fn default() -> Self {
        Self::identity()
    }
}

impl BilateralGrid {
    pub fn identity() -> Self {
        Self::uniform(Matrix3x4::identity())
    }

    pub fn uniform(m: Matrix3x4<f64>) -> Self {
        Self {
            cells: vec![m; GRID_WIDTH * GRID_HEIGHT * GRID_DEPTH],
        }
    }

    /// `(width, height, depth)` in cells.
    pub fn dims(&self) -> (usize, usize, usize) {
        (GRID_WIDTH, GRID_HEIGHT, GRID_DEPTH)
    }

    pub fn cell(&self, ix: usize, iy: usize, iz: usize) -> &Matrix3x4<f64> {
        &self.cells[index(ix, iy, iz)]
    }

    pub fn is_finite(&self) -> bool {
        self.cells.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

fn index(ix: usize, iy: usize, iz: usize) -> usize {
    (iz * GRID_HEIGHT + iy) * GRID_WIDTH + ix
}

#[derive(Clone, Copy)]
struct Axis {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis(pos: f64, cells: usize) -> Axis {
    let p = pos.clamp(0.0, (cells - 1) as f64);
    let lo = p.floor() as usize;
    Axis {
        lo,
        hi: (lo + 1).min(cells - 1),
        frac: p - lo as f64,
    }
}

fn spatial(i: usize, n: usize, cells: usize) -> Axis {
    axis((i as f64 + 0.5) / n as f64 * cells as f64 - 0.5, cells)
}

fn luma_axis(rgb: [f64; 3]) -> Axis {
    let l: f64 = rgb
        .iter()
        .zip(LUMA_WEIGHTS)
        .map(|(v, w)| v.clamp(0.0, 1.0) * w as f64)
        .sum();
    axis(l * GRID_DEPTH as f64 - 0.5, GRID_DEPTH)
}

/// The 8 trilinear neighbours of a sample and their weights.
fn corners(ax: Axis, ay: Axis, az: Axis) -> [(usize, f64); 8] {
    let mut out = [(0usize, 0f64); 8];
    let mut k = 0;
    for (iz, wz) in [(az.lo, 1.0 - az.frac), (az.hi, az.frac)] {
        for (iy, wy) in [(ay.lo, 1.0 - ay.frac), (ay.hi, ay.frac)] {
            for (ix, wx) in [(ax.lo, 1.0 - ax.frac), (ax.hi, ax.frac)] {
                out[k] = (index(ix, iy, iz), wx * wy * wz);
                k += 1;
            }
        }
    }
    out
}

fn pixel(img: &Image, y: usize, x: usize) -> [f64; 3] {
    std::array::from_fn(|c| img.get(c, y, x) as f64)
}

#[derive(Clone)]
struct Normal {
    a: Vec<Matrix4<f64>>,
    b: Vec<Matrix4x3<f64>>,
    global_a: Matrix4<f64>,
    global_b: Matrix4x3<f64>,
}

impl Normal {
    fn zero() -> Self {
        let n = GRID_WIDTH * GRID_HEIGHT * GRID_DEPTH;
        Self {
            a: vec![Matrix4::zeros(); n],
            b: vec![Matrix4x3::zeros(); n],
            global_a: Matrix4::zeros(),
            global_b: Matrix4x3::zeros(),
        }
    }

    fn merge(&mut self, other: &Normal) {
        for (x, y) in self.a.iter_mut().zip(&other.a) {
            *x += y;
        }
        for (x, y) in self.b.iter_mut().zip(&other.b) {
            *x += y;
        }
        self.global_a += other.global_a;
        self.global_b += other.global_b;
    }
}

/// `(A + lambda I) M^T = B + lambda prior^T`, falling back to the prior when
/// the system cannot be factorized.
fn ridge_solve(a: &Matrix4<f64>, b: &Matrix4x3<f64>, prior: &Matrix3x4<f64>) -> Matrix3x4<f64> {
    let lhs = a + Matrix4::identity() * BGU_LAMBDA;
    let rhs = b + prior.transpose() * BGU_LAMBDA;
    match lhs.cholesky() {
        Some(ch) => ch.solve(&rhs).transpose(),
        None => *prior,
    }
}

/// Fits per-cell affine maps taking `low_in` to `low_out`.
pub fn bgu_fit(low_in: &Image, low_out: &Image) -> Result<BilateralGrid> {
    low_in.ensure_same_dims(low_out)?;
    let (h, w) = low_in.dims();
    let xs: Vec<Axis> = (0..w).map(|x| spatial(x, w, GRID_WIDTH)).collect();
    // fixed-size row chunks reduced in order keep the result independent of
    // the thread count
    let partials: Vec<Normal> = (0..h)
        .collect::<Vec<_>>()
        .par_chunks(ROWS_PER_CHUNK)
        .map(|rows| {
            let mut acc = Normal::zero();
            for &y in rows {
                let ay = spatial(y, h, GRID_HEIGHT);
                for (x, &ax) in xs.iter().enumerate() {
                    let i = pixel(low_in, y, x);
                    let o = pixel(low_out, y, x);
                    let v = nalgebra::Vector4::new(i[0], i[1], i[2], 1.0);
                    let t = nalgebra::RowVector3::new(o[0], o[1], o[2]);
                    let vv = v * v.transpose();
                    let vt = v * t;
                    acc.global_a += vv;
                    acc.global_b += vt;
                    for (k, wt) in corners(ax, ay, luma_axis(i)) {
                        if wt > 0.0 {
                            acc.a[k] += vv * wt;
                            acc.b[k] += vt * wt;
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = Normal::zero();
    for p in &partials {
        total.merge(p);
    }
    let global = ridge_solve(&total.global_a, &total.global_b, &Matrix3x4::identity());
    let cells = total
        .a
        .par_iter()
        .zip(&total.b)
        .map(|(a, b)| ridge_solve(a, b, &global))
        .collect();
    Ok(BilateralGrid { cells })
}

/// Slices the grid at every pixel of `full_in` and clamps to `[0, 1]`.
pub fn bgu_apply(grid: &BilateralGrid, full_in: &Image) -> Image {
    let (h, w) = full_in.dims();
    let xs: Vec<Axis> = (0..w).map(|x| spatial(x, w, GRID_WIDTH)).collect();
    let rows: Vec<Vec<f32>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let ay = spatial(y, h, GRID_HEIGHT);
            let mut row = vec![0f32; CHANNELS * w];
            for (x, &ax) in xs.iter().enumerate() {
                let i = pixel(full_in, y, x);
                let mut m = Matrix3x4::<f64>::zeros();
                for (k, wt) in corners(ax, ay, luma_axis(i)) {
                    if wt > 0.0 {
                        m += grid.cells[k] * wt;
                    }
                }
                let v = nalgebra::Vector4::new(i[0], i[1], i[2], 1.0);
                let o = m * v;
                for c in 0..CHANNELS {
                    row[c * w + x] = o[c].clamp(0.0, 1.0) as f32;
                }
            }
            row
        })
        .collect();
    let mut out = Image::new(h, w, full_in.space());
    for (y, row) in rows.iter().enumerate() {
        for c in 0..CHANNELS {
            out.plane_mut(c)[y * w..(y + 1) * w].copy_from_slice(&row[c * w..(c + 1) * w]);
        }
    }
    out
}
