//! Pyramidal block-matching optical flow for datasets that ship without
//! ground-truth flow.
//!
//! The estimate follows the `BAFLOW01` convention: a pixel at `p` in frame `t`
//! is found at `p + flow(p)` in frame `t + 1`.

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::formats::FlowField;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockMatchParams {
    pub levels: usize,
    pub block: usize,
    /// Search radius at the coarsest level, in that level's pixels.
    pub coarse_radius: isize,
    /// Refinement radius at every finer level.
    pub refine_radius: isize,
}

impl Default for BlockMatchParams {
    fn default() -> Self {
        Self { levels: 3, block: 8, coarse_radius: 4, refine_radius: 1 }
    }
}

fn gray(img: &RgbImage) -> Array2<f32> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        let p = img.get_pixel(x as u32, y as u32).0;
        0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32
    })
}

fn half(a: &Array2<f32>) -> Array2<f32> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(y, x)| {
        0.25 * (a[[2 * y, 2 * x]] + a[[2 * y + 1, 2 * x]] + a[[2 * y, 2 * x + 1]] + a[[2 * y + 1, 2 * x + 1]])
    })
}

/// Mean absolute difference of the block at `(y0, x0)` in `a` against the
/// same block displaced by `(dy, dx)` in `b`, over overlapping pixels.
fn block_cost(a: &Array2<f32>, b: &Array2<f32>, y0: usize, x0: usize, size: usize, dy: isize, dx: isize) -> f32 {
    let (h, w) = a.dim();
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in y0..(y0 + size).min(h) {
        let yy = y as isize + dy;
        if yy < 0 || yy >= h as isize {
            continue;
        }
        for x in x0..(x0 + size).min(w) {
            let xx = x as isize + dx;
            if xx < 0 || xx >= w as isize {
                continue;
            }
            sum += (a[[y, x]] - b[[yy as usize, xx as usize]]).abs();
            n += 1;
        }
    }
    if n * 4 < size * size {
        f32::INFINITY
    } else {
        sum / n as f32
    }
}

/// Estimates a dense flow field from `a` to `b`; the displacement is constant
/// within each block of the finest level.
pub fn estimate_flow(a: &RgbImage, b: &RgbImage, params: &BlockMatchParams) -> FlowField {
    let (w, h) = a.dimensions();
    let (h, w) = (h as usize, w as usize);
    let mut pa = vec![gray(a)];
    let mut pb = vec![gray(b)];
    for _ in 1..params.levels.max(1) {
        let (lh, lw) = pa.last().expect("nonempty").dim();
        if lh < 2 * params.block || lw < 2 * params.block {
            break;
        }
        pa.push(half(pa.last().expect("nonempty")));
        pb.push(half(pb.last().expect("nonempty")));
    }
    let bs = params.block;
    // block displacement grid at the current level, (dy, dx)
    let mut prev: Option<(Array2<(isize, isize)>, usize)> = None;
    for level in (0..pa.len()).rev() {
        let (la, lb) = (&pa[level], &pb[level]);
        let (lh, lw) = la.dim();
        let (gh, gw) = (lh.div_ceil(bs), lw.div_ceil(bs));
        let mut grid = Array2::from_elem((gh, gw), (0isize, 0isize));
        for gy in 0..gh {
            for gx in 0..gw {
                let (init, radius) = match &prev {
                    None => ((0, 0), params.coarse_radius),
                    Some((pg, _)) => {
                        let (py, px) = ((gy * bs) / 2 / bs, (gx * bs) / 2 / bs);
                        let (dy, dx) = pg[[py.min(pg.dim().0 - 1), px.min(pg.dim().1 - 1)]];
                        ((2 * dy, 2 * dx), params.refine_radius)
                    }
                };
                let mut best = (f32::INFINITY, init);
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let cand = (init.0 + dy, init.1 + dx);
                        let c = block_cost(la, lb, gy * bs, gx * bs, bs, cand.0, cand.1);
                        // prefer small displacements on ties
                        let better = c < best.0
                            || (c == best.0 && cand.0.abs() + cand.1.abs() < best.1 .0.abs() + best.1 .1.abs());
                        if better {
                            best = (c, cand);
                        }
                    }
                }
                grid[[gy, gx]] = best.1;
            }
        }
        prev = Some((grid, level));
    }
    let (grid, _) = prev.expect("at least one level");
    let mut field = FlowField::uniform(h, w, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = grid[[y / bs, x / bs]];
            field.0[[y, x, 0]] = dx as f32;
            field.0[[y, x, 1]] = dy as f32;
        }
    }
    field
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn texture(w: u32, h: u32, shift: i64) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let xs = x as i64 - shift;
            let v = ((xs * 37 + y as i64 * 91).rem_euclid(251) as f64 * 0.7 + (xs as f64 * 0.3).sin() * 40.0 + 60.0) as u8;
            Rgb([v, v.wrapping_mul(3), 255 - v])
        })
    }

    #[test]
    fn recovers_belt_translation() {
        let a = texture(64, 64, 0);
        let b = texture(64, 64, 8);
        let f = estimate_flow(&a, &b, &BlockMatchParams::default());
        let mut hits = 0;
        let mut total = 0;
        for y in 8..56 {
            for x in 8..48 {
                total += 1;
                if f.0[[y, x, 0]] == 8.0 && f.0[[y, x, 1]] == 0.0 {
                    hits += 1;
                }
            }
        }
        assert!(hits * 10 >= total * 9, "{hits}/{total}");
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let a = texture(32, 32, 0);
        let f = estimate_flow(&a, &a, &BlockMatchParams::default());
        assert!(f.0.iter().all(|&v| v == 0.0));
    }
}
