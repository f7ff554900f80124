//! Raster helpers shared by the pipeline stages: tensor conversion, resizing,
//! binary morphology and connected components.

use std::collections::VecDeque;

use image::{imageops, RgbImage};
use ndarray::{Array2, Array3};

/// Binary mask, `true` = foreground / unwanted.
pub type Mask = Array2<bool>;

/// `(3, H, W)` tensor in `[0, 1]`.
pub fn to_tensor(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let raw = img.as_raw();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        raw[(y * w as usize + x) * 3 + c] as f32 / 255.0
    })
}

pub fn from_tensor(t: &Array3<f32>) -> RgbImage {
    let (_, h, w) = t.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (t[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn resize_rgb(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.dimensions() == (width, height) {
        return img.clone();
    }
    imageops::resize(img, width, height, imageops::FilterType::Triangle)
}

pub fn resize_mask_nearest(mask: &Mask, h: usize, w: usize) -> Mask {
    let (mh, mw) = mask.dim();
    if (mh, mw) == (h, w) {
        return mask.clone();
    }
    Array2::from_shape_fn((h, w), |(y, x)| mask[[(y * mh) / h, (x * mw) / w]])
}

pub fn count(mask: &Mask) -> usize {
    mask.iter().filter(|&&v| v).count()
}

fn neighbourhood_reduce(mask: &Mask, want: bool) -> Mask {
    // dilation when want = true (any neighbour set), erosion when false
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let y0 = y.saturating_sub(1);
        let x0 = x.saturating_sub(1);
        let y1 = (y + 1).min(h - 1);
        let x1 = (x + 1).min(w - 1);
        let mut hit = false;
        for yy in y0..=y1 {
            for xx in x0..=x1 {
                if mask[[yy, xx]] == want {
                    hit = true;
                }
            }
        }
        if want {
            hit
        } else {
            !hit
        }
    })
}

/// 3x3 dilation; out-of-image neighbours are ignored.
pub fn dilate3(mask: &Mask) -> Mask {
    neighbourhood_reduce(mask, true)
}

/// 3x3 erosion; out-of-image neighbours are ignored.
pub fn erode3(mask: &Mask) -> Mask {
    neighbourhood_reduce(mask, false)
}

pub fn close3(mask: &Mask) -> Mask {
    erode3(&dilate3(mask))
}

const N4: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
const N8: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Labels connected foreground components (1-based, raster order of first
/// pixel). Returns the label map and the size of each component
/// (`sizes[label - 1]`).
pub fn connected_components(mask: &Mask, eight: bool) -> (Array2<u32>, Vec<usize>) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut sizes = Vec::new();
    let nbrs: &[(isize, isize)] = if eight { &N8 } else { &N4 };
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || labels[[y, x]] != 0 {
                continue;
            }
            let id = sizes.len() as u32 + 1;
            let mut size = 0;
            labels[[y, x]] = id;
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                size += 1;
                for &(dy, dx) in nbrs {
                    let ny = cy as isize + dy;
                    let nx = cx as isize + dx;
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                        labels[[ny, nx]] = id;
                        queue.push_back((ny, nx));
                    }
                }
            }
            sizes.push(size);
        }
    }
    (labels, sizes)
}

/// Drops 8-connected components with fewer than `min_size` pixels.
pub fn remove_small_components(mask: &Mask, min_size: usize) -> Mask {
    if min_size <= 1 {
        return mask.clone();
    }
    let (labels, sizes) = connected_components(mask, true);
    labels.mapv(|l| l != 0 && sizes[l as usize - 1] >= min_size)
}

/// Fills background regions not 4-connected to the image border.
pub fn fill_holes(mask: &Mask) -> Mask {
    let (h, w) = mask.dim();
    let mut outside = Array2::from_elem((h, w), false);
    let mut queue = VecDeque::new();
    let seed = |y: usize, x: usize, outside: &mut Array2<bool>, queue: &mut VecDeque<(usize, usize)>| {
        if !mask[[y, x]] && !outside[[y, x]] {
            outside[[y, x]] = true;
            queue.push_back((y, x));
        }
    };
    for x in 0..w {
        seed(0, x, &mut outside, &mut queue);
        seed(h - 1, x, &mut outside, &mut queue);
    }
    for y in 0..h {
        seed(y, 0, &mut outside, &mut queue);
        seed(y, w - 1, &mut outside, &mut queue);
    }
    while let Some((y, x)) = queue.pop_front() {
        for &(dy, dx) in &N4 {
            let ny = y as isize + dy;
            let nx = x as isize + dx;
            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                continue;
            }
            let (ny, nx) = (ny as usize, nx as usize);
            if !mask[[ny, nx]] && !outside[[ny, nx]] {
                outside[[ny, nx]] = true;
                queue.push_back((ny, nx));
            }
        }
    }
    outside.mapv(|o| !o)
}

/// Otsu's threshold over values in `[0, 1]` using a 256-bin histogram.
/// Returns the lower edge of the first bin above the split.
pub fn otsu_threshold(values: &Array2<f32>) -> f32 {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    let total: u64 = hist.iter().sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let (mut best, mut best_t) = (-1.0f64, 0usize);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    (best_t as f32 + 1.0) / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Mask {
        Array2::from_shape_fn((h, w), |(y, x)| y >= y0 && y < y1 && x >= x0 && x < x1)
    }

    #[test]
    fn closing_bridges_single_pixel_gaps() {
        let mut m = square(9, 9, 2, 7, 2, 7);
        m[[4, 4]] = false;
        assert_eq!(close3(&m), square(9, 9, 2, 7, 2, 7));
    }

    #[test]
    fn components_and_small_blob_removal() {
        let mut m = square(10, 10, 0, 3, 0, 3);
        m[[8, 8]] = true;
        let (labels, sizes) = connected_components(&m, true);
        assert_eq!(sizes, vec![9, 1]);
        assert_eq!(labels[[8, 8]], 2);
        let cleaned = remove_small_components(&m, 2);
        assert!(!cleaned[[8, 8]] && cleaned[[1, 1]]);
    }

    #[test]
    fn hole_filling_closes_rings_only() {
        let ring = square(7, 7, 1, 6, 1, 6) & !square(7, 7, 2, 5, 2, 5);
        assert_eq!(fill_holes(&ring), square(7, 7, 1, 6, 1, 6));
        // a notch open to the border is not a hole
        let open = square(7, 7, 0, 7, 0, 7) & !square(7, 7, 0, 4, 3, 4);
        assert_eq!(fill_holes(&open), open);
    }

    #[test]
    fn tensor_round_trip() {
        let img = RgbImage::from_fn(5, 3, |x, y| image::Rgb([x as u8 * 40, y as u8 * 60, 7]));
        assert_eq!(from_tensor(&to_tensor(&img)), img);
    }

    #[test]
    fn otsu_splits_bimodal_values() {
        let v = Array2::from_shape_fn((10, 10), |(y, _)| if y < 5 { 0.1 } else { 0.9 });
        let t = otsu_threshold(&v);
        assert!(t > 0.1 && t <= 0.9, "{t}");
    }
}
