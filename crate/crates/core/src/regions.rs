//! Graph-based colour region segmentation (Felzenszwalb-Huttenlocher) with
//! small-region merging.

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegionParams {
    /// Larger values favour larger regions; intensities are in 0..255.
    pub scale: f32,
    /// Gaussian pre-smoothing; 0 disables it.
    pub sigma: f32,
    /// Regions smaller than this are merged into their largest neighbour.
    pub min_size: usize,
}

impl Default for RegionParams {
    fn default() -> Self {
        Self { scale: 100.0, sigma: 0.8, min_size: 25 }
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
    internal: Vec<f32>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n], internal: vec![0.0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize, w: f32) -> usize {
        let (big, small) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.internal[big] = self.internal[big].max(self.internal[small]).max(w);
        big
    }
}

fn smooth(img: &RgbImage, sigma: f32) -> Vec<[f32; 3]> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut px: Vec<[f32; 3]> = img.pixels().map(|p| [p[0] as f32, p[1] as f32, p[2] as f32]).collect();
    if sigma <= 0.0 {
        return px;
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    for horizontal in [true, false] {
        let src = px.clone();
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for (ki, k) in kernel.iter().enumerate() {
                    let o = ki as isize - radius;
                    let (sx, sy) = if horizontal {
                        ((x as isize + o).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + o).clamp(0, h as isize - 1) as usize)
                    };
                    let s = src[sy * w + sx];
                    for c in 0..3 {
                        acc[c] += k * s[c];
                    }
                }
                px[y * w + x] = acc;
            }
        }
    }
    px
}

/// Segments an image into regions labelled `1..=n` in raster order of their
/// first pixel.
pub fn felzenszwalb(img: &RgbImage, params: &RegionParams) -> Array2<u16> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = smooth(img, params.sigma);
    let dist = |a: usize, b: usize| {
        let (p, q) = (px[a], px[b]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
    };
    let mut edges: Vec<(f32, usize, usize)> = Vec::with_capacity(4 * w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                edges.push((dist(i, i + 1), i, i + 1));
            }
            if y + 1 < h {
                edges.push((dist(i, i + w), i, i + w));
                if x + 1 < w {
                    edges.push((dist(i, i + w + 1), i, i + w + 1));
                }
                if x > 0 {
                    edges.push((dist(i, i + w - 1), i, i + w - 1));
                }
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut ds = DisjointSet::new(w * h);
    for &(wt, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra == rb {
            continue;
        }
        let ta = ds.internal[ra] + params.scale / ds.size[ra] as f32;
        let tb = ds.internal[rb] + params.scale / ds.size[rb] as f32;
        if wt <= ta.min(tb) {
            ds.union(ra, rb, wt);
        }
    }
    let labels = compact(&mut ds, w, h);
    merge_small(labels, params.min_size)
}

fn compact(ds: &mut DisjointSet, w: usize, h: usize) -> Array2<u16> {
    let mut ids = vec![0u32; w * h];
    let mut next = 0u32;
    let mut map = std::collections::HashMap::new();
    for (i, id) in ids.iter_mut().enumerate() {
        let r = ds.find(i);
        *id = *map.entry(r).or_insert_with(|| {
            next += 1;
            next
        });
    }
    Array2::from_shape_vec((h, w), ids.into_iter().map(|v| v.min(u16::MAX as u32) as u16).collect()).expect("sized")
}

/// Repeatedly merges regions below `min_size` into the adjacent region with
/// the most pixels, then renumbers in raster order.
pub fn merge_small(mut labels: Array2<u16>, min_size: usize) -> Array2<u16> {
    let (h, w) = labels.dim();
    loop {
        let n = labels.iter().copied().max().unwrap_or(0) as usize;
        let mut size = vec![0usize; n + 1];
        for &l in &labels {
            size[l as usize] += 1;
        }
        let live = size.iter().skip(1).filter(|&&s| s > 0).count();
        let Some(small) = (1..=n).filter(|&l| size[l] > 0 && size[l] < min_size).min_by_key(|&l| (size[l], l)) else { break };
        if live <= 1 {
            break;
        }
        let mut best: Option<u16> = None;
        for y in 0..h {
            for x in 0..w {
                if labels[[y, x]] as usize != small {
                    continue;
                }
                for (dy, dx) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let l = labels[[ny as usize, nx as usize]];
                    if l as usize != small && best.is_none_or(|b| (size[l as usize], l) > (size[b as usize], b)) {
                        best = Some(l);
                    }
                }
            }
        }
        let Some(target) = best else { break };
        labels.mapv_inplace(|l| if l as usize == small { target } else { l });
    }
    renumber(&labels)
}

fn renumber(labels: &Array2<u16>) -> Array2<u16> {
    let mut map = std::collections::HashMap::new();
    let mut next = 0u16;
    labels.mapv(|l| {
        *map.entry(l).or_insert_with(|| {
            next += 1;
            next
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::connected_components;
    use image::Rgb;

    #[test]
    fn uniform_image_is_one_region() {
        let img = RgbImage::from_pixel(20, 15, Rgb([90, 140, 30]));
        let l = felzenszwalb(&img, &RegionParams::default());
        assert!(l.iter().all(|&v| v == 1));
    }

    #[test]
    fn separated_squares_get_their_own_regions() {
        let img = RgbImage::from_fn(40, 40, |x, y| {
            if (5..15).contains(&x) && (5..15).contains(&y) {
                Rgb([230, 20, 20])
            } else if (25..35).contains(&x) && (22..32).contains(&y) {
                Rgb([20, 20, 230])
            } else {
                Rgb([128, 128, 128])
            }
        });
        let l = felzenszwalb(&img, &RegionParams::default());
        let (a, b, bg) = (l[[10, 10]], l[[27, 30]], l[[0, 0]]);
        assert!(a != b && a != bg && b != bg);
        // the square's core region is a single connected blob inside the square
        let sq = l.mapv(|v| v == a);
        let (_, sizes) = connected_components(&sq, false);
        assert_eq!(sizes.len(), 1);
        assert!(sq.indexed_iter().all(|((y, x), &v)| !v || ((4..16).contains(&x) && (4..16).contains(&y))));
        assert!(l.iter().copied().max().unwrap() >= 2);
    }

    #[test]
    fn small_regions_are_absorbed() {
        let mut l = Array2::from_elem((10, 10), 1u16);
        l[[3, 3]] = 2;
        for y in 6..10 {
            for x in 0..10 {
                l[[y, x]] = 3;
            }
        }
        let m = merge_small(l, 5);
        assert_eq!(m[[3, 3]], 1);
        assert_eq!(m[[8, 8]], 2);
    }
}
