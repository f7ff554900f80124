//! Parameter-free tensor operations with their backward passes.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::Real;

pub fn relu_inplace<T: Real>(x: &mut Array3<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Gradient through a ReLU given its *output*.
pub fn relu_backward<T: Real>(out: &Array3<T>, dy: ArrayView3<T>) -> Array3<T> {
    let mut d = dy.to_owned();
    d.zip_mut_with(out, |g, &o| {
        if o <= T::zero() {
            *g = T::zero();
        }
    });
    d
}

/// 2x2 max pooling with stride 2. Returns the pooled map and, per output
/// element, the flat input index that won.
pub fn max_pool2<T: Real>(x: ArrayView3<T>) -> (Array3<T>, Vec<usize>) {
    let (c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array3::<T>::zeros((c, ho, wo));
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (2 * oy, 2 * ox);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = (2 * oy + dy, 2 * ox + dx);
                    if x[[ci, cand.0, cand.1]] > x[[ci, best.0, best.1]] {
                        best = cand;
                    }
                }
                out[[ci, oy, ox]] = x[[ci, best.0, best.1]];
                arg.push((ci * h + best.0) * w + best.1);
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Real>(
    dy: ArrayView3<T>,
    arg: &[usize],
    in_shape: (usize, usize, usize),
) -> Array3<T> {
    let mut dx = vec![T::zero(); in_shape.0 * in_shape.1 * in_shape.2];
    for (&i, &g) in arg.iter().zip(dy.iter()) {
        dx[i] = dx[i] + g;
    }
    Array3::from_shape_vec(in_shape, dx).expect("sized by shape")
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Real>(x: ArrayView3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
}

pub fn upsample2_backward<T: Real>(dy: ArrayView3<T>) -> Array3<T> {
    let (c, h, w) = dy.dim();
    let mut dx = Array3::<T>::zeros((c, h / 2, w / 2));
    for ((ci, y, x), &g) in dy.indexed_iter() {
        let d = &mut dx[[ci, y / 2, x / 2]];
        *d = *d + g;
    }
    dx
}

pub fn concat_channels<T: Real>(a: ArrayView3<T>, b: ArrayView3<T>) -> Array3<T> {
    ndarray::concatenate(Axis(0), &[a, b]).expect("matching spatial dims")
}

pub fn split_channels<T: Real>(d: ArrayView3<T>, first: usize) -> (Array3<T>, Array3<T>) {
    (d.slice(s![..first, .., ..]).to_owned(), d.slice(s![first.., .., ..]).to_owned())
}

pub fn global_avg_pool<T: Real>(x: ArrayView3<T>) -> Array1<T> {
    let (_, h, w) = x.dim();
    let n = T::of((h * w) as f64);
    x.sum_axis(Axis(2)).sum_axis(Axis(1)).mapv(|v| v / n)
}

pub fn global_avg_pool_backward<T: Real>(dy: &[T], hw: (usize, usize)) -> Array3<T> {
    let n = T::of((hw.0 * hw.1) as f64);
    Array3::from_shape_fn((dy.len(), hw.0, hw.1), |(c, _, _)| dy[c] / n)
}

/// One bilinear gather: four corner indices with their weights.
#[derive(Clone, Copy, Debug)]
struct Tap {
    idx: [usize; 4],
    wt: [f64; 4],
}

/// Backward warp of a `(C, h, w)` map by a per-pixel displacement field.
///
/// `out[c, y, x] = bilinear(map[c], y - dy(y, x), x - dx(y, x))` where the
/// displacement field carries `(dx, dy)` in its last axis. Pixels whose source
/// falls outside the map are invalid, set to zero, and excluded from the
/// returned validity mask.
#[derive(Clone, Debug)]
pub struct Warp {
    shape: (usize, usize),
    taps: Vec<Option<Tap>>,
}

impl Warp {
    pub fn new(displacement: ArrayView3<f64>) -> Self {
        let (h, w, two) = displacement.dim();
        assert_eq!(two, 2, "displacement must be (h, w, 2)");
        let mut taps = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let sx = x as f64 - displacement[[y, x, 0]];
                let sy = y as f64 - displacement[[y, x, 1]];
                let inside = sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64;
                if !inside {
                    taps.push(None);
                    continue;
                }
                let x0 = (sx.floor() as usize).min(w - 1);
                let y0 = (sy.floor() as usize).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let fx = sx - x0 as f64;
                let fy = sy - y0 as f64;
                taps.push(Some(Tap {
                    idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
                    wt: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
                }));
            }
        }
        Self { shape: (h, w), taps }
    }

    pub fn valid(&self) -> Array2<bool> {
        Array2::from_shape_vec(self.shape, self.taps.iter().map(Option::is_some).collect())
            .expect("one tap per pixel")
    }

    pub fn valid_count(&self) -> usize {
        self.taps.iter().filter(|t| t.is_some()).count()
    }

    pub fn apply<T: Real>(&self, map: ArrayView3<T>) -> Array3<T> {
        let (c, h, w) = map.dim();
        assert_eq!((h, w), self.shape, "warp shape");
        let mut out = Array3::<T>::zeros((c, h, w));
        for ci in 0..c {
            let plane = map.slice(s![ci, .., ..]);
            let plane = plane.as_standard_layout();
            let src = plane.as_slice().expect("standard layout");
            let mut dst = out.slice_mut(s![ci, .., ..]);
            let dst = dst.as_slice_mut().expect("fresh array");
            for (d, tap) in dst.iter_mut().zip(&self.taps) {
                if let Some(t) = tap {
                    let mut acc = T::zero();
                    for k in 0..4 {
                        acc = acc + src[t.idx[k]] * T::of(t.wt[k]);
                    }
                    *d = acc;
                }
            }
        }
        out
    }

    pub fn backward<T: Real>(&self, dy: ArrayView3<T>) -> Array3<T> {
        let (c, h, w) = dy.dim();
        let mut dmap = Array3::<T>::zeros((c, h, w));
        for ci in 0..c {
            let g = dy.slice(s![ci, .., ..]);
            let g = g.as_standard_layout();
            let g = g.as_slice().expect("standard layout");
            let mut dst = dmap.slice_mut(s![ci, .., ..]);
            let dst = dst.as_slice_mut().expect("fresh array");
            for (gv, tap) in g.iter().zip(&self.taps) {
                if let Some(t) = tap {
                    for k in 0..4 {
                        dst[t.idx[k]] = dst[t.idx[k]] + *gv * T::of(t.wt[k]);
                    }
                }
            }
        }
        dmap
    }
}

/// Bilinear resize of a single-channel map (half-pixel centres, edge clamp).
pub fn resize_bilinear(map: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = map.dim();
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let coord = |o: usize, scale: f32, n: usize| {
        let c = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (c.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f32)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = coord(y, sy, h);
        let (x0, x1, fx) = coord(x, sx, w);
        let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
        let bot = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn pool_and_upsample_round_trip_shapes() {
        let x = Array3::from_shape_fn((2, 4, 6), |(c, y, x)| (c * 100 + y * 10 + x) as f64);
        let (p, arg) = max_pool2(x.view());
        assert_eq!(p.dim(), (2, 2, 3));
        assert_eq!(p[[1, 1, 2]], 135.0);
        let d = max_pool2_backward(Array3::<f64>::ones((2, 2, 3)).view(), &arg, (2, 4, 6));
        assert_eq!(d.sum(), 12.0);
        assert_eq!(d[[1, 3, 5]], 1.0);
        let u = upsample2(p.view());
        assert_eq!(u.dim(), (2, 4, 6));
        assert_eq!(upsample2_backward(u.view())[[0, 0, 0]], 4.0 * p[[0, 0, 0]]);
    }

    #[test]
    fn zero_displacement_warp_is_identity() {
        let m = Array3::from_shape_fn((1, 5, 4), |(_, y, x)| (y * 4 + x) as f64);
        let warp = Warp::new(Array3::zeros((5, 4, 2)).view());
        assert_eq!(warp.apply(m.view()), m);
        assert_eq!(warp.valid_count(), 20);
    }

    #[test]
    fn integer_shift_moves_content_and_invalidates_border() {
        let m = Array3::from_shape_fn((1, 3, 4), |(_, y, x)| (y * 4 + x) as f64);
        let mut d = Array3::zeros((3, 4, 2));
        d.slice_mut(s![.., .., 0]).fill(1.0);
        let warp = Warp::new(d.view());
        let out = warp.apply(m.view());
        for y in 0..3 {
            assert!(!warp.valid()[[y, 0]]);
            for x in 1..4 {
                assert_eq!(out[[0, y, x]], m[[0, y, x - 1]]);
            }
        }
    }

    #[test]
    fn warp_backward_is_adjoint() {
        let d = Array3::from_shape_fn((4, 5, 2), |(y, x, k)| ((y * 7 + x * 3 + k) % 5) as f64 * 0.37 - 0.6);
        let warp = Warp::new(d.view());
        let a = Array3::from_shape_fn((2, 4, 5), |(c, y, x)| ((c + y * x) % 7) as f64 - 3.0);
        let b = Array3::from_shape_fn((2, 4, 5), |(c, y, x)| ((c * 3 + y + 2 * x) % 5) as f64 - 2.0);
        let lhs = (warp.apply(a.view()) * &b).sum();
        let rhs = (a * warp.backward(b.view())).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn resize_identity_and_constant() {
        let m = Array2::from_shape_fn((3, 5), |(y, x)| (y * 5 + x) as f32);
        assert_eq!(resize_bilinear(m.view(), 3, 5), m);
        let c = Array2::from_elem((4, 4), 0.7f32);
        assert!(resize_bilinear(c.view(), 16, 16).iter().all(|v| (v - 0.7).abs() < 1e-6));
    }
}
