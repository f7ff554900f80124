use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, ArrayViewMut2};

use crate::params::{Init, ParamLayout, Slot};
use crate::Real;

/// 2-D convolution over a single `(C, H, W)` sample, lowered to one GEMM.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Pad by repeating edge pixels instead of zeros.
    pub replicate: bool,
    pub weight: Slot,
    pub bias: Slot,
}

/// Lowered input kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    cols: Array2<T>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(
        layout: &mut ParamLayout,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self::with_gain(layout, in_channels, out_channels, kernel, stride, padding, 1.0)
    }

    pub fn with_gain(
        layout: &mut ParamLayout,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = layout.alloc(out_channels * fan_in, Init::HeNormal { fan_in, gain });
        let bias = layout.alloc(out_channels, Init::Zeros);
        Self { in_channels, out_channels, kernel, stride, padding, replicate: false, weight, bias }
    }

    pub fn with_replicate_padding(mut self) -> Self {
        self.replicate = true;
        self
    }

    /// Source index along an axis of length `n`, or `None` for a zero pad.
    fn source(&self, out: usize, k: usize, n: usize) -> Option<usize> {
        let i = (out * self.stride + k) as isize - self.padding as isize;
        if i >= 0 && i < n as isize {
            Some(i as usize)
        } else if self.replicate {
            Some(i.clamp(0, n as isize - 1) as usize)
        } else {
            None
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (span(h), span(w))
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_view<'a, T: Real>(&self, params: &'a [T]) -> ArrayView2<'a, T> {
        ArrayView2::from_shape((self.out_channels, self.fan_in()), &params[self.weight.range()])
            .expect("weight slot matches shape")
    }

    pub fn forward<T: Real>(&self, params: &[T], x: ArrayView3<T>) -> (Array3<T>, ConvCache<T>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = self.output_size(h, w);
        let cols = self.im2col(x, ho, wo);
        let mut out = Array2::<T>::zeros((self.out_channels, ho * wo));
        general_mat_mul(T::one(), &self.weight_view(params), &cols, T::zero(), &mut out);
        let bias = &params[self.bias.range()];
        for (mut row, &b) in out.rows_mut().into_iter().zip(bias) {
            row.mapv_inplace(|v| v + b);
        }
        let out = out.into_shape_with_order((self.out_channels, ho, wo)).expect("contiguous");
        (out, ConvCache { cols, in_shape: (c, h, w), out_hw: (ho, wo) })
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        cache: &ConvCache<T>,
        dy: ArrayView3<T>,
        grads: &mut [T],
        need_input_grad: bool,
    ) -> Option<Array3<T>> {
        let (ho, wo) = cache.out_hw;
        assert_eq!(dy.dim(), (self.out_channels, ho, wo), "conv output grad shape");
        let dy = dy.as_standard_layout();
        let dy2 = dy.view().into_shape_with_order((self.out_channels, ho * wo)).expect("contiguous");
        {
            let mut dw = ArrayViewMut2::from_shape(
                (self.out_channels, self.fan_in()),
                &mut grads[self.weight.range()],
            )
            .expect("weight slot matches shape");
            general_mat_mul(T::one(), &dy2, &cache.cols.t(), T::one(), &mut dw);
        }
        for (g, row) in grads[self.bias.range()].iter_mut().zip(dy2.rows()) {
            *g = *g + row.sum();
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = Array2::<T>::zeros((self.fan_in(), ho * wo));
        general_mat_mul(T::one(), &self.weight_view(params).t(), &dy2, T::zero(), &mut dcols);
        Some(self.col2im(&dcols, cache.in_shape, ho, wo))
    }

    fn im2col<T: Real>(&self, x: ArrayView3<T>, ho: usize, wo: usize) -> Array2<T> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let n = ho * wo;
        let mut cols = vec![T::zero(); c * k * k * n];
        for ci in 0..c {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let Some(iy) = self.source(oy, ky, h) else { continue };
                        let src_row = &plane[iy * w..(iy + 1) * w];
                        let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            if let Some(ix) = self.source(ox, kx, w) {
                                *d = src_row[ix];
                            }
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((c * k * k, n), cols).expect("sized above")
    }

    fn col2im<T: Real>(
        &self,
        dcols: &Array2<T>,
        (c, h, w): (usize, usize, usize),
        ho: usize,
        wo: usize,
    ) -> Array3<T> {
        let k = self.kernel;
        let n = ho * wo;
        let src = dcols.as_slice().expect("standard layout");
        let mut dx = vec![T::zero(); c * h * w];
        for ci in 0..c {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let col = &src[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let Some(iy) = self.source(oy, ky, h) else { continue };
                        let dst_row = &mut plane[iy * w..(iy + 1) * w];
                        for (ox, &g) in col[oy * wo..(oy + 1) * wo].iter().enumerate() {
                            if let Some(ix) = self.source(ox, kx, w) {
                                dst_row[ix] = dst_row[ix] + g;
                            }
                        }
                    }
                }
            }
        }
        Array3::from_shape_vec((c, h, w), dx).expect("sized above")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    /// Direct nested-loop convolution used as the reference.
    fn naive(conv: &Conv2d, p: &[f64], x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let (ho, wo) = conv.output_size(h, w);
        let k = conv.kernel;
        let wt = &p[conv.weight.range()];
        let b = &p[conv.bias.range()];
        Array3::from_shape_fn((conv.out_channels, ho, wo), |(o, oy, ox)| {
            let mut acc = b[o];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let mut iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                        let mut ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                        if conv.replicate {
                            iy = iy.clamp(0, h as isize - 1);
                            ix = ix.clamp(0, w as isize - 1);
                        }
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += wt[((o * c + ci) * k + ky) * k + kx] * x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    fn setup(stride: usize, k: usize, pad: usize, replicate: bool) -> (Conv2d, Vec<f64>, Array3<f64>) {
        let mut layout = ParamLayout::new();
        let mut conv = Conv2d::new(&mut layout, 2, 3, k, stride, pad);
        conv.replicate = replicate;
        let mut p: Vec<f64> = layout.init(3);
        for (i, b) in p[conv.bias.range()].iter_mut().enumerate() {
            *b = 0.1 * i as f64;
        }
        let x = Array3::from_shape_fn((2, 7, 6), |(c, y, x)| ((c * 31 + y * 7 + x * 3) % 11) as f64 / 7.0 - 0.6);
        (conv, p, x)
    }

    #[test]
    fn forward_matches_direct_loops() {
        for &(s, k, pad, rep) in &[(1, 3, 1, false), (2, 3, 1, false), (1, 1, 0, false), (2, 1, 0, false), (1, 3, 1, true), (2, 3, 1, true)] {
            let (conv, p, x) = setup(s, k, pad, rep);
            let (y, _) = conv.forward(&p, x.view());
            let r = naive(&conv, &p, &x);
            assert_eq!(y.dim(), r.dim());
            for (a, b) in y.iter().zip(r.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for &(s, k, pad, rep) in &[(1, 3, 1, false), (2, 3, 1, false), (1, 3, 1, true), (2, 3, 1, true)] {
            let (conv, p, x) = setup(s, k, pad, rep);
            let (y, cache) = conv.forward(&p, x.view());
            // loss = sum(y * r) for a fixed r
            let r = y.mapv(|v| (v * 13.0).sin());
            let mut g = vec![0.0; p.len()];
            let dx = conv.backward(&p, &cache, r.view(), &mut g, true).unwrap();
            let loss = |p: &[f64], x: &Array3<f64>| (naive(&conv, p, x) * &r).sum();
            let eps = 1e-6;
            for i in 0..p.len() {
                let mut a = p.clone();
                a[i] += eps;
                let mut b = p.clone();
                b[i] -= eps;
                let fd = (loss(&a, &x) - loss(&b, &x)) / (2.0 * eps);
                assert!((fd - g[i]).abs() < 1e-6, "param {i}: {fd} vs {}", g[i]);
            }
            for idx in [(0, 0, 0), (1, 3, 2), (0, 6, 5)] {
                let mut a = x.clone();
                a[idx] += eps;
                let mut b = x.clone();
                b[idx] -= eps;
                let fd = (loss(&p, &a) - loss(&p, &b)) / (2.0 * eps);
                assert!((fd - dx[idx]).abs() < 1e-6);
            }
        }
    }
}
