//! Small residual backbone whose head is a 1x1 convolution emitting one
//! evidence map per class. Class scores are the spatial means of those maps,
//! so the maps are exact class activation maps.

use ndarray::{Array3, ArrayView3};

use crate::conv::{Conv2d, ConvCache};
use crate::ops::{global_avg_pool, relu_backward, relu_inplace};
use crate::params::ParamLayout;
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResidualSpec {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub blocks: Vec<BlockSpec>,
    pub num_classes: usize,
}

impl ResidualSpec {
    /// Six residual blocks, total stride 8, ~20k parameters.
    pub fn desk(num_classes: usize) -> Self {
        let b = |out_channels, stride| BlockSpec { out_channels, stride };
        Self {
            in_channels: 3,
            stem_channels: 8,
            stem_stride: 2,
            blocks: vec![b(12, 2), b(12, 1), b(16, 2), b(16, 1), b(24, 1), b(24, 1)],
            num_classes,
        }
    }

    /// Same topology as [`ResidualSpec::desk`] at a width that keeps the
    /// parameter count well under 10k.
    pub fn narrow(num_classes: usize) -> Self {
        let b = |out_channels, stride| BlockSpec { out_channels, stride };
        Self {
            in_channels: 3,
            stem_channels: 4,
            stem_stride: 2,
            blocks: vec![b(6, 2), b(6, 1), b(8, 2), b(8, 1), b(12, 1), b(12, 1)],
            num_classes,
        }
    }

    pub fn downsample_factor(&self) -> usize {
        self.stem_stride * self.blocks.iter().map(|b| b.stride).product::<usize>()
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    proj: Option<Conv2d>,
}

/// Residual classifier whose 3x3 convolutions pad by edge replication, so a
/// uniform background produces no border response.
#[derive(Clone, Debug)]
pub struct TinyResidual {
    spec: ResidualSpec,
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    head: Conv2d,
    layout: ParamLayout,
}

#[derive(Clone, Debug)]
struct BlockPass<T> {
    c1: ConvCache<T>,
    h1: Array3<T>,
    c2: ConvCache<T>,
    proj: Option<ConvCache<T>>,
    out: Array3<T>,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Clone, Debug)]
pub struct ResidualPass<T> {
    stem: ConvCache<T>,
    stem_out: Array3<T>,
    blocks: Vec<BlockPass<T>>,
    head: ConvCache<T>,
    map: Array3<T>,
}

impl<T: Real> ResidualPass<T> {
    /// Per-class evidence maps, `(num_classes, h, w)`.
    pub fn class_map(&self) -> &Array3<T> {
        &self.map
    }

    /// Class scores: spatial mean of each class map.
    pub fn logits(&self) -> ndarray::Array1<T> {
        global_avg_pool(self.map.view())
    }

    /// Output of feature layer `layer` (0 = stem, `i` = residual block `i`).
    pub fn feature(&self, layer: usize) -> &Array3<T> {
        if layer == 0 {
            &self.stem_out
        } else {
            &self.blocks[layer - 1].out
        }
    }
}

impl TinyResidual {
    pub fn new(spec: ResidualSpec) -> Self {
        let mut layout = ParamLayout::new();
        let stem = Conv2d::new(&mut layout, spec.in_channels, spec.stem_channels, 3, spec.stem_stride, 1).with_replicate_padding();
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        let mut in_ch = spec.stem_channels;
        for b in &spec.blocks {
            let conv1 = Conv2d::new(&mut layout, in_ch, b.out_channels, 3, b.stride, 1).with_replicate_padding();
            let conv2 = Conv2d::with_gain(&mut layout, b.out_channels, b.out_channels, 3, 1, 1, 0.5).with_replicate_padding();
            let proj = (in_ch != b.out_channels || b.stride != 1)
                .then(|| Conv2d::new(&mut layout, in_ch, b.out_channels, 1, b.stride, 0));
            blocks.push(ResBlock { conv1, conv2, proj });
            in_ch = b.out_channels;
        }
        let head = Conv2d::with_gain(&mut layout, in_ch, spec.num_classes, 1, 1, 0, 0.5);
        Self { spec, stem, blocks, head, layout }
    }

    pub fn spec(&self) -> &ResidualSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Number of selectable feature layers (stem plus each block).
    pub fn num_feature_layers(&self) -> usize {
        self.blocks.len() + 1
    }

    /// Channel count of the last feature layer (input to the 1x1 head).
    pub fn head_in_channels(&self) -> usize {
        self.head.in_channels
    }

    /// Slot of the classifier head weights, `(num_classes, head_in_channels)`.
    pub fn head(&self) -> &Conv2d {
        &self.head
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> Vec<T> {
        self.layout.init(seed)
    }

    /// Input is an RGB image scaled to `[0, 1]`; it is centred internally.
    pub fn forward<T: Real>(&self, params: &[T], image: ArrayView3<T>) -> ResidualPass<T> {
        assert_eq!(params.len(), self.num_params(), "parameter count");
        let half = T::of(0.5);
        let scale = T::of(4.0);
        let x = image.mapv(|v| (v - half) * scale);
        let (mut s, stem) = self.stem.forward(params, x.view());
        relu_inplace(&mut s);
        let stem_out = s;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut cur = stem_out.view().to_owned();
        for b in &self.blocks {
            let (mut h1, c1) = b.conv1.forward(params, cur.view());
            relu_inplace(&mut h1);
            let (mut out, c2) = b.conv2.forward(params, h1.view());
            let proj = match &b.proj {
                Some(p) => {
                    let (sc, cache) = p.forward(params, cur.view());
                    out += &sc;
                    Some(cache)
                }
                None => {
                    out += &cur;
                    None
                }
            };
            relu_inplace(&mut out);
            cur = out.clone();
            blocks.push(BlockPass { c1, h1, c2, proj, out });
        }
        let (map, head) = self.head.forward(params, cur.view());
        ResidualPass { stem, stem_out, blocks, head, map }
    }

    /// Back-propagates a gradient on the class maps. Parameter gradients are
    /// accumulated into `grads`.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        pass: &ResidualPass<T>,
        d_map: ArrayView3<T>,
        grads: &mut [T],
    ) {
        self.backward_impl(params, pass, d_map, grads, None);
    }

    /// Gradient of a class-map loss with respect to feature layer `layer`.
    /// Parameter gradients are discarded.
    pub fn feature_gradient<T: Real>(
        &self,
        params: &[T],
        pass: &ResidualPass<T>,
        d_map: ArrayView3<T>,
        layer: usize,
    ) -> Array3<T> {
        assert!(layer < self.num_feature_layers(), "feature layer out of range");
        let mut scratch = vec![T::zero(); self.num_params()];
        self.backward_impl(params, pass, d_map, &mut scratch, Some(layer))
            .expect("captured layer")
    }

    fn backward_impl<T: Real>(
        &self,
        params: &[T],
        pass: &ResidualPass<T>,
        d_map: ArrayView3<T>,
        grads: &mut [T],
        capture: Option<usize>,
    ) -> Option<Array3<T>> {
        let mut d = self
            .head
            .backward(params, &pass.head, d_map, grads, true)
            .expect("input grad requested");
        for (i, (b, bp)) in self.blocks.iter().zip(&pass.blocks).enumerate().rev() {
            if capture == Some(i + 1) {
                return Some(d);
            }
            let d_pre = relu_backward(&bp.out, d.view());
            let d_h1 = b.conv2.backward(params, &bp.c2, d_pre.view(), grads, true).expect("input grad");
            let d_h1 = relu_backward(&bp.h1, d_h1.view());
            let mut d_in = b.conv1.backward(params, &bp.c1, d_h1.view(), grads, true).expect("input grad");
            match (&b.proj, &bp.proj) {
                (Some(p), Some(cache)) => {
                    d_in += &p.backward(params, cache, d_pre.view(), grads, true).expect("input grad");
                }
                _ => d_in += &d_pre,
            }
            d = d_in;
        }
        if capture == Some(0) {
            return Some(d);
        }
        let d_stem = relu_backward(&pass.stem_out, d.view());
        self.stem.backward(params, &pass.stem, d_stem.view(), grads, false);
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn image(h: usize, w: usize, phase: f64) -> Array3<f64> {
        Array3::from_shape_fn((3, h, w), |(c, y, x)| 0.5 + 0.4 * ((c as f64 + 1.0) * 0.7 * y as f64 + 0.3 * x as f64 + phase).sin())
    }

    #[test]
    fn narrow_spec_is_small_and_downsamples_by_eight() {
        let net = TinyResidual::new(ResidualSpec::narrow(3));
        assert!(net.num_params() <= 10_000, "{}", net.num_params());
        let desk = TinyResidual::new(ResidualSpec::desk(3));
        assert!(desk.num_params() > net.num_params());
        let p: Vec<f64> = net.init_params(1);
        let pass = net.forward(&p, image(32, 32, 0.0).view());
        assert_eq!(pass.class_map().dim(), (3, 4, 4));
        assert_eq!(net.spec().downsample_factor(), 8);
    }

    #[test]
    fn gradients_match_central_differences() {
        let net = TinyResidual::new(ResidualSpec::narrow(2));
        let mut p: Vec<f64> = net.init_params(5);
        // nonzero biases so that every branch is exercised
        for (i, v) in p.iter_mut().enumerate() {
            if *v == 0.0 {
                *v = 0.01 * ((i % 7) as f64 - 3.0);
            }
        }
        let x = image(16, 16, 0.3);
        let r = Array3::from_shape_fn((2, 2, 2), |(c, y, x)| (c as f64 + 1.0) * 0.5 - y as f64 * 0.3 + x as f64 * 0.2);
        let loss = |p: &[f64]| (net.forward(p, x.view()).class_map() * &r).sum();
        let pass = net.forward(&p, x.view());
        let mut g = vec![0.0; p.len()];
        net.backward(&p, &pass, r.view(), &mut g);
        let mut worst: f64 = 0.0;
        for i in (0..p.len()).step_by(37) {
            let eps = 1e-5;
            let mut a = p.clone();
            a[i] += eps;
            let mut b = p.clone();
            b[i] -= eps;
            let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
            let denom = fd.abs().max(g[i].abs()).max(1e-8);
            worst = worst.max((fd - g[i]).abs() / denom);
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn feature_gradient_of_head_is_head_weight() {
        let net = TinyResidual::new(ResidualSpec::narrow(2));
        let p: Vec<f64> = net.init_params(2);
        let pass = net.forward(&p, image(16, 16, 0.0).view());
        let (c, h, w) = pass.class_map().dim();
        let mut d = Array3::zeros((c, h, w));
        d.slice_mut(ndarray::s![1, .., ..]).fill(1.0);
        let last = net.num_feature_layers() - 1;
        let g = net.feature_gradient(&p, &pass, d.view(), last);
        let wv = net.head().weight_view(&p);
        for k in 0..net.head_in_channels() {
            assert!((g[[k, 0, 0]] - wv[[1, k]]).abs() < 1e-12);
            assert!((g[[k, 1, 1]] - wv[[1, k]]).abs() < 1e-12);
        }
    }
}
