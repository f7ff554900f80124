//! Encoder-decoder with skip connections for dense two-class prediction.

use ndarray::{Array3, ArrayView3};

use crate::conv::{Conv2d, ConvCache};
use crate::ops::{
    concat_channels, max_pool2, max_pool2_backward, relu_backward, relu_inplace, split_channels,
    upsample2, upsample2_backward,
};
use crate::params::ParamLayout;
use crate::Real;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNetSpec {
    pub in_channels: usize,
    /// Channel width per level, shallowest first.
    pub widths: Vec<usize>,
    pub num_classes: usize,
}

impl UNetSpec {
    pub fn desk() -> Self {
        Self { in_channels: 3, widths: vec![8, 16, 32, 64], num_classes: 2 }
    }

    /// Spatial dimensions must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

#[derive(Clone, Debug)]
struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

#[derive(Clone, Debug)]
struct DoublePass<T> {
    ca: ConvCache<T>,
    ha: Array3<T>,
    cb: ConvCache<T>,
    out: Array3<T>,
}

impl DoubleConv {
    fn new(layout: &mut ParamLayout, cin: usize, cout: usize) -> Self {
        Self { a: Conv2d::new(layout, cin, cout, 3, 1, 1), b: Conv2d::new(layout, cout, cout, 3, 1, 1) }
    }

    fn forward<T: Real>(&self, p: &[T], x: ArrayView3<T>) -> DoublePass<T> {
        let (mut ha, ca) = self.a.forward(p, x);
        relu_inplace(&mut ha);
        let (mut out, cb) = self.b.forward(p, ha.view());
        relu_inplace(&mut out);
        DoublePass { ca, ha, cb, out }
    }

    fn backward<T: Real>(&self, p: &[T], pass: &DoublePass<T>, d: ArrayView3<T>, g: &mut [T], need_dx: bool) -> Option<Array3<T>> {
        let d = relu_backward(&pass.out, d);
        let dh = self.b.backward(p, &pass.cb, d.view(), g, true).expect("input grad");
        let dh = relu_backward(&pass.ha, dh.view());
        self.a.backward(p, &pass.ca, dh.view(), g, need_dx)
    }
}

#[derive(Clone, Debug)]
pub struct TinyUNet {
    spec: UNetSpec,
    enc: Vec<DoubleConv>,
    dec: Vec<DoubleConv>,
    head: Conv2d,
    layout: ParamLayout,
}

#[derive(Clone, Debug)]
pub struct UNetPass<T> {
    enc: Vec<DoublePass<T>>,
    pool_args: Vec<Vec<usize>>,
    dec: Vec<DoublePass<T>>,
    head: ConvCache<T>,
    logits: Array3<T>,
}

impl<T: Real> UNetPass<T> {
    /// Per-pixel class logits, `(num_classes, H, W)`.
    pub fn logits(&self) -> &Array3<T> {
        &self.logits
    }
}

impl TinyUNet {
    pub fn new(spec: UNetSpec) -> Self {
        assert!(spec.widths.len() >= 2, "need at least two levels");
        let mut layout = ParamLayout::new();
        let mut enc = Vec::new();
        let mut cin = spec.in_channels;
        for &w in &spec.widths {
            enc.push(DoubleConv::new(&mut layout, cin, w));
            cin = w;
        }
        // dec[i] produces level i from level i+1 (deepest decoder first in forward order)
        let mut dec = Vec::new();
        for i in 0..spec.widths.len() - 1 {
            dec.push(DoubleConv::new(&mut layout, spec.widths[i + 1] + spec.widths[i], spec.widths[i]));
        }
        let head = Conv2d::new(&mut layout, spec.widths[0], spec.num_classes, 1, 1, 0);
        Self { spec, enc, dec, head, layout }
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> Vec<T> {
        self.layout.init(seed)
    }

    pub fn forward<T: Real>(&self, params: &[T], image: ArrayView3<T>) -> UNetPass<T> {
        assert_eq!(params.len(), self.num_params(), "parameter count");
        let (_, h, w) = image.dim();
        let m = self.spec.size_multiple();
        assert!(h % m == 0 && w % m == 0, "input {h}x{w} not a multiple of {m}");
        let half = T::of(0.5);
        let scale = T::of(4.0);
        let mut x = image.mapv(|v| (v - half) * scale);
        let levels = self.enc.len();
        let mut enc = Vec::with_capacity(levels);
        let mut pool_args = Vec::with_capacity(levels - 1);
        for (i, block) in self.enc.iter().enumerate() {
            let pass = block.forward(params, x.view());
            if i + 1 < levels {
                let (pooled, arg) = max_pool2(pass.out.view());
                pool_args.push(arg);
                x = pooled;
            }
            enc.push(pass);
        }
        let mut cur = enc[levels - 1].out.clone();
        let mut dec = Vec::with_capacity(levels - 1);
        for i in (0..levels - 1).rev() {
            let up = upsample2(cur.view());
            let cat = concat_channels(up.view(), enc[i].out.view());
            let pass = self.dec[i].forward(params, cat.view());
            cur = pass.out.clone();
            dec.push(pass);
        }
        let (logits, head) = self.head.forward(params, cur.view());
        UNetPass { enc, pool_args, dec, head, logits }
    }

    pub fn backward<T: Real>(&self, params: &[T], pass: &UNetPass<T>, d_logits: ArrayView3<T>, grads: &mut [T]) {
        let levels = self.enc.len();
        let mut d = self.head.backward(params, &pass.head, d_logits, grads, true).expect("input grad");
        // skip-connection gradients per encoder level
        let mut d_skip: Vec<Option<Array3<T>>> = vec![None; levels];
        // pass.dec is stored deepest-first: dec[k] corresponds to level levels-2-k
        for (k, dp) in pass.dec.iter().enumerate().rev() {
            let i = levels - 2 - k;
            let d_cat = self.dec[i].backward(params, dp, d.view(), grads, true).expect("input grad");
            let up_channels = self.spec.widths[i + 1];
            let (d_up, d_s) = split_channels(d_cat.view(), up_channels);
            d_skip[i] = Some(d_s);
            d = upsample2_backward(d_up.view());
        }
        // d is now the gradient on the deepest encoder output
        for i in (0..levels).rev() {
            if let Some(s) = d_skip[i].take() {
                d += &s;
            }
            let need = i > 0;
            let d_in = self.enc[i].backward(params, &pass.enc[i], d.view(), grads, need);
            if let Some(d_in) = d_in {
                let shape = pass.enc[i - 1].out.dim();
                d = max_pool2_backward(d_in.view(), &pass.pool_args[i - 1], shape);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_matches_input_size_and_gradients_check_out() {
        let spec = UNetSpec { in_channels: 3, widths: vec![2, 3, 4], num_classes: 2 };
        let net = TinyUNet::new(spec);
        let mut p: Vec<f64> = net.init_params(9);
        for (i, v) in p.iter_mut().enumerate() {
            if *v == 0.0 {
                *v = 0.02 * ((i % 5) as f64 - 2.0);
            }
        }
        let x = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| 0.5 + 0.45 * ((c + 1) as f64 * 0.9 * y as f64 - 0.4 * x as f64).cos());
        let pass = net.forward(&p, x.view());
        assert_eq!(pass.logits().dim(), (2, 8, 8));
        let r = Array3::from_shape_fn((2, 8, 8), |(c, y, x)| ((c * 5 + y * 3 + x) % 7) as f64 / 7.0 - 0.4);
        let mut g = vec![0.0; p.len()];
        net.backward(&p, &pass, r.view(), &mut g);
        let loss = |p: &[f64]| (net.forward(p, x.view()).logits() * &r).sum();
        let mut worst: f64 = 0.0;
        for i in (0..p.len()).step_by(3) {
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
    fn desk_spec_parameter_budget() {
        let net = TinyUNet::new(UNetSpec::desk());
        assert!(net.num_params() > 50_000 && net.num_params() < 600_000, "{}", net.num_params());
    }
}
