//! Classification and per-pixel losses returning `(loss, d_loss/d_logits)`.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView3};

use crate::Real;

pub fn softmax<T: Real>(logits: ArrayView1<T>) -> Array1<T> {
    let max = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e = logits.mapv(|v| (v - max).exp());
    let z = e.sum();
    e.mapv(|v| v / z)
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Numerically stable `log(sigmoid(x))`.
fn log_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn cross_entropy<T: Real>(logits: ArrayView1<T>, target: usize) -> (T, Array1<T>) {
    let p = softmax(logits);
    let loss = -p[target].max(T::min_positive_value()).ln();
    let mut d = p;
    d[target] = d[target] - T::one();
    (loss, d)
}

/// Mean over classes of independent binary cross-entropies on one-hot targets.
pub fn multilabel_soft_margin<T: Real>(logits: ArrayView1<T>, target: usize) -> (T, Array1<T>) {
    let c = T::of(logits.len() as f64);
    let mut loss = T::zero();
    let mut d = Array1::zeros(logits.len());
    for (k, &x) in logits.iter().enumerate() {
        let y = if k == target { T::one() } else { T::zero() };
        loss = loss - (y * log_sigmoid(x) + (T::one() - y) * log_sigmoid(-x));
        d[k] = (sigmoid(x) - y) / c;
    }
    (loss / c, d)
}

/// Pixel-wise softmax cross-entropy averaged over all pixels.
/// `target` holds class indices per pixel.
pub fn pixel_cross_entropy<T: Real>(logits: ArrayView3<T>, target: &Array2<u8>) -> (T, Array3<T>) {
    let (c, h, w) = logits.dim();
    assert_eq!(target.dim(), (h, w), "target shape");
    let n = T::of((h * w) as f64);
    let mut d = Array3::<T>::zeros((c, h, w));
    let mut loss = T::zero();
    for y in 0..h {
        for x in 0..w {
            let col = logits.slice(ndarray::s![.., y, x]);
            let p = softmax(col);
            let t = target[[y, x]] as usize;
            loss = loss - p[t].max(T::min_positive_value()).ln();
            for k in 0..c {
                let g = if k == t { p[k] - T::one() } else { p[k] };
                d[[k, y, x]] = g / n;
            }
        }
    }
    (loss / n, d)
}
