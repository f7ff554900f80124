//! Auxiliary before/after(/background) classifier with optional puzzle and
//! flow-consistency terms on its class maps.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use image::RgbImage;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};
use sortseg_nn::loss::{cross_entropy, multilabel_soft_margin, softmax};
use sortseg_nn::ops::{global_avg_pool_backward, Warp};
use sortseg_nn::{Adam, BlockSpec, Optimizer, Real, ResidualPass, ResidualSpec, Sgd, TinyResidual};

use crate::dataio::{ingest, AugmentSpec, ClassLabel, FrameRecord, IngestOptions, LabeledImages, Layout};
use crate::error::{Error, IoContext, Result};
use crate::flow::{estimate_flow, BlockMatchParams};
use crate::formats::{ensure_parent, read_rgb, FlowField};
use crate::raster::{resize_rgb, to_tensor};
use crate::util::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    TinyResidual,
    /// Same topology as `tiny_residual` with fewer channels.
    Narrow,
    Residual50,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CategoricalCrossEntropy,
    MultiLabelSoftMargin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdaptiveMoment,
    MomentumSgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub num_classes: usize,
    pub backbone: Backbone,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub momentum: f32,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Square side the images are resized to.
    pub input_size: usize,
    pub puzzle_enabled: bool,
    pub temporal_enabled: bool,
    pub alpha: f64,
    pub beta: f64,
    pub tile_grid: usize,
    pub pretrained: bool,
    pub augment: AugmentSpec,
    pub val_ratio: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            backbone: Backbone::TinyResidual,
            loss: LossKind::CategoricalCrossEntropy,
            optimizer: OptimizerKind::AdaptiveMoment,
            lr: 5e-4,
            momentum: 0.9,
            max_epochs: 25,
            patience: 5,
            batch_size: 16,
            input_size: 128,
            puzzle_enabled: false,
            temporal_enabled: false,
            alpha: 2.0,
            beta: 6.0,
            tile_grid: 2,
            pretrained: false,
            augment: AugmentSpec::default(),
            val_ratio: 0.8,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        class_order(self.num_classes)?;
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if self.pretrained {
            return Err(Error::Unsupported("pretrained backbone weights are not bundled".into()));
        }
        if self.tile_grid == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("tile_grid, batch_size and max_epochs must be positive".into()));
        }
        let f = residual_spec(self.backbone, self.num_classes).downsample_factor();
        let unit = if self.puzzle_enabled { f * self.tile_grid } else { f };
        if self.input_size == 0 || self.input_size % unit != 0 {
            return Err(Error::Config(format!("input_size {} must be a multiple of {unit}", self.input_size)));
        }
        Ok(())
    }

    fn weights(&self) -> LossWeights {
        LossWeights {
            kind: self.loss,
            puzzle: self.puzzle_enabled.then_some((self.alpha, self.tile_grid)),
            temporal: self.temporal_enabled.then_some(self.beta),
        }
    }
}

/// Label order used by checkpoints: index `i` is class `order[i]`.
pub fn class_order(num_classes: usize) -> Result<Vec<ClassLabel>> {
    match num_classes {
        2 => Ok(vec![ClassLabel::Before, ClassLabel::After]),
        3 => Ok(vec![ClassLabel::Before, ClassLabel::After, ClassLabel::Background]),
        n => Err(Error::Config(format!("num_classes must be 2 or 3, got {n}"))),
    }
}

pub fn residual_spec(backbone: Backbone, num_classes: usize) -> ResidualSpec {
    match backbone {
        Backbone::TinyResidual => ResidualSpec::desk(num_classes),
        Backbone::Narrow => ResidualSpec::narrow(num_classes),
        Backbone::Residual50 => {
            // 1 stem + 24 two-conv blocks + 1 head = 50 convolution layers
            let mut blocks = Vec::new();
            for (stage, width) in [64, 128, 256, 512].into_iter().enumerate() {
                for i in 0..6 {
                    let stride = if i == 0 && stage > 0 { 2 } else { 1 };
                    blocks.push(BlockSpec { out_channels: width, stride });
                }
            }
            ResidualSpec { in_channels: 3, stem_channels: 64, stem_stride: 2, blocks, num_classes }
        }
    }
}

/// Splits `(C, H, W)` into a `grid x grid` row-major list of tiles.
pub fn split_tiles<T: Real>(x: ArrayView3<T>, grid: usize) -> Result<Vec<Array3<T>>> {
    let (_, h, w) = x.dim();
    if grid == 0 || h % grid != 0 || w % grid != 0 {
        return Err(Error::Shape { what: "tiling", expected: (grid, grid), found: (h, w) });
    }
    let (th, tw) = (h / grid, w / grid);
    let mut out = Vec::with_capacity(grid * grid);
    for i in 0..grid {
        for j in 0..grid {
            out.push(x.slice(s![.., i * th..(i + 1) * th, j * tw..(j + 1) * tw]).to_owned());
        }
    }
    Ok(out)
}

/// Inverse of [`split_tiles`].
pub fn merge_tiles<T: Real>(tiles: &[Array3<T>], grid: usize) -> Array3<T> {
    let (c, th, tw) = tiles[0].dim();
    let mut out = Array3::zeros((c, th * grid, tw * grid));
    for (k, t) in tiles.iter().enumerate() {
        let (i, j) = (k / grid, k % grid);
        out.slice_mut(s![.., i * th..(i + 1) * th, j * tw..(j + 1) * tw]).assign(t);
    }
    out
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Mean absolute difference between the full-image class map and the merge of
/// per-tile class maps, on channel `channel`.
pub fn puzzle_loss<T: Real>(net: &TinyResidual, params: &[T], image: ArrayView3<T>, channel: usize, grid: usize) -> Result<T> {
    let full = net.forward(params, image);
    let tiles = split_tiles(image, grid)?;
    let maps: Vec<Array3<T>> = tiles.iter().map(|t| net.forward(params, t.view()).class_map().clone()).collect();
    let merged = merge_tiles(&maps, grid);
    let f = full.class_map();
    if merged.dim() != f.dim() {
        let (_, a, b) = f.dim();
        let (_, c, d) = merged.dim();
        return Err(Error::Shape { what: "merged tile maps", expected: (a, b), found: (c, d) });
    }
    let diff = &f.slice(s![channel, .., ..]) - &merged.slice(s![channel, .., ..]);
    Ok(diff.mapv(|v| v.abs()).mean().unwrap_or(T::zero()))
}

/// Mean `|map_t1 - warp(map_t)|` over pixels whose warp source is inside.
pub fn warped_l1<T: Real>(map_t: ArrayView2<T>, map_t1: ArrayView2<T>, warp: &Warp) -> T {
    let warped = warp.apply(map_t.insert_axis(ndarray::Axis(0)));
    let valid = warp.valid();
    let n = warp.valid_count();
    if n == 0 {
        return T::zero();
    }
    let mut acc = T::zero();
    for ((y, x), &ok) in valid.indexed_iter() {
        if ok {
            acc += (map_t1[[y, x]] - warped[[0, y, x]]).abs();
        }
    }
    acc / T::of(n as f64)
}

/// Temporal consistency of the class maps of two consecutive frames under a
/// flow field given at class-map resolution.
pub fn temporal_consistency_loss<T: Real>(
    net: &TinyResidual,
    params: &[T],
    frame_t: ArrayView3<T>,
    frame_t1: ArrayView3<T>,
    flow_grid: ArrayView3<f64>,
    channel: usize,
) -> Result<T> {
    let a = net.forward(params, frame_t);
    let b = net.forward(params, frame_t1);
    let (_, h, w) = a.class_map().dim();
    let (fh, fw, _) = flow_grid.dim();
    if (fh, fw) != (h, w) || a.class_map().dim() != b.class_map().dim() {
        return Err(Error::Shape { what: "flow vs class map", expected: (h, w), found: (fh, fw) });
    }
    let warp = Warp::new(flow_grid);
    Ok(warped_l1(a.class_map().slice(s![channel, .., ..]), b.class_map().slice(s![channel, .., ..]), &warp))
}

/// Averages a full-resolution flow field onto an `h x w` grid and rescales
/// the displacements to grid cells.
pub fn flow_to_grid(flow: &FlowField, h: usize, w: usize) -> Array3<f64> {
    let (fh, fw) = flow.dim();
    let mut acc = Array3::<f64>::zeros((h, w, 2));
    let mut cnt = Array2::<f64>::zeros((h, w));
    for y in 0..fh {
        for x in 0..fw {
            let (gy, gx) = (y * h / fh, x * w / fw);
            acc[[gy, gx, 0]] += flow.0[[y, x, 0]] as f64;
            acc[[gy, gx, 1]] += flow.0[[y, x, 1]] as f64;
            cnt[[gy, gx]] += 1.0;
        }
    }
    let (sx, sy) = (w as f64 / fw as f64, h as f64 / fh as f64);
    Array3::from_shape_fn((h, w, 2), |(y, x, k)| {
        let n = cnt[[y, x]].max(1.0);
        acc[[y, x, k]] / n * if k == 0 { sx } else { sy }
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub kind: LossKind,
    /// `(alpha, tile grid)`.
    pub puzzle: Option<(f64, usize)>,
    /// `beta`.
    pub temporal: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SampleLoss<T> {
    pub classification: T,
    pub puzzle: T,
    pub temporal: T,
    pub total: T,
    pub logits: Array1<T>,
}

/// Loss of one training sample; parameter gradients are accumulated into
/// `grads`. `next` is the following frame of the same sequence together with
/// the class-map warp from this frame to it.
pub fn sample_loss<T: Real>(
    net: &TinyResidual,
    params: &[T],
    image: ArrayView3<T>,
    label: usize,
    next: Option<(ArrayView3<T>, &Warp)>,
    weights: &LossWeights,
    grads: &mut [T],
) -> Result<SampleLoss<T>> {
    let pass = net.forward(params, image);
    let logits = pass.logits();
    let (classification, dlog) = match weights.kind {
        LossKind::CategoricalCrossEntropy => cross_entropy(logits.view(), label),
        LossKind::MultiLabelSoftMargin => multilabel_soft_margin(logits.view(), label),
    };
    let (c, h, w) = pass.class_map().dim();
    let mut d_map = global_avg_pool_backward(dlog.as_slice().expect("contiguous"), (h, w));
    let mut out = SampleLoss { classification, puzzle: T::zero(), temporal: T::zero(), total: classification, logits };

    if let Some((alpha, grid)) = weights.puzzle {
        let alpha_t = T::of(alpha);
        let tiles = split_tiles(image, grid)?;
        let passes: Vec<ResidualPass<T>> = tiles.iter().map(|t| net.forward(params, t.view())).collect();
        let maps: Vec<Array3<T>> = passes.iter().map(|p| p.class_map().clone()).collect();
        let merged = merge_tiles(&maps, grid);
        if merged.dim() != (c, h, w) {
            let (_, mh, mw) = merged.dim();
            return Err(Error::Shape { what: "merged tile maps", expected: (h, w), found: (mh, mw) });
        }
        let n = T::of((h * w) as f64);
        let mut d_merged = Array3::<T>::zeros((c, h, w));
        let mut acc = T::zero();
        for y in 0..h {
            for x in 0..w {
                let diff = pass.class_map()[[label, y, x]] - merged[[label, y, x]];
                acc += diff.abs();
                let g = alpha_t * sign(diff) / n;
                d_map[[label, y, x]] += g;
                d_merged[[label, y, x]] = -g;
            }
        }
        out.puzzle = acc / n;
        for (p, d) in passes.iter().zip(split_tiles(d_merged.view(), grid)?) {
            net.backward(params, p, d.view(), grads);
        }
        out.total += alpha_t * out.puzzle;
    }

    if let (Some(beta), Some((next_image, warp))) = (weights.temporal, next) {
        let beta_t = T::of(beta);
        let p1 = net.forward(params, next_image);
        if p1.class_map().dim() != (c, h, w) {
            let (_, a, b) = p1.class_map().dim();
            return Err(Error::Shape { what: "next-frame class map", expected: (h, w), found: (a, b) });
        }
        let warped = warp.apply(pass.class_map().slice(s![label..label + 1, .., ..]));
        let valid = warp.valid();
        let nv = warp.valid_count();
        if nv > 0 {
            let n = T::of(nv as f64);
            let mut d1 = Array3::<T>::zeros((c, h, w));
            let mut dw = Array3::<T>::zeros((1, h, w));
            let mut acc = T::zero();
            for ((y, x), &ok) in valid.indexed_iter() {
                if !ok {
                    continue;
                }
                let diff = p1.class_map()[[label, y, x]] - warped[[0, y, x]];
                acc += diff.abs();
                let g = beta_t * sign(diff) / n;
                d1[[label, y, x]] = g;
                dw[[0, y, x]] = -g;
            }
            let back = warp.backward(dw.view());
            let mut slot = d_map.slice_mut(s![label, .., ..]);
            slot += &back.slice(s![0, .., ..]);
            net.backward(params, &p1, d1.view(), grads);
            out.temporal = acc / n;
            out.total += beta_t * out.temporal;
        }
    }

    net.backward(params, &pass, d_map.view(), grads);
    Ok(out)
}

/// Decoded training images plus, per image, the index of the next frame of
/// its sequence and the class-map warp towards it.
pub struct TrainingData {
    pub data: LabeledImages,
    pub next: Vec<Option<(usize, Warp)>>,
}

impl TrainingData {
    pub fn from_images(data: LabeledImages) -> Self {
        let next = vec![None; data.len()];
        Self { data, next }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Loads records for training. When temporal consistency is enabled, links
/// consecutive frames and loads their flow, estimating it by block matching
/// where no flow file is present.
pub fn prepare_training_data(records: &[FrameRecord], cfg: &ClassifierConfig) -> Result<TrainingData> {
    let order = class_order(cfg.num_classes)?;
    let data = LabeledImages::load(records, &order, Some(cfg.input_size))?;
    let mut out = TrainingData::from_images(data);
    if !cfg.temporal_enabled {
        return Ok(out);
    }
    let spec = residual_spec(cfg.backbone, cfg.num_classes);
    let g = cfg.input_size / spec.downsample_factor();
    let index: HashMap<(ClassLabel, &str, u32), usize> =
        records.iter().enumerate().map(|(i, r)| ((r.class, r.sequence_id.as_str(), r.frame_index), i)).collect();
    for (i, r) in records.iter().enumerate() {
        let Some(&j) = index.get(&(r.class, r.sequence_id.as_str(), r.frame_index + 1)) else { continue };
        let flow = match &r.flow {
            Some(p) => FlowField::read(p)?,
            None => estimate_flow(&read_rgb(&r.path)?, &read_rgb(&records[j].path)?, &BlockMatchParams::default()),
        };
        out.next[i] = Some((j, Warp::new(flow_to_grid(&flow, g, g).view())));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_classification: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ClassifierConfig,
    labels: Vec<ClassLabel>,
    curves: Vec<EpochStats>,
    best_epoch: usize,
    num_params: usize,
}

const CHECKPOINT_TAG: &str = "sortseg-classifier v1";

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierCheckpoint {
    pub config: ClassifierConfig,
    /// `labels[i]` is the class of output `i`.
    pub labels: Vec<ClassLabel>,
    pub curves: Vec<EpochStats>,
    pub best_epoch: usize,
    pub params: Vec<f32>,
}

impl ClassifierCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            labels: self.labels.clone(),
            curves: self.curves.clone(),
            best_epoch: self.best_epoch,
            num_params: self.params.len(),
        };
        let mut bytes = format!("{CHECKPOINT_TAG}\n{}\n", serde_json::to_string(&header).expect("serializable")).into_bytes();
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        ensure_parent(path)?;
        let mut f = fs::File::create(path).at(path)?;
        f.write_all(&bytes).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        let (header, params) = split_checkpoint(&bytes, CHECKPOINT_TAG)?;
        let header: CheckpointHeader =
            serde_json::from_str(header).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if params.len() != header.num_params {
            return Err(Error::Checkpoint(format!("{}: expected {} parameters, found {}", path.display(), header.num_params, params.len())));
        }
        Ok(Self { config: header.config, labels: header.labels, curves: header.curves, best_epoch: header.best_epoch, params })
    }

    pub fn curves_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_classification,train_accuracy,val_loss,val_accuracy\n");
        for e in &self.curves {
            s += &format!(
                "{},{:.6},{:.6},{:.4},{:.6},{:.4}\n",
                e.epoch, e.train_loss, e.train_classification, e.train_accuracy, e.val_loss, e.val_accuracy
            );
        }
        s
    }

    pub fn model(&self) -> Result<Classifier> {
        Classifier::from_checkpoint(self)
    }
}

/// Splits `<tag>\n<json>\n<f32 LE...>`.
pub(crate) fn split_checkpoint<'a>(bytes: &'a [u8], tag: &str) -> Result<(&'a str, Vec<f32>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let first = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing version line"))?;
    if &bytes[..first] != tag.as_bytes() {
        return Err(bad(&format!("unexpected version tag {:?}", String::from_utf8_lossy(&bytes[..first]))));
    }
    let rest = &bytes[first + 1..];
    let second = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header"))?;
    let header = std::str::from_utf8(&rest[..second]).map_err(|_| bad("header is not UTF-8"))?;
    let payload = &rest[second + 1..];
    if payload.len() % 4 != 0 {
        return Err(bad("truncated parameter block"));
    }
    let params = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((header, params))
}

/// A loaded classifier ready for inference.
#[derive(Clone, Debug)]
pub struct Classifier {
    net: TinyResidual,
    params: Vec<f32>,
    pub labels: Vec<ClassLabel>,
    pub input_size: usize,
}

impl Classifier {
    pub fn from_checkpoint(ck: &ClassifierCheckpoint) -> Result<Self> {
        if ck.labels.len() != ck.config.num_classes {
            return Err(Error::Checkpoint(format!("{} labels for {} classes", ck.labels.len(), ck.config.num_classes)));
        }
        let net = TinyResidual::new(residual_spec(ck.config.backbone, ck.config.num_classes));
        if net.num_params() != ck.params.len() {
            return Err(Error::Checkpoint(format!(
                "backbone expects {} parameters, checkpoint has {}",
                net.num_params(),
                ck.params.len()
            )));
        }
        Ok(Self { net, params: ck.params.clone(), labels: ck.labels.clone(), input_size: ck.config.input_size })
    }

    pub fn net(&self) -> &TinyResidual {
        &self.net
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn class_index(&self, class: ClassLabel) -> Option<usize> {
        self.labels.iter().position(|&c| c == class)
    }

    /// Resizes to the training input size and converts to a tensor.
    pub fn prepare(&self, img: &RgbImage) -> Array3<f32> {
        let n = self.input_size as u32;
        to_tensor(&resize_rgb(img, n, n))
    }

    fn check(&self, x: &Array3<f32>) -> Result<()> {
        let (c, h, w) = x.dim();
        let f = self.net.spec().downsample_factor();
        if c != 3 || h % f != 0 || w % f != 0 {
            return Err(Error::Checkpoint(format!("input {c}x{h}x{w} is incompatible with the backbone")));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array3<f32>) -> Result<ResidualPass<f32>> {
        self.check(x)?;
        Ok(self.net.forward(&self.params, x.view()))
    }

    /// Class probabilities per image.
    pub fn predict(&self, batch: &[Array3<f32>]) -> Result<Vec<Array1<f32>>> {
        batch.iter().map(|x| Ok(softmax(self.forward(x)?.logits().view()))).collect()
    }
}

pub fn predict(ck: &ClassifierCheckpoint, batch: &[Array3<f32>]) -> Result<Vec<Array1<f32>>> {
    ck.model()?.predict(batch)
}

fn argmax(v: &Array1<f32>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean classification loss and accuracy without parameter updates.
pub fn evaluate(net: &TinyResidual, params: &[f32], data: &LabeledImages, kind: LossKind) -> (f64, f64) {
    if data.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut loss = 0.0;
    let mut correct = 0;
    for (x, &y) in data.images.iter().zip(&data.labels) {
        let logits = net.forward(params, x.view()).logits();
        let l = match kind {
            LossKind::CategoricalCrossEntropy => cross_entropy(logits.view(), y).0,
            LossKind::MultiLabelSoftMargin => multilabel_soft_margin(logits.view(), y).0,
        };
        loss += l as f64;
        if argmax(&logits) == y {
            correct += 1;
        }
    }
    (loss / data.len() as f64, correct as f64 / data.len() as f64)
}

/// Trains from in-memory data; returns the parameters of the epoch with the
/// lowest validation loss (training loss when `val` is empty).
pub fn train_classifier(train: &TrainingData, val: &LabeledImages, cfg: &ClassifierConfig) -> Result<ClassifierCheckpoint> {
    cfg.validate()?;
    let labels = class_order(cfg.num_classes)?;
    if let Some(&bad) = train.data.labels.iter().chain(&val.labels).find(|&&l| l >= cfg.num_classes) {
        return Err(Error::ClassMismatch { configured: cfg.num_classes, found: bad + 1 });
    }
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let net = TinyResidual::new(residual_spec(cfg.backbone, cfg.num_classes));
    let mut params: Vec<f32> = net.init_params(derive_seed(cfg.seed, "classifier/init"));
    let mut opt: Box<dyn Optimizer<f32>> = match cfg.optimizer {
        OptimizerKind::AdaptiveMoment => Box::new(Adam::new(params.len(), cfg.lr)),
        OptimizerKind::MomentumSgd => Box::new(Sgd::new(params.len(), cfg.lr, cfg.momentum)),
    };
    let weights = cfg.weights();
    let mut grads = vec![0.0f32; params.len()];
    let mut curves = Vec::new();
    let mut best = (f64::INFINITY, 0usize, params.clone());
    for epoch in 0..cfg.max_epochs {
        let (mut total, mut cls, mut correct, mut seen) = (0.0f64, 0.0f64, 0usize, 0usize);
        let batches = train.data.batches(cfg.batch_size, cfg.augment, derive_seed(cfg.seed, &format!("classifier/epoch/{epoch}")), true)?;
        for (bi, batch) in batches.enumerate() {
            grads.iter_mut().for_each(|g| *g = 0.0);
            for (k, &i) in batch.indices.iter().enumerate() {
                let next = train.next[i].as_ref().map(|(j, w)| (train.data.images[*j].view(), w));
                let r = sample_loss(&net, &params, batch.images[k].view(), batch.labels[k], next, &weights, &mut grads)?;
                if !r.total.is_finite() {
                    return Err(Error::Divergence { epoch, batch: bi, loss: r.total as f64 });
                }
                total += r.total as f64;
                cls += r.classification as f64;
                correct += usize::from(argmax(&r.logits) == batch.labels[k]);
                seen += 1;
            }
            let scale = 1.0 / batch.indices.len() as f32;
            grads.iter_mut().for_each(|g| *g *= scale);
            opt.step(&mut params, &grads);
        }
        let (val_loss, val_accuracy) = evaluate(&net, &params, val, cfg.loss);
        let n = seen as f64;
        let stats = EpochStats {
            epoch,
            train_loss: total / n,
            train_classification: cls / n,
            train_accuracy: correct as f64 / n,
            val_loss,
            val_accuracy,
        };
        log::info!(
            "classifier epoch {epoch}: loss {:.4} acc {:.3} val loss {:.4} val acc {:.3}",
            stats.train_loss, stats.train_accuracy, stats.val_loss, stats.val_accuracy
        );
        let monitor = if val.is_empty() { stats.train_loss } else { val_loss };
        curves.push(stats);
        if monitor < best.0 {
            best = (monitor, epoch, params.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    Ok(ClassifierCheckpoint { config: cfg.clone(), labels, curves, best_epoch: best.1, params: best.2 })
}

/// Ingests a dataset tree (two-class original or three-class BR tree) and
/// trains on its training pool with a sequence-level validation split.
pub fn train_on_dataset(root: &Path, layout: Layout, cfg: &ClassifierConfig) -> Result<ClassifierCheckpoint> {
    cfg.validate()?;
    let opts = IngestOptions { layout, val_ratio: cfg.val_ratio, seed: cfg.seed };
    let (split, _) = ingest(root, &opts)?;
    let found = split.classes();
    let expected: std::collections::BTreeSet<ClassLabel> = class_order(cfg.num_classes)?.into_iter().collect();
    if found != expected {
        return Err(Error::ClassMismatch { configured: cfg.num_classes, found: found.len() });
    }
    let train = prepare_training_data(&split.train, cfg)?;
    let val = LabeledImages::load(&split.val, &class_order(cfg.num_classes)?, Some(cfg.input_size))?;
    train_classifier(&train, &val, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn narrow_net(classes: usize) -> (TinyResidual, Vec<f64>) {
        let net = TinyResidual::new(ResidualSpec::narrow(classes));
        let p = net.init_params(3);
        (net, p)
    }

    fn img(h: usize, w: usize, phase: f64) -> Array3<f64> {
        Array3::from_shape_fn((3, h, w), |(c, y, x)| 0.5 + 0.4 * ((c + 1) as f64 * 0.31 * y as f64 - 0.27 * x as f64 + phase).sin())
    }

    #[test]
    fn tiles_merge_back() {
        let x = img(8, 12, 0.2);
        assert_eq!(merge_tiles(&split_tiles(x.view(), 2).unwrap(), 2), x);
        assert!(split_tiles(img(7, 8, 0.0).view(), 2).is_err());
    }

    #[test]
    fn constant_model_has_zero_puzzle_loss() {
        let (net, mut p) = narrow_net(2);
        // zero every weight: class maps equal the head bias everywhere
        p.iter_mut().for_each(|v| *v = 0.0);
        let head_bias = net.head().bias;
        p[head_bias.range()][0] = 0.7;
        let l = puzzle_loss(&net, &p, img(32, 32, 0.1).view(), 0, 2).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn zero_flow_same_frame_has_zero_temporal_loss() {
        let (net, p) = narrow_net(2);
        let x = img(32, 32, 0.4);
        let l = temporal_consistency_loss(&net, &p, x.view(), x.view(), Array3::zeros((4, 4, 2)).view(), 1).unwrap();
        assert_eq!(l, 0.0);
        assert!(temporal_consistency_loss(&net, &p, x.view(), x.view(), Array3::zeros((3, 4, 2)).view(), 1).is_err());
    }

    #[test]
    fn shifted_maps_have_zero_loss_on_valid_region() {
        let m = Array2::from_shape_fn((5, 6), |(y, x)| (y * 6 + x) as f64 * 0.1);
        let shifted = Array2::from_shape_fn((5, 6), |(y, x)| if x == 0 { 99.0 } else { m[[y, x - 1]] });
        let mut d = Array3::zeros((5, 6, 2));
        d.slice_mut(s![.., .., 0]).fill(1.0);
        assert_eq!(warped_l1(m.view(), shifted.view(), &Warp::new(d.view())), 0.0);
    }

    #[test]
    fn zero_weights_reduce_to_classification() {
        let (net, p) = narrow_net(2);
        let x = img(32, 32, 0.0);
        let x1 = img(32, 32, 0.5);
        let warp = Warp::new(Array3::from_elem((4, 4, 2), 0.5).view());
        let plain = LossWeights { kind: LossKind::CategoricalCrossEntropy, puzzle: None, temporal: None };
        let zero = LossWeights { puzzle: Some((0.0, 2)), temporal: Some(0.0), ..plain };
        let mut g1 = vec![0.0; p.len()];
        let mut g2 = vec![0.0; p.len()];
        let a = sample_loss(&net, &p, x.view(), 1, Some((x1.view(), &warp)), &plain, &mut g1).unwrap();
        let b = sample_loss(&net, &p, x.view(), 1, Some((x1.view(), &warp)), &zero, &mut g2).unwrap();
        assert_eq!(a.total, b.total);
        assert_eq!(g1, g2);
        assert!(b.puzzle > 0.0 && b.temporal > 0.0);
    }

    #[test]
    fn sample_loss_parts_match_standalone_losses() {
        let (net, p) = narrow_net(3);
        let x = img(32, 32, 0.3);
        let x1 = img(32, 32, 0.9);
        let flow = Array3::from_shape_fn((4, 4, 2), |(y, x, k)| if k == 0 { 0.6 + 0.1 * y as f64 } else { -0.3 * x as f64 / 4.0 });
        let warp = Warp::new(flow.view());
        let w = LossWeights { kind: LossKind::MultiLabelSoftMargin, puzzle: Some((2.0, 2)), temporal: Some(6.0) };
        let mut g = vec![0.0; p.len()];
        let r = sample_loss(&net, &p, x.view(), 2, Some((x1.view(), &warp)), &w, &mut g).unwrap();
        let pz = puzzle_loss(&net, &p, x.view(), 2, 2).unwrap();
        let tc = temporal_consistency_loss(&net, &p, x.view(), x1.view(), flow.view(), 2).unwrap();
        assert!((r.puzzle - pz).abs() < 1e-12);
        assert!((r.temporal - tc).abs() < 1e-12);
        assert!((r.total - (r.classification + 2.0 * pz + 6.0 * tc)).abs() < 1e-12);
    }

    #[test]
    fn grid_flow_is_rescaled() {
        let f = FlowField::uniform(128, 128, 8.0, 0.0);
        let g = flow_to_grid(&f, 16, 16);
        assert!(g.iter().enumerate().all(|(i, &v)| v == if i % 2 == 0 { 1.0 } else { 0.0 }));
    }

    #[test]
    fn config_checks() {
        assert!(ClassifierConfig { num_classes: 4, ..Default::default() }.validate().is_err());
        assert!(ClassifierConfig { pretrained: true, ..Default::default() }.validate().is_err());
        assert!(ClassifierConfig { input_size: 100, ..Default::default() }.validate().is_err());
        assert!(ClassifierConfig::default().validate().is_ok());
        let r50 = TinyResidual::new(residual_spec(Backbone::Residual50, 2));
        assert_eq!(r50.num_feature_layers(), 25);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = TinyResidual::new(residual_spec(Backbone::Narrow, 2));
        let ck = ClassifierCheckpoint {
            config: ClassifierConfig { backbone: Backbone::Narrow, input_size: 32, ..Default::default() },
            labels: class_order(2).unwrap(),
            curves: vec![EpochStats { epoch: 0, train_loss: 0.5, train_classification: 0.5, train_accuracy: 0.5, val_loss: 0.6, val_accuracy: 0.4 }],
            best_epoch: 0,
            params: net.init_params(4),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        ck.save(&path).unwrap();
        assert_eq!(ClassifierCheckpoint::load(&path).unwrap(), ck);
        assert!(ck.curves_csv().starts_with("epoch,"));
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, bytes).unwrap();
        assert!(ClassifierCheckpoint::load(&path).is_err());
    }

    #[test]
    fn predictions_are_simplices_and_duplicates_agree() {
        let net = TinyResidual::new(residual_spec(Backbone::Narrow, 3));
        let ck = ClassifierCheckpoint {
            config: ClassifierConfig { backbone: Backbone::Narrow, num_classes: 3, input_size: 32, ..Default::default() },
            labels: class_order(3).unwrap(),
            curves: vec![],
            best_epoch: 0,
            params: net.init_params(8),
        };
        let x = img(32, 32, 1.0).mapv(|v| v as f32);
        let y = img(32, 32, 2.0).mapv(|v| v as f32);
        let probs = predict(&ck, &[x.clone(), y, x]).unwrap();
        for p in &probs {
            assert!((p.sum() - 1.0).abs() < 1e-5);
            assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert_eq!(probs[0], probs[2]);
        assert!(predict(&ck, &[Array3::zeros((3, 30, 32))]).is_err());
    }
}
