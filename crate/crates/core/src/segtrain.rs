//! Fully supervised segmenter trained on refined pseudo-masks, and inference
//! producing the final masks.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::RgbImage;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sortseg_nn::loss::pixel_cross_entropy;
use sortseg_nn::ops::resize_bilinear;
use sortseg_nn::optim::{Adam, Optimizer, Sgd};
use sortseg_nn::unet::{TinyUNet, UNetSpec};

use crate::classifier::{split_checkpoint, OptimizerKind};
use crate::dataio::{split_train_val, FrameRecord};
use crate::error::{Error, IoContext, Result};
use crate::formats::{ensure_parent, read_mask, read_rgb, write_mask};
use crate::raster::{resize_mask_nearest, resize_rgb, to_tensor, Mask};
use crate::saliency::BatchSummary;
use crate::util::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegArchitecture {
    #[default]
    TinyEncoderDecoder,
    /// Wider stand-in for the full-scale slot.
    Wide,
}

impl SegArchitecture {
    pub fn spec(self) -> UNetSpec {
        match self {
            SegArchitecture::TinyEncoderDecoder => UNetSpec::desk(),
            SegArchitecture::Wide => UNetSpec { in_channels: 3, widths: vec![16, 32, 64, 128], num_classes: 2 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    pub architecture: SegArchitecture,
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub momentum: f32,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Square side the network runs at; masks are resized back.
    pub input_size: usize,
    /// Share of sequences kept for training; the rest validate.
    pub train_ratio: f64,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            architecture: SegArchitecture::TinyEncoderDecoder,
            optimizer: OptimizerKind::AdaptiveMoment,
            lr: 2e-3,
            momentum: 0.9,
            max_epochs: 25,
            patience: 5,
            batch_size: 8,
            input_size: 64,
            train_ratio: 0.8,
            seed: 0,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        let m = self.architecture.spec().size_multiple();
        if self.input_size == 0 || self.input_size % m != 0 {
            return Err(Error::Config(format!("segmenter input size must be a positive multiple of {m}")));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("segmenter batch size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("segmenter learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

const CHECKPOINT_TAG: &str = "sortseg-segmenter v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: SegConfig,
    curves: Vec<SegEpochStats>,
    best_epoch: usize,
    num_params: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegCheckpoint {
    pub config: SegConfig,
    pub curves: Vec<SegEpochStats>,
    pub best_epoch: usize,
    pub params: Vec<f32>,
}

impl SegCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            curves: self.curves.clone(),
            best_epoch: self.best_epoch,
            num_params: self.params.len(),
        };
        let mut bytes = format!("{CHECKPOINT_TAG}\n{}\n", serde_json::to_string(&header).expect("serializable")).into_bytes();
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        ensure_parent(path)?;
        fs::File::create(path).at(path)?.write_all(&bytes).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        let (header, params) = split_checkpoint(&bytes, CHECKPOINT_TAG)?;
        let header: Header = serde_json::from_str(header).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if header.num_params != params.len() {
            return Err(Error::Checkpoint(format!("{}: expected {} parameters, found {}", path.display(), header.num_params, params.len())));
        }
        Ok(Self { config: header.config, curves: header.curves, best_epoch: header.best_epoch, params })
    }

    pub fn curves_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for e in &self.curves {
            s += &format!("{},{:.6},{:.6}\n", e.epoch, e.train_loss, e.val_loss);
        }
        s
    }
}

/// An image and its pseudo-mask, both at the network input size.
#[derive(Clone, Debug)]
pub struct SegSample {
    pub image: Array3<f32>,
    /// 1 = unwanted, 0 = background.
    pub target: Array2<u8>,
}

impl SegSample {
    pub fn new(img: &RgbImage, mask: &Mask, size: usize) -> Result<Self> {
        let (w, h) = img.dimensions();
        if mask.dim() != (h as usize, w as usize) {
            return Err(Error::Shape { what: "pseudo-mask", expected: (h as usize, w as usize), found: mask.dim() });
        }
        let image = to_tensor(&resize_rgb(img, size as u32, size as u32));
        let target = resize_mask_nearest(mask, size, size).mapv(u8::from);
        Ok(Self { image, target })
    }
}

/// Loads `(image, pseudo-mask)` pairs; masks come from the mirror tree under
/// `mask_root`.
pub fn load_samples(records: &[FrameRecord], mask_root: &Path, size: usize) -> Result<Vec<SegSample>> {
    records
        .iter()
        .map(|r| {
            let mp = r.mirror_path(mask_root, "png");
            if !mp.exists() {
                return Err(Error::MissingMask(mp));
            }
            SegSample::new(&read_rgb(&r.path)?, &read_mask(&mp)?, size)
        })
        .collect()
}

fn mean_loss(net: &TinyUNet, params: &[f32], data: &[SegSample]) -> f64 {
    if data.is_empty() {
        return f64::NAN;
    }
    data.iter()
        .map(|s| pixel_cross_entropy(net.forward(params, s.image.view()).logits().view(), &s.target).0 as f64)
        .sum::<f64>()
        / data.len() as f64
}

/// Trains on in-memory samples and returns the parameters with the lowest
/// validation loss (training loss when `val` is empty).
pub fn train_segmenter_on(train: &[SegSample], val: &[SegSample], cfg: &SegConfig) -> Result<SegCheckpoint> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty segmenter training set".into()));
    }
    let n = cfg.input_size;
    if let Some(s) = train.iter().chain(val).find(|s| s.target.dim() != (n, n)) {
        return Err(Error::Shape { what: "segmenter sample", expected: (n, n), found: s.target.dim() });
    }
    let net = TinyUNet::new(cfg.architecture.spec());
    let mut params: Vec<f32> = net.init_params(derive_seed(cfg.seed, "segmenter/init"));
    let mut opt: Box<dyn Optimizer<f32>> = match cfg.optimizer {
        OptimizerKind::AdaptiveMoment => Box::new(Adam::new(params.len(), cfg.lr)),
        OptimizerKind::MomentumSgd => Box::new(Sgd::new(params.len(), cfg.lr, cfg.momentum)),
    };
    let mut grads = vec![0.0f32; params.len()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curves = Vec::new();
    let mut best = (f64::INFINITY, 0usize, params.clone());
    for epoch in 0..cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("segmenter/epoch/{epoch}")));
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            grads.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                let pass = net.forward(&params, train[i].image.view());
                let (loss, d) = pixel_cross_entropy(pass.logits().view(), &train[i].target);
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch, batch: bi, loss: loss as f64 });
                }
                total += loss as f64;
                net.backward(&params, &pass, d.view(), &mut grads);
            }
            let scale = 1.0 / chunk.len() as f32;
            grads.iter_mut().for_each(|g| *g *= scale);
            opt.step(&mut params, &grads);
        }
        let stats = SegEpochStats { epoch, train_loss: total / train.len() as f64, val_loss: mean_loss(&net, &params, val) };
        log::info!("segmenter epoch {epoch}: loss {:.4} val loss {:.4}", stats.train_loss, stats.val_loss);
        let monitor = if val.is_empty() { stats.train_loss } else { stats.val_loss };
        curves.push(stats);
        if monitor < best.0 {
            best = (monitor, epoch, params.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    Ok(SegCheckpoint { config: cfg.clone(), curves, best_epoch: best.1, params: best.2 })
}

/// Trains on `records` with pseudo-masks under `mask_root`, holding out a
/// share of sequences (scored against pseudo-masks) for early stopping.
pub fn train_segmenter(records: &[FrameRecord], mask_root: &Path, cfg: &SegConfig) -> Result<SegCheckpoint> {
    cfg.validate()?;
    let sequences: std::collections::BTreeSet<_> = records.iter().map(|r| (r.class, &r.sequence_id)).collect();
    let (train, val) = if sequences.len() >= 2 {
        split_train_val(records, cfg.train_ratio, derive_seed(cfg.seed, "segmenter/split"))?
    } else {
        log::warn!("fewer than two sequences; segmenter trains without a validation split");
        (records.to_vec(), Vec::new())
    };
    let train = load_samples(&train, mask_root, cfg.input_size)?;
    let val = load_samples(&val, mask_root, cfg.input_size)?;
    train_segmenter_on(&train, &val, cfg)
}

/// Per-pixel decision: unwanted only when its probability strictly exceeds
/// the background probability.
pub fn decide(p_background: f32, p_unwanted: f32) -> bool {
    p_unwanted > p_background
}

/// A loaded segmenter.
#[derive(Clone, Debug)]
pub struct Segmenter {
    net: TinyUNet,
    params: Vec<f32>,
    input_size: usize,
}

impl Segmenter {
    pub fn from_checkpoint(ck: &SegCheckpoint) -> Result<Self> {
        ck.config.validate()?;
        let net = TinyUNet::new(ck.config.architecture.spec());
        if net.num_params() != ck.params.len() {
            return Err(Error::Checkpoint(format!(
                "architecture expects {} parameters, checkpoint has {}",
                net.num_params(),
                ck.params.len()
            )));
        }
        Ok(Self { net, params: ck.params.clone(), input_size: ck.config.input_size })
    }

    /// Probabilities `(background, unwanted)` at the image's own resolution.
    pub fn probabilities(&self, img: &RgbImage) -> (Array2<f32>, Array2<f32>) {
        let n = self.input_size as u32;
        let x = to_tensor(&resize_rgb(img, n, n));
        let logits = self.net.forward(&self.params, x.view()).logits().clone();
        let (_, h, w) = logits.dim();
        let mut p1 = Array2::<f32>::zeros((h, w));
        for y in 0..h {
            for xx in 0..w {
                let (a, b) = (logits[[0, y, xx]], logits[[1, y, xx]]);
                p1[[y, xx]] = 1.0 / (1.0 + (a - b).exp());
            }
        }
        let (iw, ih) = img.dimensions();
        let p1 = resize_bilinear(p1.view(), ih as usize, iw as usize);
        (p1.mapv(|p| 1.0 - p), p1)
    }

    pub fn segment(&self, img: &RgbImage) -> Mask {
        let (p0, p1) = self.probabilities(img);
        ndarray::Zip::from(&p0).and(&p1).map_collect(|&a, &b| decide(a, b))
    }
}

pub fn segment(ck: &SegCheckpoint, img: &RgbImage) -> Result<Mask> {
    Ok(Segmenter::from_checkpoint(ck)?.segment(img))
}

/// Writes `S(·)` masks for every record into the mirror tree under `out_root`.
pub fn batch_segment(ck: &SegCheckpoint, records: &[FrameRecord], out_root: &Path, resume: bool) -> Result<BatchSummary> {
    let model = Segmenter::from_checkpoint(ck)?;
    let mut summary = BatchSummary::default();
    for rec in records {
        let out = rec.mirror_path(out_root, "png");
        if resume && out.exists() {
            summary.skipped += 1;
            continue;
        }
        write_mask(&out, &model.segment(&read_rgb(&rec.path)?))?;
        summary.written += 1;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_goes_to_background() {
        assert!(!decide(0.5, 0.5));
        assert!(decide(0.49, 0.51));
    }

    #[test]
    fn output_matches_input_shape() {
        let net = TinyUNet::new(UNetSpec::desk());
        let ck = SegCheckpoint { config: SegConfig::default(), curves: vec![], best_epoch: 0, params: net.init_params(1) };
        let img = RgbImage::from_pixel(37, 23, image::Rgb([10, 200, 30]));
        let m = segment(&ck, &img).unwrap();
        assert_eq!(m.dim(), (23, 37));
        assert_eq!(m, segment(&ck, &img).unwrap());
    }

    #[test]
    fn mismatched_checkpoint_is_rejected() {
        let ck = SegCheckpoint { config: SegConfig::default(), curves: vec![], best_epoch: 0, params: vec![0.0; 7] };
        assert!(matches!(Segmenter::from_checkpoint(&ck), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seg.ckpt");
        let ck = SegCheckpoint {
            config: SegConfig { seed: 9, ..Default::default() },
            curves: vec![SegEpochStats { epoch: 0, train_loss: 0.5, val_loss: 0.4 }],
            best_epoch: 0,
            params: vec![1.5, -2.0, 0.25],
        };
        ck.save(&p).unwrap();
        assert_eq!(SegCheckpoint::load(&p).unwrap(), ck);
        fs::write(&p, b"sortseg-classifier v1\n{}\n").unwrap();
        assert!(SegCheckpoint::load(&p).is_err());
    }
}
