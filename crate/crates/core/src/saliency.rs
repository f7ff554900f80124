//! CAM-family saliency maps and their thresholding into coarse masks.

use std::fmt;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use sortseg_nn::ops::resize_bilinear;

use crate::classifier::Classifier;
use crate::dataio::{ClassLabel, FrameRecord};
use crate::error::{Error, Result};
use crate::formats::{read_rgb, write_mask, write_unit_map};
use crate::raster::{otsu_threshold, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamMethod {
    Gradcam,
    GradcamPp,
    Layercam,
    #[serde(alias = "raw_map")]
    Raw,
}

impl CamMethod {
    pub const ALL: [CamMethod; 4] = [CamMethod::Gradcam, CamMethod::GradcamPp, CamMethod::Layercam, CamMethod::Raw];

    pub fn name(self) -> &'static str {
        match self {
            CamMethod::Gradcam => "gradcam",
            CamMethod::GradcamPp => "gradcam_pp",
            CamMethod::Layercam => "layercam",
            CamMethod::Raw => "raw",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gradcam" => Ok(CamMethod::Gradcam),
            "gradcam_pp" | "gradcampp" | "gradcam++" => Ok(CamMethod::GradcamPp),
            "layercam" => Ok(CamMethod::Layercam),
            "raw" | "raw_map" => Ok(CamMethod::Raw),
            other => Err(Error::Config(format!("unknown CAM method `{other}`"))),
        }
    }
}

impl fmt::Display for CamMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which feature layer the gradient-based methods read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelector {
    #[default]
    LastConv,
    Index(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Fixed(f32),
    Otsu,
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Fixed(0.25)
    }
}

impl Threshold {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Threshold::Fixed(t) if !(t > 0.0 && t < 1.0) => Err(Error::Config(format!("threshold must lie in (0, 1), got {t}"))),
            _ => Ok(()),
        }
    }
}

/// A model that exposes feature activations, their gradients with respect to
/// a class score, and its own class evidence map.
pub trait CamModel {
    fn num_layers(&self) -> usize;

    /// `(A, dScore/dA)` at `layer`, both `(K, h, w)`.
    fn activations_and_gradients(&self, image: &Array3<f32>, class: usize, layer: usize) -> Result<(Array3<f32>, Array3<f32>)>;

    fn class_map(&self, image: &Array3<f32>, class: usize) -> Result<Array2<f32>>;
}

impl CamModel for Classifier {
    fn num_layers(&self) -> usize {
        self.net().num_feature_layers()
    }

    fn activations_and_gradients(&self, image: &Array3<f32>, class: usize, layer: usize) -> Result<(Array3<f32>, Array3<f32>)> {
        let pass = self.forward(image)?;
        let (c, h, w) = pass.class_map().dim();
        if class >= c {
            return Err(Error::Config(format!("class index {class} out of range for {c} classes")));
        }
        // score = spatial mean of the class map
        let mut d = Array3::<f32>::zeros((c, h, w));
        d.slice_mut(s![class, .., ..]).fill(1.0 / (h * w) as f32);
        let g = self.net().feature_gradient(self.params(), &pass, d.view(), layer);
        Ok((pass.feature(layer).clone(), g))
    }

    fn class_map(&self, image: &Array3<f32>, class: usize) -> Result<Array2<f32>> {
        let pass = self.forward(image)?;
        Ok(pass.class_map().index_axis(Axis(0), class).to_owned())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    /// Values in `[0, 1]`.
    pub values: Array2<f32>,
    pub target_class: ClassLabel,
    pub method: CamMethod,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoarseMask {
    pub mask: Mask,
    pub threshold: f32,
}

fn relu(v: f32) -> f32 {
    v.max(0.0)
}

/// Low-resolution CAM before upsampling and normalization.
pub fn cam_from_features(method: CamMethod, a: &Array3<f32>, g: &Array3<f32>) -> Array2<f32> {
    let (k, h, w) = a.dim();
    let mut cam = Array2::<f32>::zeros((h, w));
    match method {
        CamMethod::Gradcam => {
            for ch in 0..k {
                let wk = g.index_axis(Axis(0), ch).mean().unwrap_or(0.0);
                cam.scaled_add(wk, &a.index_axis(Axis(0), ch));
            }
        }
        CamMethod::GradcamPp => {
            for ch in 0..k {
                let ga = g.index_axis(Axis(0), ch);
                let aa = a.index_axis(Axis(0), ch);
                let sum_a = aa.sum();
                let mut wk = 0.0f32;
                for &gv in ga.iter() {
                    if gv == 0.0 {
                        continue;
                    }
                    let g2 = gv * gv;
                    let g3 = g2 * gv;
                    let alpha = g2 / (2.0 * g2 + sum_a * g3 + 1e-6);
                    wk += relu(gv) * alpha;
                }
                cam.scaled_add(wk, &aa);
            }
        }
        CamMethod::Layercam => {
            for ch in 0..k {
                let weighted = &g.index_axis(Axis(0), ch).mapv(relu) * &a.index_axis(Axis(0), ch);
                cam += &weighted;
            }
        }
        CamMethod::Raw => unreachable!("raw maps do not use features"),
    }
    cam.mapv(relu)
}

/// Per-image min-max normalization; constant maps become all zero.
pub fn normalize(map: &Array2<f32>) -> Array2<f32> {
    let min = map.iter().copied().fold(f32::INFINITY, f32::min);
    let max = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(max > min) {
        return Array2::zeros(map.dim());
    }
    let range = max - min;
    map.mapv(|v| (v - min) / range)
}

/// Saliency of `class` for an input tensor, upsampled to `(out_h, out_w)`.
pub fn saliency_of_tensor(
    model: &impl CamModel,
    x: &Array3<f32>,
    class: usize,
    method: CamMethod,
    layer: LayerSelector,
    out_hw: (usize, usize),
) -> Result<Array2<f32>> {
    let low = match method {
        CamMethod::Raw => model.class_map(x, class)?,
        _ => {
            let idx = match layer {
                LayerSelector::LastConv => model.num_layers() - 1,
                LayerSelector::Index(i) if i < model.num_layers() => i,
                LayerSelector::Index(i) => return Err(Error::Config(format!("feature layer {i} does not exist"))),
            };
            let (a, g) = model.activations_and_gradients(x, class, idx)?;
            let (_, h, w) = a.dim();
            if h < 2 && w < 2 {
                return Err(Error::Config(format!("feature layer {idx} has no spatial extent")));
            }
            cam_from_features(method, &a, &g)
        }
    };
    Ok(normalize(&resize_bilinear(low.view(), out_hw.0, out_hw.1)))
}

/// Saliency map of `target` for an image, at the image's resolution.
pub fn compute_saliency(
    model: &Classifier,
    image: &RgbImage,
    target: ClassLabel,
    method: CamMethod,
    layer: LayerSelector,
) -> Result<SaliencyMap> {
    let class = model
        .class_index(target)
        .ok_or_else(|| Error::Config(format!("checkpoint has no class {target}")))?;
    let x = model.prepare(image);
    let (w, h) = image.dimensions();
    let values = saliency_of_tensor(model, &x, class, method, layer, (h as usize, w as usize))?;
    Ok(SaliencyMap { values, target_class: target, method, source: String::new() })
}

pub fn threshold_values(values: &Array2<f32>, threshold: Threshold) -> CoarseMask {
    let t = match threshold {
        Threshold::Fixed(t) => t,
        Threshold::Otsu => otsu_threshold(values),
    };
    CoarseMask { mask: values.mapv(|v| v >= t), threshold: t }
}

/// Coarse mask `values >= tau` (or Otsu's cut).
pub fn threshold_saliency(map: &SaliencyMap, threshold: Threshold) -> CoarseMask {
    threshold_values(&map.values, threshold)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyJob {
    pub method: CamMethod,
    pub target: ClassLabel,
    pub threshold: Threshold,
    pub layer: LayerSelector,
    pub resume: bool,
    pub save_maps: bool,
}

impl Default for SaliencyJob {
    fn default() -> Self {
        Self {
            method: CamMethod::Gradcam,
            target: ClassLabel::Before,
            threshold: Threshold::default(),
            layer: LayerSelector::LastConv,
            resume: false,
            save_maps: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BatchSummary {
    pub written: usize,
    pub skipped: usize,
}

/// Saliency map location for a frame under a stage root.
pub fn map_path(out_root: &Path, rec: &FrameRecord) -> PathBuf {
    rec.mirror_path(&out_root.join("maps"), "png")
}

/// Coarse masks for every record, mirroring the dataset tree under
/// `out_root`; maps are saved under `out_root/maps` when requested.
pub fn batch_saliency(model: &Classifier, records: &[FrameRecord], job: &SaliencyJob, out_root: &Path) -> Result<BatchSummary> {
    job.threshold.validate()?;
    let mut summary = BatchSummary::default();
    for rec in records {
        let mask_path = rec.mirror_path(out_root, "png");
        let map_file = map_path(out_root, rec);
        if job.resume && mask_path.exists() && (!job.save_maps || map_file.exists()) {
            summary.skipped += 1;
            continue;
        }
        let image = read_rgb(&rec.path)?;
        let mut map = compute_saliency(model, &image, job.target, job.method, job.layer)?;
        map.source = rec.key();
        let coarse = threshold_saliency(&map, job.threshold);
        write_mask(&mask_path, &coarse.mask)?;
        if job.save_maps {
            write_unit_map(&map_file, &map.values)?;
        }
        summary.written += 1;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One-layer model: a fixed feature stack and a linear 1x1 head.
    struct Linear {
        a: Array3<f32>,
        w: Vec<f32>,
    }

    impl CamModel for Linear {
        fn num_layers(&self) -> usize {
            1
        }
        fn activations_and_gradients(&self, _: &Array3<f32>, _: usize, _: usize) -> Result<(Array3<f32>, Array3<f32>)> {
            let (k, h, w) = self.a.dim();
            let g = Array3::from_shape_fn((k, h, w), |(c, _, _)| self.w[c] / (h * w) as f32);
            Ok((self.a.clone(), g))
        }
        fn class_map(&self, _: &Array3<f32>, _: usize) -> Result<Array2<f32>> {
            let (_, h, w) = self.a.dim();
            Ok(Array2::from_shape_fn((h, w), |(y, x)| (0..self.w.len()).map(|c| self.w[c] * self.a[[c, y, x]]).sum()))
        }
    }

    fn feats() -> Array3<f32> {
        Array3::from_shape_fn((2, 4, 4), |(c, y, x)| if c == 0 { (y * 4 + x) as f32 } else { ((x * 7 + y) % 5) as f32 })
    }

    #[test]
    fn gradcam_of_single_channel_score_is_that_channel() {
        let m = Linear { a: feats(), w: vec![1.0, 0.0] };
        let x = Array3::zeros((3, 4, 4));
        let s = saliency_of_tensor(&m, &x, 0, CamMethod::Gradcam, LayerSelector::LastConv, (4, 4)).unwrap();
        let expected = normalize(&m.a.index_axis(Axis(0), 0).to_owned());
        assert!(s.iter().zip(&expected).all(|(a, b)| (a - b).abs() < 1e-6));
        assert_eq!(expected[[3, 3]], 1.0);
        assert_eq!(expected[[0, 0]], 0.0);
    }

    #[test]
    fn constant_score_gives_zero_map() {
        let m = Linear { a: feats(), w: vec![0.0, 0.0] };
        let x = Array3::zeros((3, 4, 4));
        for method in [CamMethod::Gradcam, CamMethod::GradcamPp, CamMethod::Layercam] {
            let s = saliency_of_tensor(&m, &x, 0, method, LayerSelector::LastConv, (8, 8)).unwrap();
            assert!(s.iter().all(|&v| v == 0.0), "{method}");
        }
        assert!(saliency_of_tensor(&m, &x, 0, CamMethod::Gradcam, LayerSelector::Index(3), (8, 8)).is_err());
    }

    #[test]
    fn normalization_hits_both_ends() {
        let n = normalize(&Array2::from_shape_fn((3, 3), |(y, x)| (y * 3 + x) as f32 * 0.37 - 1.0));
        assert_eq!(n.iter().copied().fold(f32::INFINITY, f32::min), 0.0);
        assert_eq!(n.iter().copied().fold(0.0, f32::max), 1.0);
        assert!(normalize(&Array2::from_elem((2, 2), 3.0)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn thresholding_cases() {
        let zero = Array2::<f32>::zeros((3, 3));
        assert!(threshold_values(&zero, Threshold::Fixed(0.25)).mask.iter().all(|&v| !v));
        assert!(threshold_values(&zero, Threshold::Otsu).mask.iter().all(|&v| !v));
        let binary = Array2::from_shape_fn((3, 3), |(y, _)| if y == 1 { 1.0 } else { 0.0 });
        assert_eq!(threshold_values(&binary, Threshold::Fixed(0.5)).mask, binary.mapv(|v| v == 1.0));
        let mut peak = Array2::from_elem((3, 3), 0.5);
        peak[[2, 0]] = 1.0;
        peak[[0, 0]] = 0.0;
        let m = threshold_values(&normalize(&peak), Threshold::Fixed(0.999)).mask;
        assert_eq!(m.iter().filter(|&&v| v).count(), 1);
        assert!(m[[2, 0]]);
        assert!(Threshold::Fixed(1.0).validate().is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in CamMethod::ALL {
            assert_eq!(CamMethod::parse(m.name()).unwrap(), m);
        }
        assert!(CamMethod::parse("scorecam").is_err());
    }
}
