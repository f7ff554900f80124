//! Background removal: per-class median background models, foreground masks,
//! and the three-class training set {before, after, background}.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{frame_stem, gt_flow_path, sequence_dir, ClassLabel, FrameRecord, Partition};
use crate::error::{Error, IoContext, Result};
use crate::formats::{read_rgb, write_rgb, KeyValues};
use crate::raster::{close3, remove_small_components, Mask};
use crate::util::{config_hash, derive_seed};

pub const MAD_TO_SIGMA: f32 = 1.4826;
pub const NEUTRAL_GRAY: u8 = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BgParams {
    pub dev_thresh: f32,
    pub sat_thresh: f32,
    pub min_blob: usize,
    /// Robust scale floor in intensity levels.
    pub scale_floor: f32,
}

impl Default for BgParams {
    fn default() -> Self {
        Self { dev_thresh: 4.0, sat_thresh: 0.25, min_blob: 25, scale_floor: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundModel {
    pub class: ClassLabel,
    /// `(H, W, 3)` median in 0..255.
    pub median: Array3<f32>,
    /// `(H, W, 3)` median absolute deviation times 1.4826.
    pub scale: Array3<f32>,
}

fn median_of(v: &mut [f32]) -> f32 {
    v.sort_unstable_by(f32::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-pixel, per-channel median and robust scale over one class.
pub fn fit_background(class: ClassLabel, images: &[RgbImage]) -> Result<BackgroundModel> {
    if images.len() < 3 {
        return Err(Error::Config(format!("background model for {class} needs at least 3 frames, got {}", images.len())));
    }
    let (w, h) = images[0].dimensions();
    if let Some(bad) = images.iter().find(|i| i.dimensions() != (w, h)) {
        let (bw, bh) = bad.dimensions();
        return Err(Error::Shape { what: "background frame", expected: (h as usize, w as usize), found: (bh as usize, bw as usize) });
    }
    let (h, w) = (h as usize, w as usize);
    let mut median = Array3::zeros((h, w, 3));
    let mut scale = Array3::zeros((h, w, 3));
    let mut column = vec![0.0f32; images.len()];
    let raws: Vec<&[u8]> = images.iter().map(|i| i.as_raw().as_slice()).collect();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let off = (y * w + x) * 3 + c;
                for (slot, raw) in column.iter_mut().zip(&raws) {
                    *slot = raw[off] as f32;
                }
                let m = median_of(&mut column);
                for slot in column.iter_mut() {
                    *slot = (*slot - m).abs();
                }
                median[[y, x, c]] = m;
                scale[[y, x, c]] = median_of(&mut column) * MAD_TO_SIGMA;
            }
        }
    }
    Ok(BackgroundModel { class, median, scale })
}

/// Raw per-pixel foreground test, before morphology.
pub fn raw_foreground(image: &RgbImage, model: &BackgroundModel, params: &BgParams) -> Result<Mask> {
    let (h, w, _) = model.median.dim();
    let (iw, ih) = image.dimensions();
    if (ih as usize, iw as usize) != (h, w) {
        return Err(Error::Shape { what: "image vs background model", expected: (h, w), found: (ih as usize, iw as usize) });
    }
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let p = image.get_pixel(x as u32, y as u32).0;
        let deviates = (0..3).any(|c| {
            let s = model.scale[[y, x, c]].max(params.scale_floor);
            (p[c] as f32 - model.median[[y, x, c]]).abs() > params.dev_thresh * s
        });
        deviates || saturation(p) > params.sat_thresh
    }))
}

/// `(max - min) / max` on `[0, 1]` channels; 0 when `max == 0`.
pub fn saturation(p: [u8; 3]) -> f32 {
    let mx = p.iter().copied().max().unwrap_or(0) as f32;
    let mn = p.iter().copied().min().unwrap_or(0) as f32;
    if mx == 0.0 {
        0.0
    } else {
        (mx - mn) / mx
    }
}

/// Foreground mask (`true` = object): deviation or saturation test, then a
/// 3x3 closing and removal of blobs under `min_blob` pixels.
pub fn foreground_mask(image: &RgbImage, model: &BackgroundModel, params: &BgParams) -> Result<Mask> {
    let raw = raw_foreground(image, model, params)?;
    Ok(remove_small_components(&close3(&raw), params.min_blob))
}

/// Keeps foreground pixels, replaces the rest with mid-gray.
pub fn masked_foreground(image: &RgbImage, fg: &Mask) -> RgbImage {
    RgbImage::from_fn(image.width(), image.height(), |x, y| {
        if fg[[y as usize, x as usize]] {
            *image.get_pixel(x, y)
        } else {
            Rgb([NEUTRAL_GRAY; 3])
        }
    })
}

/// Keeps background pixels, replaces the foreground with the class median.
pub fn background_only(image: &RgbImage, fg: &Mask, model: &BackgroundModel) -> RgbImage {
    RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let (yy, xx) = (y as usize, x as usize);
        if fg[[yy, xx]] {
            let m = |c| model.median[[yy, xx, c]].round().clamp(0.0, 255.0) as u8;
            Rgb([m(0), m(1), m(2)])
        } else {
            *image.get_pixel(x, y)
        }
    })
}

/// Seeded choice of `ceil(n / 2)` indices out of `n`, returned sorted.
pub fn select_half(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = idx[..n.div_ceil(2)].to_vec();
    chosen.sort_unstable();
    chosen
}

#[derive(Clone, Debug)]
pub struct ThreeClassItem {
    pub label: ClassLabel,
    pub source: FrameRecord,
    pub image: RgbImage,
}

/// Three-class set built in memory from already-decoded frames.
pub fn build_three_class_set(
    before: &[(FrameRecord, RgbImage)],
    after: &[(FrameRecord, RgbImage)],
    models: (&BackgroundModel, &BackgroundModel),
    params: &BgParams,
    seed: u64,
) -> Result<Vec<ThreeClassItem>> {
    let mut items = Vec::new();
    let mut backgrounds = Vec::new();
    for (frames, model) in [(before, models.0), (after, models.1)] {
        let chosen = select_half(frames.len(), derive_seed(seed, &format!("bg-half/{}", model.class)));
        for (i, (rec, img)) in frames.iter().enumerate() {
            let fg = foreground_mask(img, model, params)?;
            items.push(ThreeClassItem { label: rec.class, source: rec.clone(), image: masked_foreground(img, &fg) });
            if chosen.binary_search(&i).is_ok() {
                backgrounds.push(ThreeClassItem {
                    label: ClassLabel::Background,
                    source: rec.clone(),
                    image: background_only(img, &fg, model),
                });
            }
        }
    }
    items.extend(backgrounds);
    Ok(items)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BrSummary {
    pub before: usize,
    pub after: usize,
    pub background: usize,
}

/// Sibling output root `<root>-br`.
pub fn default_output_root(root: &Path) -> PathBuf {
    let mut s = root.as_os_str().to_os_string();
    s.push("-br");
    PathBuf::from(s)
}

/// Streams the training pool of one dataset into a three-class tree in the
/// canonical layout. Background-only frames keep their source sequence
/// structure under ids `<class>-<seq>`. Flow files are copied alongside.
pub fn write_three_class_tree(
    train_pool: &[FrameRecord],
    params: &BgParams,
    seed: u64,
    out: &Path,
) -> Result<BrSummary> {
    let mut summary = BrSummary::default();
    for class in [ClassLabel::Before, ClassLabel::After] {
        let records: Vec<&FrameRecord> = train_pool.iter().filter(|r| r.class == class).collect();
        let images: Vec<RgbImage> = records.iter().map(|r| read_rgb(&r.path)).collect::<Result<_>>()?;
        let model = fit_background(class, &images)?;
        let chosen = select_half(records.len(), derive_seed(seed, &format!("bg-half/{class}")));
        for (i, (rec, img)) in records.iter().zip(&images).enumerate() {
            let fg = foreground_mask(img, &model, params)?;
            let name = format!("{}.png", frame_stem(rec.frame_index));
            write_rgb(&sequence_dir(out, Partition::Train, class, &rec.sequence_id).join(&name), &masked_foreground(img, &fg))?;
            copy_flow(rec, out, class, &rec.sequence_id)?;
            match class {
                ClassLabel::Before => summary.before += 1,
                _ => summary.after += 1,
            }
            if chosen.binary_search(&i).is_ok() {
                let seq = format!("{class}-{}", rec.sequence_id);
                write_rgb(
                    &sequence_dir(out, Partition::Train, ClassLabel::Background, &seq).join(&name),
                    &background_only(img, &fg, &model),
                )?;
                copy_flow(rec, out, ClassLabel::Background, &seq)?;
                summary.background += 1;
            }
        }
    }
    let mut kv = KeyValues::new();
    kv.set("generator", "sortseg-bgremove")
        .set("params_hash", config_hash(params))
        .set("seed", seed)
        .set("frames.before", summary.before)
        .set("frames.after", summary.after)
        .set("frames.background", summary.background);
    kv.write(&out.join("manifest.txt"))?;
    Ok(summary)
}

fn copy_flow(rec: &FrameRecord, out: &Path, class: ClassLabel, seq: &str) -> Result<()> {
    if let Some(src) = &rec.flow {
        let dst = gt_flow_path(out, Partition::Train, class, seq, rec.frame_index);
        crate::formats::ensure_parent(&dst)?;
        std::fs::copy(src, &dst).at(&dst)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(w: u32, h: u32, v: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb(v))
    }

    fn rec(class: ClassLabel, i: u32) -> FrameRecord {
        FrameRecord {
            path: PathBuf::from(format!("{i}.png")),
            partition: Partition::Train,
            class,
            sequence_id: "s".into(),
            frame_index: i,
            gt_mask: None,
            gt_instances: None,
            flow: None,
        }
    }

    #[test]
    fn identical_frames_give_zero_scale() {
        let img = RgbImage::from_fn(5, 4, |x, y| Rgb([x as u8 * 10, y as u8 * 20, 77]));
        let m = fit_background(ClassLabel::Before, &vec![img.clone(); 4]).unwrap();
        assert!(m.scale.iter().all(|&s| s == 0.0));
        assert_eq!(m.median[[2, 3, 0]], 30.0);
        assert_eq!(m.median[[2, 3, 1]], 40.0);
    }

    #[test]
    fn median_of_three_values() {
        let imgs = [10u8, 200, 20].map(|v| flat(2, 2, [v, v, v]));
        let m = fit_background(ClassLabel::After, &imgs).unwrap();
        assert_eq!(m.median[[0, 0, 0]], 20.0);
        assert_eq!(m.scale[[0, 0, 0]], 10.0 * MAD_TO_SIGMA);
    }

    #[test]
    fn fit_rejects_few_or_mixed_frames() {
        assert!(fit_background(ClassLabel::Before, &[flat(2, 2, [0; 3]), flat(2, 2, [0; 3])]).is_err());
        assert!(fit_background(ClassLabel::Before, &[flat(2, 2, [0; 3]), flat(2, 2, [0; 3]), flat(3, 2, [0; 3])]).is_err());
    }

    #[test]
    fn median_image_is_background() {
        let img = flat(8, 8, [128, 128, 128]);
        let m = fit_background(ClassLabel::Before, &vec![img.clone(); 3]).unwrap();
        let fg = foreground_mask(&img, &m, &BgParams::default()).unwrap();
        assert!(fg.iter().all(|&v| !v));
        assert!(foreground_mask(&flat(4, 4, [0; 3]), &m, &BgParams::default()).is_err());
    }

    #[test]
    fn gray_image_uses_deviation_only() {
        let m = fit_background(ClassLabel::Before, &vec![flat(8, 8, [100; 3]); 3]).unwrap();
        assert_eq!(saturation([90, 90, 90]), 0.0);
        assert_eq!(saturation([0, 0, 0]), 0.0);
        // 7 levels off, below 4 x floor 2
        let near = flat(8, 8, [107; 3]);
        assert!(raw_foreground(&near, &m, &BgParams::default()).unwrap().iter().all(|&v| !v));
        let far = flat(8, 8, [109; 3]);
        assert!(raw_foreground(&far, &m, &BgParams::default()).unwrap().iter().all(|&v| v));
    }

    #[test]
    fn variants_partition_pixels() {
        let img = RgbImage::from_fn(6, 6, |x, y| Rgb([x as u8 * 40, y as u8 * 40, 5]));
        let m = BackgroundModel {
            class: ClassLabel::Before,
            median: Array3::from_elem((6, 6, 3), 128.0),
            scale: Array3::zeros((6, 6, 3)),
        };
        let fg = Array2::from_shape_fn((6, 6), |(y, x)| (x + y) % 2 == 0);
        let a = masked_foreground(&img, &fg);
        let b = background_only(&img, &fg, &m);
        for (x, y, p) in img.enumerate_pixels() {
            let orig_in_a = a.get_pixel(x, y) == p;
            let orig_in_b = b.get_pixel(x, y) == p;
            if fg[[y as usize, x as usize]] {
                assert!(orig_in_a && *b.get_pixel(x, y) == Rgb([128; 3]));
            } else {
                assert!(orig_in_b && *a.get_pixel(x, y) == Rgb([128; 3]));
            }
        }
        let empty = Array2::from_elem((6, 6), false);
        assert!(masked_foreground(&img, &empty).pixels().all(|p| *p == Rgb([128; 3])));
        assert_eq!(background_only(&img, &empty, &m), img);
    }

    #[test]
    fn three_class_counts() {
        let model = fit_background(ClassLabel::Before, &vec![flat(4, 4, [128; 3]); 3]).unwrap();
        let mk = |c| (0..10).map(|i| (rec(c, i), flat(4, 4, [128; 3]))).collect::<Vec<_>>();
        let items = build_three_class_set(&mk(ClassLabel::Before), &mk(ClassLabel::After), (&model, &model), &BgParams::default(), 5).unwrap();
        let n = |l| items.iter().filter(|i| i.label == l).count();
        assert_eq!((n(ClassLabel::Before), n(ClassLabel::After), n(ClassLabel::Background)), (10, 10, 10));
        assert_eq!(select_half(7, 3).len(), 4);
        assert_eq!(select_half(10, 3), select_half(10, 3));
        assert_ne!(select_half(40, 3), select_half(40, 4));
    }
}
