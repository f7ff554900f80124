//! Deterministic synthetic conveyor-belt scenes.
//!
//! Each sequence is rendered from one long belt strip of length
//! `image_size + belt_speed * (frames - 1)`. Frame `t` is the window starting
//! at column `(frames - 1 - t) * belt_speed`, so content moves `+x` by exactly
//! `belt_speed` pixels per frame and the ground-truth flow is exact.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{gt_flow_path, gt_instances_path, gt_mask_path, sequence_dir, frame_stem, ClassLabel, Partition};
use crate::error::{Error, IoContext, Result};
use crate::formats::{write_labels, write_mask, write_rgb, FlowField, KeyValues};
use crate::raster::Mask;
use crate::util::{config_hash, derive_seed};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraLighting {
    pub gain: f32,
    /// Added to all channels, in 0..255 units.
    pub luminance: f32,
    /// Per-channel additive offset.
    pub tint: [f32; 3],
}

impl Default for CameraLighting {
    fn default() -> Self {
        Self { gain: 1.0, luminance: 0.0, tint: [0.0; 3] }
    }
}

impl CameraLighting {
    fn apply(&self, v: f32, channel: usize) -> f32 {
        v * self.gain + self.luminance + self.tint[channel]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LightingBias {
    pub before: CameraLighting,
    pub after: CameraLighting,
}

impl Default for LightingBias {
    fn default() -> Self {
        Self {
            before: CameraLighting { gain: 1.0, luminance: 10.0, tint: [6.0, 0.0, -6.0] },
            after: CameraLighting { gain: 1.0, luminance: -10.0, tint: [-6.0, 0.0, 6.0] },
        }
    }
}

impl LightingBias {
    pub fn none() -> Self {
        Self { before: CameraLighting::default(), after: CameraLighting::default() }
    }

    fn for_camera(&self, camera: ClassLabel) -> CameraLighting {
        match camera {
            ClassLabel::After => self.after,
            _ => self.before,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub frames_per_sequence: usize,
    /// Training sequences per camera.
    pub num_sequences_before: usize,
    pub num_sequences_after: usize,
    /// Annotated test sequences per camera.
    pub test_sequences_before: usize,
    pub test_sequences_after: usize,
    /// Pixels per frame along `+x`.
    pub belt_speed: usize,
    /// Objects per image-width of belt, drawn uniformly from `[min, max]`.
    pub object_count_range: [usize; 2],
    pub object_radius_range: [f64; 2],
    pub unwanted_fraction: f64,
    pub lighting_bias: LightingBias,
    pub operator_miss_rate: f64,
    /// Blend weight of the belt showing through an object, in `[0, 1)`.
    pub translucency: f32,
    /// Wanted and unwanted objects share hues and differ only by shape.
    pub hard_mode: bool,
    pub belt_gray: f32,
    pub belt_noise: f32,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            frames_per_sequence: 20,
            num_sequences_before: 10,
            num_sequences_after: 10,
            test_sequences_before: 4,
            test_sequences_after: 4,
            belt_speed: 8,
            object_count_range: [3, 6],
            object_radius_range: [7.0, 13.0],
            unwanted_fraction: 0.5,
            lighting_bias: LightingBias::default(),
            operator_miss_rate: 0.05,
            translucency: 0.15,
            hard_mode: false,
            belt_gray: 128.0,
            belt_noise: 3.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 32 {
            return bad(format!("image_size must be at least 32, got {}", self.image_size));
        }
        if self.frames_per_sequence == 0 {
            return bad("frames_per_sequence must be positive".into());
        }
        if self.belt_speed >= self.image_size {
            return bad(format!("belt_speed {} must be below image_size {}", self.belt_speed, self.image_size));
        }
        for (name, v) in [("unwanted_fraction", self.unwanted_fraction), ("operator_miss_rate", self.operator_miss_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        let [cmin, cmax] = self.object_count_range;
        if cmin > cmax {
            return bad(format!("object_count_range [{cmin}, {cmax}] is inverted"));
        }
        let [rmin, rmax] = self.object_radius_range;
        if !(rmin >= 1.0 && rmin <= rmax) {
            return bad(format!("object_radius_range [{rmin}, {rmax}] is invalid"));
        }
        if 2.0 * rmax + 2.0 >= self.image_size as f64 {
            return bad(format!("object radius {rmax} does not fit a {}-pixel belt", self.image_size));
        }
        if !(0.0..1.0).contains(&self.translucency) {
            return bad(format!("translucency must lie in [0, 1), got {}", self.translucency));
        }
        Ok(())
    }

    pub fn strip_len(&self) -> usize {
        self.image_size + self.belt_speed * (self.frames_per_sequence - 1)
    }

    pub fn sequences(&self, part: Partition, camera: ClassLabel) -> usize {
        match (part, camera) {
            (Partition::Train, ClassLabel::Before) => self.num_sequences_before,
            (Partition::Train, ClassLabel::After) => self.num_sequences_after,
            (Partition::Test, ClassLabel::Before) => self.test_sequences_before,
            (Partition::Test, ClassLabel::After) => self.test_sequences_after,
            (_, ClassLabel::Background) => 0,
        }
    }

    /// Column of the belt strip shown at the left edge of frame `t`.
    pub fn window_origin(&self, t: usize) -> usize {
        (self.frames_per_sequence - 1 - t) * self.belt_speed
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    /// Convex polygon, vertices relative to the object centre in
    /// counter-clockwise order.
    Polygon(Vec<(f64, f64)>),
    Ellipse { a: f64, b: f64, angle: f64 },
}

impl Shape {
    fn contains(&self, dx: f64, dy: f64) -> bool {
        match self {
            Shape::Polygon(v) => (0..v.len()).all(|i| {
                let (x0, y0) = v[i];
                let (x1, y1) = v[(i + 1) % v.len()];
                (x1 - x0) * (dy - y0) - (y1 - y0) * (dx - x0) >= 0.0
            }),
            Shape::Ellipse { a, b, angle } => {
                let (s, c) = angle.sin_cos();
                let u = dx * c + dy * s;
                let w = -dx * s + dy * c;
                (u / a).powi(2) + (w / b).powi(2) <= 1.0
            }
        }
    }
}

/// One object on the belt strip.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedObject {
    /// Sequence-wide instance id, starting at 1.
    pub id: u16,
    pub unwanted: bool,
    /// Centre in strip coordinates.
    pub cx: f64,
    pub cy: f64,
    /// Bounding radius.
    pub radius: f64,
    pub shape: Shape,
    pub color: [f32; 3],
}

#[derive(Clone, Debug)]
pub struct SequencePlan {
    pub objects: Vec<PlacedObject>,
    /// Unwanted objects taken off the belt by the operator (after camera only).
    pub removed_unwanted: usize,
    pub strip_len: usize,
}

#[derive(Clone, Debug)]
pub struct SyntheticFrame {
    pub image: RgbImage,
    pub gt_unwanted_mask: Mask,
    /// Sequence-wide instance ids, 0 = belt.
    pub gt_instance_masks: Array2<u16>,
    pub gt_flow_to_next: Option<FlowField>,
    pub camera: ClassLabel,
    pub partition: Partition,
    pub sequence_id: String,
    pub frame_index: u32,
}

pub fn sequence_name(index: usize) -> String {
    format!("seq{index:04}")
}

fn sequence_rng(cfg: &SceneConfig, part: Partition, camera: ClassLabel, index: usize) -> ChaCha8Rng {
    let tag = format!("scene/{}/{}/{}", part.dir_name(), camera, index);
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &tag))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [((r + m) * 255.0) as f32, ((g + m) * 255.0) as f32, ((b + m) * 255.0) as f32]
}

fn random_shape(rng: &mut ChaCha8Rng, r: f64, polygon: bool) -> Shape {
    let angle = rng.random_range(0.0..PI);
    if polygon {
        let k = rng.random_range(3..=6usize);
        let minor = r * rng.random_range(0.65..1.0);
        let (s, c) = angle.sin_cos();
        let step = 2.0 * PI / k as f64;
        let verts = (0..k)
            .map(|i| {
                let t = i as f64 * step + rng.random_range(-0.3..0.3) * step;
                let (u, w) = (r * t.cos(), minor * t.sin());
                (u * c - w * s, u * s + w * c)
            })
            .collect();
        Shape::Polygon(verts)
    } else {
        Shape::Ellipse { a: r, b: r * rng.random_range(0.55..1.0), angle }
    }
}

/// Lays out the objects of one sequence. Pure function of the config and the
/// sequence coordinates.
pub fn plan_sequence(cfg: &SceneConfig, part: Partition, camera: ClassLabel, index: usize) -> SequencePlan {
    let mut rng = sequence_rng(cfg, part, camera, index);
    let strip_len = cfg.strip_len();
    let size = cfg.image_size as f64;
    let per_window = rng.random_range(cfg.object_count_range[0]..=cfg.object_count_range[1]);
    let target = (per_window as f64 * strip_len as f64 / size).round() as usize;
    let [rmin, rmax] = cfg.object_radius_range;
    let mut objects: Vec<PlacedObject> = Vec::new();
    let mut removed_unwanted = 0;
    let mut next_id = 1u16;
    for _ in 0..target {
        let unwanted = rng.random_bool(cfg.unwanted_fraction);
        let radius = if rmin < rmax { rng.random_range(rmin..=rmax) } else { rmin };
        let polygon = if cfg.hard_mode { unwanted } else { rng.random_bool(0.5) };
        let shape = random_shape(&mut rng, radius, polygon);
        let hue = if cfg.hard_mode {
            rng.random_range(0.0..360.0)
        } else if unwanted {
            rng.random_range(-25.0..55.0)
        } else {
            rng.random_range(170.0..250.0)
        };
        let color = hsv_to_rgb(hue, rng.random_range(0.55..0.9), rng.random_range(0.55..0.9));
        let mut spot = None;
        for _ in 0..100 {
            let cx = rng.random_range(0.0..strip_len as f64);
            let cy = rng.random_range(radius + 1.0..size - radius - 1.0);
            let free = objects.iter().all(|o| {
                let d = ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt();
                d > o.radius + radius + 2.0
            });
            if free {
                spot = Some((cx, cy));
                break;
            }
        }
        // the operator decision is drawn even for unplaced objects to keep
        // the stream layout independent of placement success
        let survives = rng.random_bool(cfg.operator_miss_rate);
        let Some((cx, cy)) = spot else { continue };
        if camera == ClassLabel::After && unwanted && !survives {
            removed_unwanted += 1;
            continue;
        }
        objects.push(PlacedObject { id: next_id, unwanted, cx, cy, radius, shape, color });
        next_id += 1;
    }
    SequencePlan { objects, removed_unwanted, strip_len }
}

struct Strip {
    rgb: Array3<f32>,
    ids: Array2<u16>,
}

fn render_strip(cfg: &SceneConfig, plan: &SequencePlan, rng: &mut ChaCha8Rng) -> Strip {
    let (h, l) = (cfg.image_size, plan.strip_len);
    let noise = Normal::new(0.0f32, cfg.belt_noise.max(0.0)).expect("finite sigma");
    let mut rgb = Array3::<f32>::zeros((h, l, 3));
    for y in 0..h {
        for x in 0..l {
            let g = cfg.belt_gray + noise.sample(rng);
            for c in 0..3 {
                rgb[[y, x, c]] = g;
            }
        }
    }
    let mut ids = Array2::<u16>::zeros((h, l));
    let t = cfg.translucency;
    for o in &plan.objects {
        let y0 = (o.cy - o.radius - 1.0).floor().max(0.0) as usize;
        let y1 = ((o.cy + o.radius + 1.0).ceil() as usize).min(h);
        let x0 = (o.cx - o.radius - 1.0).floor().max(0.0) as usize;
        let x1 = ((o.cx + o.radius + 1.0).ceil() as usize).min(l);
        for y in y0..y1 {
            for x in x0..x1 {
                if o.shape.contains(x as f64 + 0.5 - o.cx, y as f64 + 0.5 - o.cy) {
                    ids[[y, x]] = o.id;
                    for c in 0..3 {
                        rgb[[y, x, c]] = (1.0 - t) * o.color[c] + t * rgb[[y, x, c]];
                    }
                }
            }
        }
    }
    Strip { rgb, ids }
}

/// Renders every frame of one sequence with its ground truth.
pub fn render_sequence(cfg: &SceneConfig, part: Partition, camera: ClassLabel, index: usize) -> Vec<SyntheticFrame> {
    let plan = plan_sequence(cfg, part, camera, index);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        &format!("belt/{}/{}/{}", part.dir_name(), camera, index),
    ));
    let strip = render_strip(cfg, &plan, &mut rng);
    let unwanted: Vec<bool> = {
        let mut v = vec![false; plan.objects.len() + 1];
        for o in &plan.objects {
            v[o.id as usize] = o.unwanted;
        }
        v
    };
    let light = cfg.lighting_bias.for_camera(camera);
    let s = cfg.image_size;
    let seq = sequence_name(index);
    (0..cfg.frames_per_sequence)
        .map(|t| {
            let o = cfg.window_origin(t);
            let image = RgbImage::from_fn(s as u32, s as u32, |x, y| {
                let px = |c| light.apply(strip.rgb[[y as usize, x as usize + o, c]], c).round().clamp(0.0, 255.0) as u8;
                Rgb([px(0), px(1), px(2)])
            });
            let inst = Array2::from_shape_fn((s, s), |(y, x)| strip.ids[[y, x + o]]);
            let mask = inst.mapv(|id| unwanted[id as usize]);
            let flow = (t + 1 < cfg.frames_per_sequence).then(|| FlowField::uniform(s, s, cfg.belt_speed as f32, 0.0));
            SyntheticFrame {
                image,
                gt_unwanted_mask: mask,
                gt_instance_masks: inst,
                gt_flow_to_next: flow,
                camera,
                partition: part,
                sequence_id: seq.clone(),
                frame_index: t as u32,
            }
        })
        .collect()
}

/// Instance map of a generated frame with ids renumbered to `1..=n` in
/// increasing order of their sequence-wide id.
pub fn oracle_instances(frame: &SyntheticFrame) -> Array2<u16> {
    relabel_contiguous(&frame.gt_instance_masks)
}

pub fn relabel_contiguous(labels: &Array2<u16>) -> Array2<u16> {
    let mut present: Vec<u16> = labels.iter().copied().filter(|&v| v != 0).collect();
    present.sort_unstable();
    present.dedup();
    labels.mapv(|v| if v == 0 { 0 } else { present.binary_search(&v).expect("collected") as u16 + 1 })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SceneSummary {
    pub frames: usize,
    pub sequences: usize,
    pub unwanted_after_survived: usize,
    pub unwanted_after_removed: usize,
}

/// Writes one frame and its ground truth into the canonical layout.
pub fn write_frame(root: &Path, frame: &SyntheticFrame) -> Result<()> {
    let (p, c, s, i) = (frame.partition, frame.camera, frame.sequence_id.as_str(), frame.frame_index);
    write_rgb(&sequence_dir(root, p, c, s).join(format!("{}.png", frame_stem(i))), &frame.image)?;
    write_mask(&gt_mask_path(root, p, c, s, i), &frame.gt_unwanted_mask)?;
    write_labels(&gt_instances_path(root, p, c, s, i), &frame.gt_instance_masks)?;
    if let Some(flow) = &frame.gt_flow_to_next {
        flow.write(&gt_flow_path(root, p, c, s, i))?;
    }
    Ok(())
}

/// Generates the full synthetic dataset under `root`: training and test
/// sequences for both cameras, ground truth for every frame, and a manifest.
pub fn generate_scene(cfg: &SceneConfig, root: &Path) -> Result<SceneSummary> {
    cfg.validate()?;
    fs::create_dir_all(root).at(root)?;
    let mut summary = SceneSummary::default();
    for part in [Partition::Train, Partition::Test] {
        for camera in [ClassLabel::Before, ClassLabel::After] {
            for index in 0..cfg.sequences(part, camera) {
                if camera == ClassLabel::After {
                    let plan = plan_sequence(cfg, part, camera, index);
                    summary.unwanted_after_removed += plan.removed_unwanted;
                    summary.unwanted_after_survived += plan.objects.iter().filter(|o| o.unwanted).count();
                }
                for frame in render_sequence(cfg, part, camera, index) {
                    write_frame(root, &frame)?;
                    summary.frames += 1;
                }
                summary.sequences += 1;
            }
        }
    }
    let mut kv = KeyValues::new();
    kv.set("generator", "sortseg-scenegen")
        .set("config_hash", config_hash(cfg))
        .set("config", serde_json::to_string(cfg).expect("config serializes"))
        .set("frames", summary.frames)
        .set("sequences", summary.sequences)
        .set("image_size", cfg.image_size)
        .set("belt_speed", cfg.belt_speed);
    kv.write(&root.join("manifest.txt"))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::read_labels;

    fn small() -> SceneConfig {
        SceneConfig {
            image_size: 48,
            frames_per_sequence: 4,
            num_sequences_before: 2,
            num_sequences_after: 2,
            test_sequences_before: 1,
            test_sequences_after: 1,
            object_radius_range: [4.0, 7.0],
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_degenerate_configs() {
        let mut c = small();
        c.frames_per_sequence = 0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.image_size = 16;
        assert!(c.validate().is_err());
        let mut c = small();
        c.belt_speed = c.image_size;
        assert!(c.validate().is_err());
        let mut c = small();
        c.operator_miss_rate = 1.5;
        assert!(c.validate().is_err());
        assert!(small().validate().is_ok());
    }

    #[test]
    fn frames_translate_rigidly_with_flow() {
        let cfg = SceneConfig { seed: 3, ..Default::default() };
        let frames = render_sequence(&cfg, Partition::Train, ClassLabel::Before, 0);
        let v = cfg.belt_speed;
        let s = cfg.image_size;
        for pair in frames.windows(2) {
            let flow = pair[0].gt_flow_to_next.as_ref().unwrap();
            assert!(flow.0.iter().enumerate().all(|(i, &f)| f == if i % 2 == 0 { v as f32 } else { 0.0 }));
            for y in 0..s {
                for x in 0..s - v {
                    assert_eq!(pair[0].gt_instance_masks[[y, x]], pair[1].gt_instance_masks[[y, x + v]]);
                    assert_eq!(pair[0].image.get_pixel(x as u32, y as u32), pair[1].image.get_pixel((x + v) as u32, y as u32));
                }
            }
        }
        assert!(frames.last().unwrap().gt_flow_to_next.is_none());
    }

    #[test]
    fn unwanted_mask_inside_instances() {
        let cfg = small();
        for f in render_sequence(&cfg, Partition::Test, ClassLabel::Before, 0) {
            assert!(f.gt_unwanted_mask.iter().zip(&f.gt_instance_masks).all(|(&m, &i)| !m || i != 0));
        }
    }

    #[test]
    fn zero_unwanted_fraction_gives_empty_masks() {
        let cfg = SceneConfig { unwanted_fraction: 0.0, ..small() };
        for camera in [ClassLabel::Before, ClassLabel::After] {
            for f in render_sequence(&cfg, Partition::Train, camera, 1) {
                assert!(f.gt_unwanted_mask.iter().all(|&m| !m));
            }
        }
    }

    #[test]
    fn oracle_labels_are_contiguous() {
        let cfg = SceneConfig { seed: 11, ..Default::default() };
        let f = &render_sequence(&cfg, Partition::Train, ClassLabel::Before, 2)[5];
        let o = oracle_instances(f);
        let mut ids: Vec<u16> = o.iter().copied().filter(|&v| v != 0).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids, (1..=ids.len() as u16).collect::<Vec<_>>());
        assert!(!ids.is_empty());
        assert_eq!(o.mapv(|v| v != 0), f.gt_instance_masks.mapv(|v| v != 0));
        assert!(relabel_contiguous(&Array2::zeros((3, 3))).iter().all(|&v| v == 0));
    }

    #[test]
    fn generation_is_byte_identical_and_complete() {
        let cfg = small();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = generate_scene(&cfg, a.path()).unwrap();
        generate_scene(&cfg, b.path()).unwrap();
        assert_eq!(sa.frames, 6 * 4);
        let mut files = Vec::new();
        let mut stack = vec![a.path().to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push(p);
                }
            }
        }
        assert!(files.len() > sa.frames * 2);
        for f in files {
            let rel = f.strip_prefix(a.path()).unwrap();
            assert_eq!(fs::read(&f).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{}", rel.display());
        }
        let inst = read_labels(&gt_instances_path(a.path(), Partition::Train, ClassLabel::Before, "seq0000", 0)).unwrap();
        assert_eq!(inst.dim(), (48, 48));
    }
}
