//! Dataset layout, ingestion, sequence-level splitting and batching.
//!
//! Canonical layout:
//!
//! ```text
//! <root>/{train,test}/{before,after[,background]}/<seq_id>/<frame_idx>.{png,jpg}
//! <root>/{train,test}/gt/<class>/<seq_id>/<frame_idx>_mask.png   (8-bit, 0/255)
//! <root>/{train,test}/gt/<class>/<seq_id>/<frame_idx>_inst.png   (16-bit labels, optional)
//! <root>/{train,test}/gt/<class>/<seq_id>/<frame_idx>_flow.bin   (BAFLOW01, optional)
//! ```
//!
//! Every test frame must carry a `_mask.png`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::formats::{read_rgb, KeyValues};
use crate::raster::{resize_rgb, to_tensor};
use crate::util::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Before,
    After,
    Background,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Before, ClassLabel::After, ClassLabel::Background];

    pub fn dir_name(self) -> &'static str {
        match self {
            ClassLabel::Before => "before",
            ClassLabel::After => "after",
            ClassLabel::Background => "background",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.dir_name() == s)
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// Top-level folder a frame lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Test,
}

impl Partition {
    pub fn dir_name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subset {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    Canonical,
    /// Flat per-class folders with `<seq>_<frame>.<ext>` names and test masks
    /// under `test/masks/<class>/<seq>_<frame>.png`.
    Zenodo,
}

pub fn frame_stem(index: u32) -> String {
    format!("{index:06}")
}

pub fn sequence_dir(root: &Path, part: Partition, class: ClassLabel, seq: &str) -> PathBuf {
    root.join(part.dir_name()).join(class.dir_name()).join(seq)
}

fn gt_base(root: &Path, part: Partition, class: ClassLabel, seq: &str, stem: &str) -> PathBuf {
    root.join(part.dir_name()).join("gt").join(class.dir_name()).join(seq).join(stem)
}

pub fn gt_mask_path(root: &Path, part: Partition, class: ClassLabel, seq: &str, index: u32) -> PathBuf {
    with_suffix(gt_base(root, part, class, seq, &frame_stem(index)), "_mask.png")
}

pub fn gt_instances_path(root: &Path, part: Partition, class: ClassLabel, seq: &str, index: u32) -> PathBuf {
    with_suffix(gt_base(root, part, class, seq, &frame_stem(index)), "_inst.png")
}

pub fn gt_flow_path(root: &Path, part: Partition, class: ClassLabel, seq: &str, index: u32) -> PathBuf {
    with_suffix(gt_base(root, part, class, seq, &frame_stem(index)), "_flow.bin")
}

fn with_suffix(base: PathBuf, suffix: &str) -> PathBuf {
    let mut s = base.into_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameRecord {
    pub path: PathBuf,
    pub partition: Partition,
    pub class: ClassLabel,
    pub sequence_id: String,
    pub frame_index: u32,
    pub gt_mask: Option<PathBuf>,
    pub gt_instances: Option<PathBuf>,
    pub flow: Option<PathBuf>,
}

impl FrameRecord {
    /// Path of this frame's counterpart in a stage output tree that mirrors
    /// the dataset (`<root>/<partition>/<class>/<seq>/<frame>.<ext>`).
    pub fn mirror_path(&self, root: &Path, ext: &str) -> PathBuf {
        sequence_dir(root, self.partition, self.class, &self.sequence_id)
            .join(format!("{}.{ext}", frame_stem(self.frame_index)))
    }

    pub fn key(&self) -> String {
        format!("{}/{}/{}/{}", self.partition.dir_name(), self.class, self.sequence_id, frame_stem(self.frame_index))
    }
}

#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<FrameRecord>,
    pub val: Vec<FrameRecord>,
    pub test: Vec<FrameRecord>,
}

impl DatasetSplit {
    pub fn subset(&self, s: Subset) -> &[FrameRecord] {
        match s {
            Subset::Train => &self.train,
            Subset::Val => &self.val,
            Subset::Test => &self.test,
        }
    }

    /// All unlabeled training frames (train and validation together).
    pub fn training_pool(&self) -> Vec<FrameRecord> {
        let mut all: Vec<FrameRecord> = self.train.iter().chain(&self.val).cloned().collect();
        sort_records(&mut all);
        all
    }

    pub fn classes(&self) -> BTreeSet<ClassLabel> {
        self.train.iter().chain(&self.val).map(|r| r.class).collect()
    }
}

pub fn of_class(records: &[FrameRecord], class: ClassLabel) -> Vec<FrameRecord> {
    records.iter().filter(|r| r.class == class).cloned().collect()
}

fn sort_records(records: &mut [FrameRecord]) {
    records.sort_by(|a, b| {
        (a.partition, a.class, &a.sequence_id, a.frame_index).cmp(&(b.partition, b.class, &b.sequence_id, b.frame_index))
    });
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetStats {
    pub frames: BTreeMap<(Subset, ClassLabel), usize>,
    pub sequences: BTreeMap<(Subset, ClassLabel), usize>,
    /// `(width, height)` of the first frame.
    pub resolution: Option<(u32, u32)>,
}

impl DatasetStats {
    pub fn compute(split: &DatasetSplit) -> Self {
        let mut stats = Self::default();
        for s in [Subset::Train, Subset::Val, Subset::Test] {
            let mut seqs: BTreeMap<ClassLabel, BTreeSet<&str>> = BTreeMap::new();
            for r in split.subset(s) {
                *stats.frames.entry((s, r.class)).or_default() += 1;
                seqs.entry(r.class).or_default().insert(&r.sequence_id);
            }
            for (c, set) in seqs {
                stats.sequences.insert((s, c), set.len());
            }
        }
        stats.resolution = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .next()
            .and_then(|r| image::image_dimensions(&r.path).ok());
        stats
    }

    pub fn frames_in(&self, subsets: &[Subset], class: ClassLabel) -> usize {
        subsets.iter().map(|s| self.frames.get(&(*s, class)).copied().unwrap_or(0)).sum()
    }

    pub fn sequences_in(&self, subsets: &[Subset], class: ClassLabel) -> usize {
        subsets.iter().map(|s| self.sequences.get(&(*s, class)).copied().unwrap_or(0)).sum()
    }

    pub fn total_frames(&self) -> usize {
        self.frames.values().sum()
    }

    pub fn to_key_values(&self) -> KeyValues {
        let name = |s: Subset| match s {
            Subset::Train => "train",
            Subset::Val => "val",
            Subset::Test => "test",
        };
        let mut kv = KeyValues::new();
        for ((s, c), n) in &self.frames {
            kv.set(format!("frames.{}.{}", name(*s), c), n);
        }
        for ((s, c), n) in &self.sequences {
            kv.set(format!("sequences.{}.{}", name(*s), c), n);
        }
        kv.set("frames.total", self.total_frames());
        if let Some((w, h)) = self.resolution {
            kv.set("resolution", format!("{w}x{h}"));
        }
        kv
    }
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub layout: Layout,
    pub val_ratio: f64,
    pub seed: u64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { layout: Layout::Canonical, val_ratio: 0.8, seed: 0 }
    }
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir).at(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>().at(dir)?;
    out.sort();
    Ok(out)
}

fn attach_gt(root: &Path, rec: &mut FrameRecord) {
    let (p, c, s, i) = (rec.partition, rec.class, rec.sequence_id.clone(), rec.frame_index);
    let exists = |q: PathBuf| q.exists().then_some(q);
    rec.gt_mask = exists(gt_mask_path(root, p, c, &s, i));
    rec.gt_instances = exists(gt_instances_path(root, p, c, &s, i));
    rec.flow = exists(gt_flow_path(root, p, c, &s, i));
}

fn scan_canonical(root: &Path, part: Partition) -> Result<Vec<FrameRecord>> {
    let part_dir = root.join(part.dir_name());
    let mut out = Vec::new();
    for class in ClassLabel::ALL {
        let class_dir = part_dir.join(class.dir_name());
        if !class_dir.is_dir() {
            if class != ClassLabel::Background {
                return Err(Error::Layout(format!("missing class folder {}", class_dir.display())));
            }
            continue;
        }
        for seq_dir in sorted_entries(&class_dir)? {
            if !seq_dir.is_dir() {
                continue;
            }
            let seq = seq_dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let mut last: Option<u32> = None;
            for file in sorted_entries(&seq_dir)?.into_iter().filter(|p| is_image(p)) {
                let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                let index: u32 = stem.parse().map_err(|_| {
                    Error::Layout(format!("frame name is not a frame index: {}", file.display()))
                })?;
                if last.is_some_and(|l| index <= l) {
                    return Err(Error::Layout(format!(
                        "non-monotonic frame indices in sequence {seq} at {}",
                        file.display()
                    )));
                }
                last = Some(index);
                let mut rec = FrameRecord {
                    path: file.clone(),
                    partition: part,
                    class,
                    sequence_id: seq.clone(),
                    frame_index: index,
                    gt_mask: None,
                    gt_instances: None,
                    flow: None,
                };
                attach_gt(root, &mut rec);
                out.push(rec);
            }
        }
    }
    Ok(out)
}

fn scan_zenodo(root: &Path, part: Partition) -> Result<Vec<FrameRecord>> {
    let part_dir = root.join(part.dir_name());
    let mut out = Vec::new();
    for class in [ClassLabel::Before, ClassLabel::After] {
        let class_dir = part_dir.join(class.dir_name());
        if !class_dir.is_dir() {
            return Err(Error::Layout(format!("missing class folder {}", class_dir.display())));
        }
        let mut by_seq: BTreeMap<String, Vec<(u32, PathBuf)>> = BTreeMap::new();
        for file in sorted_entries(&class_dir)?.into_iter().filter(|p| is_image(p)) {
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let (seq, idx) = stem
                .rsplit_once('_')
                .and_then(|(s, i)| i.parse::<u32>().ok().map(|i| (s.to_string(), i)))
                .ok_or_else(|| Error::Layout(format!("expected <seq>_<frame> name: {}", file.display())))?;
            by_seq.entry(seq).or_default().push((idx, file));
        }
        for (seq, mut frames) in by_seq {
            frames.sort();
            for w in frames.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::Layout(format!("duplicate frame index at {}", w[1].1.display())));
                }
            }
            for (idx, file) in frames {
                let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                let mask = part_dir.join("masks").join(class.dir_name()).join(format!("{stem}.png"));
                out.push(FrameRecord {
                    path: file,
                    partition: part,
                    class,
                    sequence_id: seq.clone(),
                    frame_index: idx,
                    gt_mask: mask.exists().then_some(mask),
                    gt_instances: None,
                    flow: None,
                });
            }
        }
    }
    Ok(out)
}

/// Scans a dataset root, validates it and splits its training partition by
/// sequence into train/validation.
pub fn ingest(root: &Path, options: &IngestOptions) -> Result<(DatasetSplit, DatasetStats)> {
    if !root.join("train").is_dir() {
        return Err(Error::Layout(format!("missing {}", root.join("train").display())));
    }
    let scan = match options.layout {
        Layout::Canonical => scan_canonical,
        Layout::Zenodo => scan_zenodo,
    };
    let train_pool = scan(root, Partition::Train)?;
    let test = if root.join("test").is_dir() { scan(root, Partition::Test)? } else { Vec::new() };
    if let Some(bad) = test.iter().find(|r| r.gt_mask.is_none()) {
        return Err(Error::MissingGroundTruth(bad.path.clone()));
    }
    let (train, val) = split_train_val(&train_pool, options.val_ratio, options.seed)?;
    let split = DatasetSplit { train, val, test };
    let stats = DatasetStats::compute(&split);
    Ok((split, stats))
}

/// Number of validation sequences for `n` sequences: floor of the held-out
/// share, at least one, and never all of them.
pub fn val_sequence_count(n: usize, ratio: f64) -> usize {
    let raw = (n as f64 * (1.0 - ratio) + 1e-9).floor() as usize;
    raw.max(1).min(n.saturating_sub(1))
}

/// Splits records into train/validation at sequence granularity, separately
/// per class. Deterministic in `seed`; record order is preserved.
pub fn split_train_val(records: &[FrameRecord], ratio: f64, seed: u64) -> Result<(Vec<FrameRecord>, Vec<FrameRecord>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("train ratio must lie in (0, 1), got {ratio}")));
    }
    let mut val_seqs: BTreeSet<(ClassLabel, String)> = BTreeSet::new();
    let classes: BTreeSet<ClassLabel> = records.iter().map(|r| r.class).collect();
    for class in classes {
        let seqs: BTreeSet<&str> = records.iter().filter(|r| r.class == class).map(|r| r.sequence_id.as_str()).collect();
        if seqs.len() < 2 {
            return Err(Error::Config(format!("class {class} has {} sequence(s); at least 2 are needed to split", seqs.len())));
        }
        let mut seqs: Vec<&str> = seqs.into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("split/{class}")));
        seqs.shuffle(&mut rng);
        for s in &seqs[..val_sequence_count(seqs.len(), ratio)] {
            val_seqs.insert((class, s.to_string()));
        }
    }
    let (val, train): (Vec<_>, Vec<_>) =
        records.iter().cloned().partition(|r| val_seqs.contains(&(r.class, r.sequence_id.clone())));
    Ok((train, val))
}

/// Photometric jitter factors; each is the half-width of a uniform range
/// around 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSpec {
    pub enabled: bool,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self { enabled: true, brightness: 0.2, contrast: 0.2, saturation: 0.2 }
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Brightness, contrast, then saturation jitter on a `(3, H, W)` image in
/// `[0, 1]`. A factor that draws exactly 1 leaves the image untouched.
pub fn color_jitter(img: &Array3<f32>, spec: &AugmentSpec, rng: &mut impl Rng) -> Array3<f32> {
    let mut draw = |f: f32| 1.0 + f * (2.0 * rng.random::<f32>() - 1.0);
    let (b, c, s) = (draw(spec.brightness), draw(spec.contrast), draw(spec.saturation));
    let mut out = img.clone();
    if b != 1.0 {
        out.mapv_inplace(|v| (v * b).clamp(0.0, 1.0));
    }
    let (_, h, w) = out.dim();
    if c != 1.0 {
        let mut mean = 0.0;
        for y in 0..h {
            for x in 0..w {
                mean += luma(out[[0, y, x]], out[[1, y, x]], out[[2, y, x]]);
            }
        }
        let mean = mean / (h * w) as f32;
        out.mapv_inplace(|v| ((v - mean) * c + mean).clamp(0.0, 1.0));
    }
    if s != 1.0 {
        for y in 0..h {
            for x in 0..w {
                let g = luma(out[[0, y, x]], out[[1, y, x]], out[[2, y, x]]);
                for ch in 0..3 {
                    out[[ch, y, x]] = ((out[[ch, y, x]] - g) * s + g).clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

pub fn load_image(path: &Path, resize_to: Option<usize>) -> Result<Array3<f32>> {
    let img = read_rgb(path)?;
    let img = match resize_to {
        Some(n) => resize_rgb(&img, n as u32, n as u32),
        None => img,
    };
    Ok(to_tensor(&img))
}

/// Images decoded into memory together with integer labels.
#[derive(Clone, Debug, Default)]
pub struct LabeledImages {
    pub images: Vec<Array3<f32>>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    /// Decodes every record; labels are positions in `class_order`.
    pub fn load(records: &[FrameRecord], class_order: &[ClassLabel], resize_to: Option<usize>) -> Result<Self> {
        let mut out = Self::default();
        for r in records {
            let label = class_order
                .iter()
                .position(|c| *c == r.class)
                .ok_or(Error::ClassMismatch { configured: class_order.len(), found: class_order.len() + 1 })?;
            out.images.push(load_image(&r.path, resize_to)?);
            out.labels.push(label);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batches(&self, batch_size: usize, augment: AugmentSpec, seed: u64, shuffle: bool) -> Result<BatchIterator<'_>> {
        BatchIterator::new(&self.images, &self.labels, batch_size, augment, seed, shuffle)
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Vec<Array3<f32>>,
    pub labels: Vec<usize>,
}

/// One epoch over in-memory images in a seed-determined order.
pub struct BatchIterator<'a> {
    images: &'a [Array3<f32>],
    labels: &'a [usize],
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    augment: AugmentSpec,
    rng: ChaCha8Rng,
}

impl<'a> BatchIterator<'a> {
    pub fn new(
        images: &'a [Array3<f32>],
        labels: &'a [usize],
        batch_size: usize,
        augment: AugmentSpec,
        seed: u64,
        shuffle: bool,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..images.len()).collect();
        if shuffle {
            order.shuffle(&mut rng);
        }
        Ok(Self { images, labels, order, cursor: 0, batch_size, augment, rng })
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let images = indices
            .iter()
            .map(|&i| {
                if self.augment.enabled {
                    color_jitter(&self.images[i], &self.augment, &mut self.rng)
                } else {
                    self.images[i].clone()
                }
            })
            .collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Some(Batch { indices, images, labels })
    }
}

/// Loads `records` and returns one epoch of batches over them.
pub fn batch_iterator(
    records: &[FrameRecord],
    class_order: &[ClassLabel],
    batch_size: usize,
    resize_to: Option<usize>,
    augment: AugmentSpec,
    seed: u64,
) -> Result<Vec<Batch>> {
    let data = LabeledImages::load(records, class_order, resize_to)?;
    Ok(data.batches(batch_size, augment, seed, true)?.collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(class: ClassLabel, seq: &str, idx: u32) -> FrameRecord {
        FrameRecord {
            path: PathBuf::from(format!("{class}/{seq}/{idx}.png")),
            partition: Partition::Train,
            class,
            sequence_id: seq.to_string(),
            frame_index: idx,
            gt_mask: None,
            gt_instances: None,
            flow: None,
        }
    }

    fn pool(n_seq: usize, frames: u32) -> Vec<FrameRecord> {
        let mut v = Vec::new();
        for c in [ClassLabel::Before, ClassLabel::After] {
            for s in 0..n_seq {
                for i in 0..frames {
                    v.push(rec(c, &format!("seq{s:04}"), i));
                }
            }
        }
        v
    }

    fn seqs(records: &[FrameRecord], class: ClassLabel) -> BTreeSet<String> {
        records.iter().filter(|r| r.class == class).map(|r| r.sequence_id.clone()).collect()
    }

    #[test]
    fn ten_sequences_split_eight_two() {
        let (tr, va) = split_train_val(&pool(10, 3), 0.8, 1).unwrap();
        assert_eq!(seqs(&tr, ClassLabel::Before).len(), 8);
        assert_eq!(seqs(&va, ClassLabel::Before).len(), 2);
        assert_eq!(seqs(&va, ClassLabel::After).len(), 2);
    }

    #[test]
    fn five_sequences_split_four_one() {
        let (tr, va) = split_train_val(&pool(5, 2), 0.8, 3).unwrap();
        assert_eq!(seqs(&tr, ClassLabel::Before).len(), 4);
        assert_eq!(seqs(&va, ClassLabel::Before).len(), 1);
    }

    #[test]
    fn split_is_seeded_and_sequence_atomic() {
        let p = pool(10, 4);
        assert_eq!(split_train_val(&p, 0.8, 9).unwrap(), split_train_val(&p, 0.8, 9).unwrap());
        let (tr, va) = split_train_val(&p, 0.8, 9).unwrap();
        for c in [ClassLabel::Before, ClassLabel::After] {
            assert!(seqs(&tr, c).is_disjoint(&seqs(&va, c)));
        }
        assert_eq!(tr.len() + va.len(), p.len());
    }

    #[test]
    fn split_rejects_single_sequence_and_bad_ratio() {
        assert!(split_train_val(&pool(1, 3), 0.8, 0).is_err());
        assert!(split_train_val(&pool(4, 3), 1.0, 0).is_err());
        assert!(split_train_val(&pool(4, 3), 0.0, 0).is_err());
    }

    #[test]
    fn hundred_frames_in_batches_of_32() {
        let images: Vec<Array3<f32>> = (0..100).map(|i| Array3::from_elem((3, 2, 2), i as f32 / 100.0)).collect();
        let labels = vec![0; 100];
        let sizes: Vec<usize> = BatchIterator::new(&images, &labels, 32, AugmentSpec::default(), 0, true)
            .unwrap()
            .map(|b| b.images.len())
            .collect();
        assert_eq!(sizes, vec![32, 32, 32, 4]);
        let mut seen: Vec<usize> = BatchIterator::new(&images, &labels, 32, AugmentSpec::default(), 0, true)
            .unwrap()
            .flat_map(|b| b.indices)
            .collect();
        seen.sort();
        assert_eq!(seen, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn jitter_determinism_and_identity() {
        let images: Vec<Array3<f32>> = (0..5)
            .map(|i| Array3::from_shape_fn((3, 4, 4), |(c, y, x)| ((i + c * 3 + y * 5 + x) % 11) as f32 / 11.0))
            .collect();
        let labels = vec![1; 5];
        let on = AugmentSpec::default();
        let off = AugmentSpec { enabled: false, ..on };
        let run = |spec| -> Vec<Array3<f32>> {
            BatchIterator::new(&images, &labels, 2, spec, 42, true).unwrap().flat_map(|b| b.images).collect()
        };
        assert_eq!(run(on), run(on));
        assert_ne!(run(on), run(off));
        let zero = AugmentSpec { enabled: true, brightness: 0.0, contrast: 0.0, saturation: 0.0 };
        assert_eq!(run(zero), run(off));
    }

    #[test]
    fn val_count_rounding() {
        assert_eq!(val_sequence_count(10, 0.8), 2);
        assert_eq!(val_sequence_count(5, 0.8), 1);
        assert_eq!(val_sequence_count(2, 0.8), 1);
        assert_eq!(val_sequence_count(3, 0.99), 1);
    }
}
