//! Three-stage mIoU protocol over before/after test splits, reports,
//! qualitative panels and method comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataio::{ClassLabel, FrameRecord};
use crate::error::{Error, IoContext, Result};
use crate::formats::{ensure_parent, read_mask, read_rgb, read_unit_map, write_rgb};
use crate::raster::{resize_mask_nearest, Mask};
use crate::saliency::map_path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    /// Intersections and unions summed over all frames.
    #[default]
    DatasetLevel,
    /// Mean of per-frame IoU; empty/empty scores 1.
    PerImage,
}

impl IouMode {
    pub fn name(self) -> &'static str {
        match self {
            IouMode::DatasetLevel => "dataset",
            IouMode::PerImage => "per_image",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dataset" | "dataset_level" => Ok(IouMode::DatasetLevel),
            "per_image" | "image" => Ok(IouMode::PerImage),
            other => Err(Error::Config(format!("unknown IoU mode `{other}`"))),
        }
    }
}

/// `(|pred ∩ gt|, |pred ∪ gt|)` for the unwanted class.
pub type PixelCounter = fn(&Mask, &Mask) -> (u64, u64);

pub fn pixel_counts(pred: &Mask, gt: &Mask) -> (u64, u64) {
    let mut inter = 0;
    let mut union = 0;
    for (&p, &g) in pred.iter().zip(gt) {
        inter += u64::from(p && g);
        union += u64::from(p || g);
    }
    (inter, union)
}

/// Commutative accumulator of frame scores.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IouAccumulator {
    pub intersection: u64,
    pub union: u64,
    pub frame_scores: Vec<f64>,
}

impl IouAccumulator {
    pub fn add(&mut self, pred: &Mask, gt: &Mask) -> Result<()> {
        self.add_with(pred, gt, pixel_counts)
    }

    pub fn add_with(&mut self, pred: &Mask, gt: &Mask, counter: PixelCounter) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape { what: "prediction vs ground truth", expected: gt.dim(), found: pred.dim() });
        }
        let (i, u) = counter(pred, gt);
        self.intersection += i;
        self.union += u;
        self.frame_scores.push(if u == 0 { 1.0 } else { i as f64 / u as f64 });
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.frame_scores.len()
    }

    /// Percentage in `[0, 100]`. A dataset-level union of zero scores 100.
    pub fn miou(&self, mode: IouMode) -> f64 {
        let v = match mode {
            IouMode::DatasetLevel if self.union == 0 => 1.0,
            IouMode::DatasetLevel => self.intersection as f64 / self.union as f64,
            IouMode::PerImage if self.frame_scores.is_empty() => 1.0,
            IouMode::PerImage => self.frame_scores.iter().sum::<f64>() / self.frame_scores.len() as f64,
        };
        100.0 * v
    }
}

pub fn iou_accumulate(preds: &[Mask], gts: &[Mask], mode: IouMode) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Config(format!("{} predictions for {} ground-truth masks", preds.len(), gts.len())));
    }
    let mut acc = IouAccumulator::default();
    for (p, g) in preds.iter().zip(gts) {
        acc.add(p, g)?;
    }
    Ok(acc.miou(mode))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    C,
    R,
    S,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::C, Stage::R, Stage::S];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "c" | "coarse" => Ok(Stage::C),
            "r" | "refined" => Ok(Stage::R),
            "s" | "segmenter" => Ok(Stage::S),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::C => "C",
            Stage::R => "R",
            Stage::S => "S",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    TestBefore,
    TestAfter,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::TestBefore, Split::TestAfter];

    pub fn class(self) -> ClassLabel {
        match self {
            Split::TestBefore => ClassLabel::Before,
            Split::TestAfter => ClassLabel::After,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "before" | "Ts^B" | "b" => Ok(Split::TestBefore),
            "after" | "Ts^A" | "a" => Ok(Split::TestAfter),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::TestBefore => "Ts^B",
            Split::TestAfter => "Ts^A",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub stage: Stage,
    pub split: Split,
    /// `None` when the stage tree was absent.
    pub miou: Option<f64>,
    pub intersection: u64,
    pub union: u64,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub mode: IouMode,
    pub cells: Vec<Cell>,
    /// Stage name to configuration hash.
    pub config_hashes: BTreeMap<String, String>,
    pub elapsed_secs: f64,
}

impl EvalReport {
    pub fn cell(&self, stage: Stage, split: Split) -> Option<&Cell> {
        self.cells.iter().find(|c| c.stage == stage && c.split == split)
    }

    pub fn miou(&self, stage: Stage, split: Split) -> Option<f64> {
        self.cell(stage, split).and_then(|c| c.miou)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,mode,stage,split,miou,intersection,union,frames\n");
        for c in &self.cells {
            let v = c.miou.map(|v| format!("{v:.4}")).unwrap_or_else(|| "absent".into());
            s += &format!("{},{},{},{},{v},{},{},{}\n", self.method, self.mode.name(), c.stage, c.split, c.intersection, c.union, c.frames);
        }
        s
    }

    /// Aligned text table: one row per stage, one column per split.
    pub fn to_table(&self) -> String {
        let mut s = format!("method: {}  mode: {}\n", self.method, self.mode.name());
        s += &format!("{:<8}{:>10}{:>10}\n", "stage", Split::TestBefore.to_string(), Split::TestAfter.to_string());
        for stage in Stage::ALL {
            if !self.cells.iter().any(|c| c.stage == stage) {
                continue;
            }
            s += &format!("{:<8}", format!("{stage}(Ts)"));
            for split in Split::ALL {
                let v = self.miou(stage, split).map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
                s += &format!("{v:>10}");
            }
            s.push('\n');
        }
        for (k, v) in &self.config_hashes {
            s += &format!("hash {k} {v}\n");
        }
        s
    }

    /// Writes `report.csv`, `report.txt` and `report.json`; elapsed time
    /// goes only into the JSON file.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv()).at(&csv)?;
        let txt = dir.join("report.txt");
        fs::write(&txt, self.to_table()).at(&txt)?;
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_string_pretty(self).expect("serializable")).at(&json)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join("report.json");
        let text = fs::read_to_string(&p).at(&p)?;
        serde_json::from_str(&text).map_err(|e| Error::Format { path: p, reason: e.to_string() })
    }
}

/// Mask trees per stage; `None` or a missing directory marks the stage absent.
#[derive(Clone, Debug, Default)]
pub struct StageTrees {
    pub coarse: Option<PathBuf>,
    pub refined: Option<PathBuf>,
    pub segmented: Option<PathBuf>,
    /// Saliency maps for panels (`maps/` under this root).
    pub saliency: Option<PathBuf>,
}

impl StageTrees {
    pub fn get(&self, stage: Stage) -> Option<&Path> {
        match stage {
            Stage::C => self.coarse.as_deref(),
            Stage::R => self.refined.as_deref(),
            Stage::S => self.segmented.as_deref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub mode: IouMode,
    pub stages: Vec<Stage>,
    pub splits: Vec<Split>,
    /// Frames per split rendered as qualitative panels.
    pub panels: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { mode: IouMode::DatasetLevel, stages: Stage::ALL.to_vec(), splits: Split::ALL.to_vec(), panels: 4 }
    }
}

fn gt_of(rec: &FrameRecord) -> Result<Mask> {
    let p = rec.gt_mask.as_ref().ok_or_else(|| Error::MissingGroundTruth(rec.path.clone()))?;
    read_mask(p)
}

/// Scores every present stage tree on the test records. Prediction masks of a
/// different size from the ground truth are resized (nearest).
pub fn run_protocol(
    method: &str,
    test: &[FrameRecord],
    trees: &StageTrees,
    opts: &EvalOptions,
    config_hashes: BTreeMap<String, String>,
    counter: PixelCounter,
) -> Result<EvalReport> {
    let start = std::time::Instant::now();
    let mut cells = Vec::new();
    for &stage in &opts.stages {
        let root = trees.get(stage).filter(|p| p.is_dir());
        for &split in &opts.splits {
            let records: Vec<&FrameRecord> = test.iter().filter(|r| r.class == split.class()).collect();
            let Some(root) = root else {
                log::warn!("stage {stage} has no mask tree; cell {stage}({split}) is absent");
                cells.push(Cell { stage, split, miou: None, intersection: 0, union: 0, frames: 0 });
                continue;
            };
            let mut acc = IouAccumulator::default();
            for rec in &records {
                let gt = gt_of(rec)?;
                let mp = rec.mirror_path(root, "png");
                if !mp.exists() {
                    return Err(Error::MissingMask(mp));
                }
                let mut pred = read_mask(&mp)?;
                if pred.dim() != gt.dim() {
                    pred = resize_mask_nearest(&pred, gt.dim().0, gt.dim().1);
                }
                acc.add_with(&pred, &gt, counter)?;
            }
            let miou = if records.is_empty() { None } else { Some(acc.miou(opts.mode)) };
            cells.push(Cell { stage, split, miou, intersection: acc.intersection, union: acc.union, frames: acc.frames() });
        }
    }
    Ok(EvalReport {
        method: method.to_string(),
        mode: opts.mode,
        cells,
        config_hashes,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

fn mask_tile(mask: &Mask, color: [u8; 3]) -> RgbImage {
    let (h, w) = mask.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| if mask[[y as usize, x as usize]] { Rgb(color) } else { Rgb([0, 0, 0]) })
}

/// Writes `image | saliency | C | R | S | gt` strips for the first `opts.panels`
/// frames of each split. Absent pieces are drawn as mid-gray tiles.
pub fn write_panels(test: &[FrameRecord], trees: &StageTrees, opts: &EvalOptions, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for &split in &opts.splits {
        for rec in test.iter().filter(|r| r.class == split.class()).take(opts.panels) {
            let img = read_rgb(&rec.path)?;
            let (w, h) = img.dimensions();
            let blank = RgbImage::from_pixel(w, h, Rgb([128, 128, 128]));
            let fit = |t: RgbImage| if t.dimensions() == (w, h) { t } else { imageops::resize(&t, w, h, imageops::FilterType::Nearest) };
            let mut tiles = vec![img.clone()];
            let sal = trees.saliency.as_ref().map(|r| map_path(r, rec)).filter(|p| p.exists());
            tiles.push(match sal {
                Some(p) => {
                    let m = read_unit_map(&p)?;
                    let (mh, mw) = m.dim();
                    fit(RgbImage::from_fn(mw as u32, mh as u32, |x, y| {
                        let v = (m[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0) as u8;
                        Rgb([v, v / 2, 255 - v])
                    }))
                }
                None => blank.clone(),
            });
            for stage in Stage::ALL {
                let p = trees.get(stage).map(|r| rec.mirror_path(r, "png")).filter(|p| p.exists());
                tiles.push(match p {
                    Some(p) => fit(mask_tile(&read_mask(&p)?, [255, 80, 40])),
                    None => blank.clone(),
                });
            }
            tiles.push(match &rec.gt_mask {
                Some(p) => fit(mask_tile(&read_mask(p)?, [40, 220, 80])),
                None => blank.clone(),
            });
            let mut panel = RgbImage::new(w * tiles.len() as u32, h);
            for (i, t) in tiles.iter().enumerate() {
                imageops::replace(&mut panel, t, (i as u32 * w) as i64, 0);
            }
            let out = out_dir.join("panels").join(format!("{}.png", rec.key().replace('/', "_")));
            ensure_parent(&out)?;
            write_rgb(&out, &panel)?;
            written.push(out);
        }
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingRow {
    pub method: String,
    pub score: f64,
    /// Difference to the best method on the ranking cell.
    pub delta: f64,
    /// Per shared cell, difference to the best method.
    pub cell_deltas: Vec<(Stage, Split, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub key: (Stage, Split),
    pub shared: Vec<(Stage, Split)>,
    pub rows: Vec<RankingRow>,
}

impl Ranking {
    pub fn to_table(&self) -> String {
        let mut s = format!("ranked by {}({})\n{:<20}{:>10}{:>10}", self.key.0, self.key.1, "method", "mIoU", "delta");
        for (st, sp) in &self.shared {
            s += &format!("{:>12}", format!("d{st}({sp})"));
        }
        s.push('\n');
        for r in &self.rows {
            s += &format!("{:<20}{:>10.2}{:>10.2}", r.method, r.score, r.delta);
            for (_, _, d) in &r.cell_deltas {
                s += &format!("{d:>12.2}");
            }
            s.push('\n');
        }
        s
    }
}

/// Ranks methods on the preferred shared cell: R(Ts^B), then C(Ts^B), then
/// the first cell present in every report.
pub fn compare_methods(reports: &[EvalReport]) -> Result<Ranking> {
    if reports.len() < 2 {
        return Err(Error::Config("comparison needs at least two reports".into()));
    }
    let mut shared = Vec::new();
    for stage in Stage::ALL {
        for split in Split::ALL {
            if reports.iter().all(|r| r.miou(stage, split).is_some()) {
                shared.push((stage, split));
            }
        }
    }
    let preferred = [(Stage::R, Split::TestBefore), (Stage::C, Split::TestBefore)];
    let key = preferred
        .iter()
        .copied()
        .find(|k| shared.contains(k))
        .or_else(|| shared.first().copied())
        .ok_or_else(|| Error::Config("reports share no evaluated cell".into()))?;
    let best_of = |k: (Stage, Split)| reports.iter().filter_map(|r| r.miou(k.0, k.1)).fold(f64::NEG_INFINITY, f64::max);
    let mut rows: Vec<RankingRow> = reports
        .iter()
        .map(|r| {
            let score = r.miou(key.0, key.1).expect("shared");
            RankingRow {
                method: r.method.clone(),
                score,
                delta: score - best_of(key),
                cell_deltas: shared.iter().map(|&(st, sp)| (st, sp, r.miou(st, sp).expect("shared") - best_of((st, sp)))).collect(),
            }
        })
        .collect();
    rows.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.method.cmp(&b.method)));
    Ok(Ranking { key, shared, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn m(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Mask {
        Array2::from_shape_fn((h, w), |(y, x)| f(y, x))
    }

    #[test]
    fn analytic_values() {
        let full = m(4, 4, |_, _| true);
        let left = m(4, 4, |_, x| x < 2);
        let right = m(4, 4, |_, x| x >= 2);
        assert_eq!(iou_accumulate(&[full.clone()], &[full.clone()], IouMode::DatasetLevel).unwrap(), 100.0);
        assert_eq!(iou_accumulate(&[left.clone()], &[right], IouMode::DatasetLevel).unwrap(), 0.0);
        assert_eq!(iou_accumulate(&[left], &[full], IouMode::DatasetLevel).unwrap(), 50.0);
    }

    #[test]
    fn empty_frames_in_per_image_mode() {
        let empty = m(3, 3, |_, _| false);
        let some = m(3, 3, |y, _| y == 0);
        assert_eq!(iou_accumulate(&[empty.clone()], &[empty.clone()], IouMode::PerImage).unwrap(), 100.0);
        assert_eq!(iou_accumulate(&[some], &[empty], IouMode::PerImage).unwrap(), 0.0);
    }

    #[test]
    fn mismatches_are_errors() {
        let a = m(3, 3, |_, _| true);
        let b = m(3, 4, |_, _| true);
        assert!(iou_accumulate(&[a.clone()], &[b], IouMode::DatasetLevel).is_err());
        assert!(iou_accumulate(&[a.clone(), a.clone()], &[a], IouMode::DatasetLevel).is_err());
    }

    fn report(method: &str, cells: &[(Stage, Split, f64)]) -> EvalReport {
        EvalReport {
            method: method.into(),
            mode: IouMode::DatasetLevel,
            cells: cells.iter().map(|&(stage, split, v)| Cell { stage, split, miou: Some(v), intersection: 0, union: 0, frames: 1 }).collect(),
            config_hashes: BTreeMap::new(),
            elapsed_secs: 0.0,
        }
    }

    #[test]
    fn identical_reports_have_zero_deltas() {
        let r = report("a", &[(Stage::C, Split::TestBefore, 40.0), (Stage::R, Split::TestBefore, 45.0)]);
        let mut r2 = r.clone();
        r2.method = "b".into();
        let k = compare_methods(&[r, r2]).unwrap();
        assert_eq!(k.key, (Stage::R, Split::TestBefore));
        assert!(k.rows.iter().all(|row| row.delta == 0.0 && row.cell_deltas.iter().all(|d| d.2 == 0.0)));
    }

    #[test]
    fn ranking_uses_shared_cells_only() {
        let a = report("a", &[(Stage::C, Split::TestBefore, 30.0)]);
        let b = report("b", &[(Stage::C, Split::TestBefore, 35.0), (Stage::R, Split::TestBefore, 99.0)]);
        let k = compare_methods(&[a, b]).unwrap();
        assert_eq!(k.key, (Stage::C, Split::TestBefore));
        assert_eq!(k.shared, vec![(Stage::C, Split::TestBefore)]);
        assert_eq!(k.rows[0].method, "b");
        assert_eq!(k.rows[1].delta, -5.0);
        let c = report("c", &[(Stage::S, Split::TestAfter, 1.0)]);
        assert!(compare_methods(&[report("a", &[(Stage::C, Split::TestBefore, 3.0)]), c]).is_err());
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in proptest::collection::vec(any::<bool>(), 30), b in proptest::collection::vec(any::<bool>(), 30)) {
            let a = Array2::from_shape_vec((5, 6), a).unwrap();
            let b = Array2::from_shape_vec((5, 6), b).unwrap();
            for mode in [IouMode::DatasetLevel, IouMode::PerImage] {
                let x = iou_accumulate(&[a.clone()], &[b.clone()], mode).unwrap();
                let y = iou_accumulate(&[b.clone()], &[a.clone()], mode).unwrap();
                prop_assert_eq!(x, y);
                prop_assert!((0.0..=100.0).contains(&x));
            }
            // modes agree on a single frame with nonempty gt
            if b.iter().any(|&v| v) {
                prop_assert_eq!(
                    iou_accumulate(&[a.clone()], &[b.clone()], IouMode::DatasetLevel).unwrap(),
                    iou_accumulate(&[a], &[b], IouMode::PerImage).unwrap()
                );
            }
        }
    }
}
