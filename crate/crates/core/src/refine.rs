//! Instance providers and refinement of coarse masks by instance selection.

use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataio::FrameRecord;
use crate::error::{Error, Result};
use crate::formats::{read_labels, read_mask, read_rgb, write_labels, write_mask, KeyValues};
use crate::raster::{fill_holes, Mask};
use crate::regions::{felzenszwalb, RegionParams};
use crate::saliency::BatchSummary;
use crate::scenegen::relabel_contiguous;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    Oracle,
    #[serde(alias = "classical_regions")]
    Classical,
    #[serde(alias = "external_promptable")]
    External,
}

impl Provider {
    pub fn name(self) -> &'static str {
        match self {
            Provider::Oracle => "oracle",
            Provider::Classical => "classical",
            Provider::External => "external",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Provider::Oracle),
            "classical" | "classical_regions" => Ok(Provider::Classical),
            "external" | "external_promptable" => Ok(Provider::External),
            other => Err(Error::Config(format!("unknown instance provider `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub provider: Provider,
    pub regions: RegionParams,
    /// Program and leading arguments; invoked as `<command...> <image> <out.png>`
    /// and expected to write a 16-bit label image.
    pub external_command: Vec<String>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self { provider: Provider::Oracle, regions: RegionParams::default(), external_command: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMaskSet {
    /// Labels `1..=n`, 0 = unassigned.
    pub labels: Array2<u16>,
    pub provider: Provider,
}

impl InstanceMaskSet {
    pub fn count(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }
}

/// Instance masks for one frame. `scratch` is where an external provider
/// writes its label image.
pub fn get_instances(rec: &FrameRecord, cfg: &ProviderConfig, scratch: &Path) -> Result<InstanceMaskSet> {
    let labels = match cfg.provider {
        Provider::Oracle => {
            let path = rec.gt_instances.as_ref().ok_or_else(|| {
                Error::Provider(format!("oracle provider needs ground-truth instances for {}", rec.path.display()))
            })?;
            relabel_contiguous(&read_labels(path)?)
        }
        Provider::Classical => felzenszwalb(&read_rgb(&rec.path)?, &cfg.regions),
        Provider::External => {
            let (program, args) = cfg
                .external_command
                .split_first()
                .ok_or_else(|| Error::Provider("external provider has no command configured".into()))?;
            crate::formats::ensure_parent(scratch)?;
            let status = Command::new(program)
                .args(args)
                .arg(&rec.path)
                .arg(scratch)
                .status()
                .map_err(|e| Error::Provider(format!("cannot run `{program}`: {e}")))?;
            if !status.success() {
                return Err(Error::Provider(format!("`{program}` failed on {} ({status})", rec.path.display())));
            }
            if !scratch.exists() {
                return Err(Error::Provider(format!("`{program}` wrote no output for {}", rec.path.display())));
            }
            let labels = relabel_contiguous(&read_labels(scratch)?);
            let (w, h) = image::image_dimensions(&rec.path).map_err(|source| Error::Image { path: rec.path.clone(), source })?;
            if labels.dim() != (h as usize, w as usize) {
                return Err(Error::Shape { what: "external instances", expected: (h as usize, w as usize), found: labels.dim() });
            }
            labels
        }
    };
    Ok(InstanceMaskSet { labels, provider: cfg.provider })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Leftover {
    #[default]
    Drop,
    Keep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineParams {
    pub overlap_tau: f64,
    pub leftover: Leftover,
    pub fill_holes: bool,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self { overlap_tau: 0.5, leftover: Leftover::Drop, fill_holes: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinedMask {
    pub mask: Mask,
    /// `(instance id, fraction of the instance covered by the coarse mask)`.
    pub selected: Vec<(u16, f64)>,
    pub leftover: Leftover,
}

/// Selects every instance whose coverage by `coarse` reaches `overlap_tau`,
/// applies the leftover policy and fills holes.
pub fn refine_mask(coarse: &Mask, instances: &Array2<u16>, params: &RefineParams) -> Result<RefinedMask> {
    if coarse.dim() != instances.dim() {
        return Err(Error::Shape { what: "coarse mask vs instances", expected: instances.dim(), found: coarse.dim() });
    }
    let n = instances.iter().copied().max().unwrap_or(0) as usize;
    let mut size = vec![0usize; n + 1];
    let mut hit = vec![0usize; n + 1];
    for (&l, &c) in instances.iter().zip(coarse) {
        size[l as usize] += 1;
        if c {
            hit[l as usize] += 1;
        }
    }
    let mut chosen = vec![false; n + 1];
    let mut selected = Vec::new();
    for id in 1..=n {
        if size[id] == 0 {
            continue;
        }
        let frac = hit[id] as f64 / size[id] as f64;
        if frac >= params.overlap_tau {
            chosen[id] = true;
            selected.push((id as u16, frac));
        }
    }
    let mut mask = ndarray::Zip::from(instances).and(coarse).map_collect(|&l, &c| {
        chosen[l as usize] && l != 0 || (l == 0 && c && params.leftover == Leftover::Keep)
    });
    if params.fill_holes {
        mask = fill_holes(&mask);
    }
    Ok(RefinedMask { mask, selected, leftover: params.leftover })
}

pub fn instances_path(out_root: &Path, rec: &FrameRecord) -> PathBuf {
    rec.mirror_path(&out_root.join("instances"), "png")
}

pub fn sidecar_path(out_root: &Path, rec: &FrameRecord) -> PathBuf {
    rec.mirror_path(out_root, "txt")
}

/// Refines the coarse mask of every record (read from the mirror tree under
/// `coarse_root`) and writes the refined mask, the instance map and a
/// key-value provenance sidecar under `out_root`.
pub fn batch_refine(
    records: &[FrameRecord],
    coarse_root: &Path,
    provider: &ProviderConfig,
    params: &RefineParams,
    out_root: &Path,
    resume: bool,
) -> Result<BatchSummary> {
    let mut summary = BatchSummary::default();
    for rec in records {
        let out = rec.mirror_path(out_root, "png");
        let side = sidecar_path(out_root, rec);
        if resume && out.exists() && side.exists() {
            summary.skipped += 1;
            continue;
        }
        let coarse_path = rec.mirror_path(coarse_root, "png");
        if !coarse_path.exists() {
            return Err(Error::MissingMask(coarse_path));
        }
        let coarse = read_mask(&coarse_path)?;
        let inst_path = instances_path(out_root, rec);
        let inst = get_instances(rec, provider, &inst_path)?;
        if provider.provider != Provider::External {
            write_labels(&inst_path, &inst.labels)?;
        }
        let refined = refine_mask(&coarse, &inst.labels, params)?;
        write_mask(&out, &refined.mask)?;
        let mut kv = KeyValues::new();
        kv.set("frame", rec.key())
            .set("provider", inst.provider.name())
            .set("instances", inst.count())
            .set("overlap_tau", params.overlap_tau)
            .set("leftover", format!("{:?}", params.leftover).to_lowercase())
            .set("fill_holes", params.fill_holes)
            .set("coarse", coarse_path.display())
            .set(
                "selected",
                refined.selected.iter().map(|(id, f)| format!("{id}:{f:.4}")).collect::<Vec<_>>().join(","),
            );
        kv.write(&side)?;
        summary.written += 1;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels() -> Array2<u16> {
        Array2::from_shape_fn((6, 10), |(y, x)| match (y, x) {
            (1..=4, 1..=3) => 1,
            (1..=4, 6..=8) => 2,
            _ => 0,
        })
    }

    #[test]
    fn exact_instance_is_a_fixed_point() {
        let l = labels();
        let coarse = l.mapv(|v| v == 1);
        let r = refine_mask(&coarse, &l, &RefineParams::default()).unwrap();
        assert_eq!(r.mask, coarse);
        assert_eq!(r.selected, vec![(1, 1.0)]);
    }

    #[test]
    fn sixty_percent_selects_whole_instance() {
        let l = labels();
        // instance 2 has 12 pixels; cover 8 of them (>= 60%)
        let coarse = Array2::from_shape_fn((6, 10), |(y, x)| l[[y, x]] == 2 && y <= 2 || (y == 3 && x <= 7 && l[[y, x]] == 2));
        let r = refine_mask(&coarse, &l, &RefineParams::default()).unwrap();
        assert_eq!(r.mask, l.mapv(|v| v == 2));
    }

    #[test]
    fn forty_percent_selects_nothing() {
        let l = Array2::from_shape_fn((5, 10), |(_, x)| if x < 5 { 1 } else { 2 });
        let coarse = Array2::from_shape_fn((5, 10), |(y, _)| y < 2);
        let r = refine_mask(&coarse, &l, &RefineParams::default()).unwrap();
        assert!(r.mask.iter().all(|&v| !v));
        let keep = RefineParams { leftover: Leftover::Keep, ..Default::default() };
        let r = refine_mask(&coarse, &l.mapv(|_| 0), &keep).unwrap();
        assert_eq!(r.mask, coarse);
        assert!(refine_mask(&coarse, &labels(), &keep).is_err());
    }

    #[test]
    fn holes_inside_selection_are_filled() {
        // ring instance 1 around an unlabelled centre
        let l = Array2::from_shape_fn((7, 7), |(y, x)| u16::from((1..6).contains(&y) && (1..6).contains(&x) && !(y == 3 && x == 3)));
        let r = refine_mask(&l.mapv(|v| v == 1), &l, &RefineParams::default()).unwrap();
        assert!(r.mask[[3, 3]]);
    }

    fn arb_case() -> impl Strategy<Value = (Array2<u16>, Mask, f64)> {
        (proptest::collection::vec(0u16..5, 64), proptest::collection::vec(any::<bool>(), 64), 0.05f64..1.0).prop_map(
            |(l, c, t)| {
                (Array2::from_shape_vec((8, 8), l).unwrap(), Array2::from_shape_vec((8, 8), c).unwrap(), t)
            },
        )
    }

    proptest! {
        #[test]
        fn refinement_properties((l, c, tau) in arb_case()) {
            let no_fill = RefineParams { overlap_tau: tau, fill_holes: false, ..Default::default() };
            let r = refine_mask(&c, &l, &no_fill).unwrap();
            prop_assert!(r.mask.iter().zip(&l).all(|(&m, &i)| !m || i != 0));
            let twice = refine_mask(&r.mask, &l, &no_fill).unwrap();
            prop_assert_eq!(&r.mask, &twice.mask);
            let once = refine_mask(&c, &l, &RefineParams { overlap_tau: tau, ..Default::default() }).unwrap();
            prop_assert!(r.mask.iter().zip(&once.mask).all(|(&a, &b)| !a || b));
            let stricter = refine_mask(&c, &l, &RefineParams { overlap_tau: (tau + 0.2).min(1.0), ..no_fill.clone() }).unwrap();
            prop_assert!(stricter.selected.iter().all(|s| once.selected.iter().any(|o| o.0 == s.0)));
        }
    }
}
