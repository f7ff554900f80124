//! On-disk formats: masks, instance maps, optical flow, key-value manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, IoContext, Result};
use crate::raster::Mask;

pub const FLOW_MAGIC: &[u8; 8] = b"BAFLOW01";

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    Ok(())
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).at(path)?.to_rgb8())
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    ensure_parent(path)?;
    img.save(path).at(path)
}

/// Masks are 8-bit single channel: 0 = background, 255 = foreground.
/// Any nonzero value reads back as foreground.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    ensure_parent(path)?;
    img.save(path).at(path)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).at(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0] > 0))
}

/// Grayscale rendering of a `[0, 1]` map.
pub fn write_unit_map(path: &Path, map: &Array2<f32>) -> Result<()> {
    let (h, w) = map.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(map[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    ensure_parent(path)?;
    img.save(path).at(path)
}

pub fn read_unit_map(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path).at(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
    }))
}

/// Instance maps are 16-bit single channel, 0 = no instance.
pub fn write_labels(path: &Path, labels: &Array2<u16>) -> Result<()> {
    let (h, w) = labels.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([labels[[y as usize, x as usize]]]));
    ensure_parent(path)?;
    img.save(path).at(path)
}

pub fn read_labels(path: &Path) -> Result<Array2<u16>> {
    let img = image::open(path).at(path)?.to_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0]))
}

/// Dense displacement field in pixels, `(H, W, 2)` with `(dx, dy)` last.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(pub Array3<f32>);

impl FlowField {
    pub fn uniform(h: usize, w: usize, dx: f32, dy: f32) -> Self {
        Self(Array3::from_shape_fn((h, w, 2), |(_, _, k)| if k == 0 { dx } else { dy }))
    }

    pub fn dim(&self) -> (usize, usize) {
        let (h, w, _) = self.0.dim();
        (h, w)
    }

    /// Averages the field over `factor x factor` blocks and rescales the
    /// displacements to the coarser grid.
    pub fn downsample(&self, factor: usize) -> Array3<f64> {
        let (h, w) = self.dim();
        let (hc, wc) = (h / factor, w / factor);
        let norm = (factor * factor) as f64 * factor as f64;
        Array3::from_shape_fn((hc, wc, 2), |(y, x, k)| {
            let mut acc = 0.0;
            for yy in y * factor..(y + 1) * factor {
                for xx in x * factor..(x + 1) * factor {
                    acc += self.0[[yy, xx, k]] as f64;
                }
            }
            acc / norm
        })
    }

    /// Layout: 8-byte magic `BAFLOW01`, width and height as little-endian
    /// u32, then `H * W` little-endian f32 pairs `(dx, dy)` in row-major order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (h, w) = self.dim();
        let mut out = Vec::with_capacity(16 + h * w * 8);
        out.extend_from_slice(FLOW_MAGIC);
        out.extend_from_slice(&(w as u32).to_le_bytes());
        out.extend_from_slice(&(h as u32).to_le_bytes());
        for v in self.0.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
        if bytes.len() < 16 || &bytes[..8] != FLOW_MAGIC {
            return Err(bad("missing BAFLOW01 header"));
        }
        let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let h = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        if bytes.len() != 16 + h * w * 8 {
            return Err(bad("payload length does not match dimensions"));
        }
        let data: Vec<f32> = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self(Array3::from_shape_vec((h, w, 2), data).expect("length checked")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        fs::write(path, self.to_bytes()).at(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        Self::from_bytes(&bytes, path)
    }
}

/// Flat `key = value` text; `#` starts a comment line.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues(pub BTreeMap<String, String>);

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.0.insert(key.into(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut out = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                reason: format!("line {} is not `key = value`", n + 1),
            })?;
            out.set(k.trim(), v.trim());
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        fs::write(path, self.render()).at(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Self::parse(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn flow_bytes_round_trip(h in 1usize..6, w in 1usize..6, seed in any::<u32>()) {
            let f = FlowField(Array3::from_shape_fn((h, w, 2), |(y, x, k)| {
                ((seed as usize + y * 7 + x * 3 + k) % 19) as f32 * 0.25 - 2.0
            }));
            let back = FlowField::from_bytes(&f.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, f);
        }
    }

    #[test]
    fn flow_header_is_checked() {
        let f = FlowField::uniform(2, 3, 8.0, 0.0);
        let bytes = f.to_bytes();
        assert_eq!(&bytes[..8], b"BAFLOW01");
        assert_eq!(bytes.len(), 16 + 2 * 3 * 8);
        let mut broken = bytes.clone();
        broken[0] = b'X';
        assert!(FlowField::from_bytes(&broken, Path::new("x")).is_err());
        assert!(FlowField::from_bytes(&bytes[..20], Path::new("x")).is_err());
    }

    #[test]
    fn downsampled_flow_is_in_coarse_pixels() {
        let f = FlowField::uniform(16, 16, 8.0, -4.0);
        let d = f.downsample(8);
        assert_eq!(d.dim(), (2, 2, 2));
        assert_eq!(d[[1, 1, 0]], 1.0);
        assert_eq!(d[[0, 1, 1]], -0.5);
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Array2::from_shape_fn((4, 6), |(y, x)| (x + y) % 3 == 0);
        let p = dir.path().join("a/m.png");
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
        let l = Array2::from_shape_fn((4, 6), |(y, x)| (y * 1000 + x) as u16);
        let p = dir.path().join("l.png");
        write_labels(&p, &l).unwrap();
        assert_eq!(read_labels(&p).unwrap(), l);
        let mut kv = KeyValues::new();
        kv.set("b", 2).set("a", "x y");
        let p = dir.path().join("kv.txt");
        kv.write(&p).unwrap();
        assert_eq!(KeyValues::read(&p).unwrap(), kv);
    }
}
