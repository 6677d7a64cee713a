//! Core data model and bit-exact file I/O for hyperspectral cubes, score
//! maps, masks, and annotation sets.
//!
//! Cubes are stored as raw little-endian float32 in band-sequential order
//! (all of band 0, then band 1, ...) with a sidecar JSON header. Score maps
//! and masks reuse the same scheme with `bands = 1` and a `class_id` header
//! field. Pixel coordinates put the top-left pixel center at (0.5, 0.5).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical unit of the samples in a cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Radiance,
    Reflectance,
}

/// Tolerance above 1.0 allowed for reflectance samples (sensor overshoot).
pub const REFLECTANCE_EPS: f32 = 0.05;

/// An H x W x N cube of radiance or reflectance samples.
///
/// `data` is band-sequential: sample (x, y, band) lives at
/// `band * height * width + y * width + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f32>,
    wavelengths: Option<Vec<f64>>,
    unit: Unit,
}

impl HyperCube {
    pub fn new(
        height: usize,
        width: usize,
        bands: usize,
        data: Vec<f32>,
        wavelengths: Option<Vec<f64>>,
        unit: Unit,
    ) -> Result<Self> {
        let expected = height * width * bands;
        if data.len() != expected {
            return Err(Error::SizeMismatch {
                path: PathBuf::new(),
                expected,
                actual: data.len(),
            });
        }
        if let Some(w) = &wavelengths {
            if w.len() != bands {
                return Err(Error::LengthMismatch { expected: bands, actual: w.len() });
            }
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample { index });
        }
        if unit == Unit::Reflectance {
            if let Some(index) =
                data.iter().position(|&v| !(-REFLECTANCE_EPS..=1.0 + REFLECTANCE_EPS).contains(&v))
            {
                return Err(Error::NonFiniteSample { index });
            }
        }
        Ok(Self { height, width, bands, data, wavelengths, unit })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn wavelengths(&self) -> Option<&[f64]> {
        self.wavelengths.as_deref()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn sample(&self, x: usize, y: usize, band: usize) -> f32 {
        debug_assert!(x < self.width && y < self.height && band < self.bands);
        self.data[band * self.height * self.width + y * self.width + x]
    }

    pub(crate) fn set_sample(&mut self, x: usize, y: usize, band: usize, value: f32) {
        let plane = self.height * self.width;
        self.data[band * plane + y * self.width + x] = value;
    }

    /// Spectrum of one pixel as f64, length `bands`.
    pub fn spectrum(&self, x: usize, y: usize) -> Vec<f64> {
        let plane = self.height * self.width;
        let off = y * self.width + x;
        (0..self.bands).map(|b| self.data[b * plane + off] as f64).collect()
    }

    /// Average every `group` adjacent bands; wavelengths averaged likewise.
    pub fn band_reduce(&self, group: usize) -> Result<HyperCube> {
        if group == 0 || self.bands % group != 0 {
            return Err(Error::IndivisibleBandCount { bands: self.bands, group });
        }
        let out_bands = self.bands / group;
        let plane = self.height * self.width;
        let mut data = vec![0f32; out_bands * plane];
        for ob in 0..out_bands {
            for g in 0..group {
                let src = &self.data[(ob * group + g) * plane..(ob * group + g + 1) * plane];
                let dst = &mut data[ob * plane..(ob + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += (*s as f64 / group as f64) as f32;
                }
            }
        }
        let wavelengths = self.wavelengths.as_ref().map(|w| {
            (0..out_bands)
                .map(|ob| w[ob * group..(ob + 1) * group].iter().sum::<f64>() / group as f64)
                .collect()
        });
        HyperCube::new(self.height, self.width, out_bands, data, wavelengths, self.unit)
    }
}

/// H x W detection response for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub class_id: usize,
    pub scores: Vec<f32>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, class_id: usize, scores: Vec<f32>) -> Result<Self> {
        if scores.len() != height * width {
            return Err(Error::LengthMismatch { expected: height * width, actual: scores.len() });
        }
        if let Some(index) = scores.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample { index });
        }
        Ok(Self { height, width, class_id, scores })
    }

    pub fn score(&self, x: usize, y: usize) -> f32 {
        self.scores[y * self.width + x]
    }
}

/// H x W boolean mask for one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub class_id: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, class_id: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::LengthMismatch { expected: height * width, actual: bits.len() });
        }
        Ok(Self { height, width, class_id, bits })
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Axis-aligned box: center (cx, cy), width, height. Pixel units unless
/// stated otherwise; normalized boxes have all components in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn x_min(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn x_max(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y_min(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn y_max(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = (self.x_max().min(other.x_max()) - self.x_min().max(other.x_min())).max(0.0);
        let ih = (self.y_max().min(other.y_max()) - self.y_min().max(other.y_min())).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// True when `self` lies fully inside `other`.
    pub fn contained_in(&self, other: &BBox) -> bool {
        self.x_min() >= other.x_min()
            && self.x_max() <= other.x_max()
            && self.y_min() >= other.y_min()
            && self.y_max() <= other.y_max()
    }
}

/// A ground-truth instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub box_: BBox,
    pub class_id: usize,
    pub instance_id: usize,
}

/// A predicted instance with confidence in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub box_: BBox,
    pub class_id: usize,
    pub confidence: f64,
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct RawHeader {
    height: usize,
    width: usize,
    bands: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    unit: Option<Unit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wavelengths_nm: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    class_id: Option<usize>,
}

fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

fn read_header(path: &Path) -> Result<RawHeader> {
    let hpath = header_path(path);
    let text = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: hpath.clone(),
        reason: e.to_string(),
    })
}

fn write_header(path: &Path, header: &RawHeader) -> Result<()> {
    let hpath = header_path(path);
    let text = serde_json::to_string_pretty(header).map_err(|e| Error::json(&hpath, e))?;
    fs::write(&hpath, text).map_err(|e| Error::io(&hpath, e))
}

fn read_payload(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() / 4,
        });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn write_payload(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Read a `.hsc` cube (raw float32 LE + sidecar JSON header).
pub fn read_cube(path: impl AsRef<Path>) -> Result<HyperCube> {
    let path = path.as_ref();
    let header = read_header(path)?;
    let unit = header.unit.ok_or_else(|| Error::MalformedHeader {
        path: header_path(path),
        reason: "missing unit".into(),
    })?;
    let data = read_payload(path, header.height * header.width * header.bands)?;
    HyperCube::new(header.height, header.width, header.bands, data, header.wavelengths_nm, unit)
}

pub fn write_cube(cube: &HyperCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_header(
        path,
        &RawHeader {
            height: cube.height,
            width: cube.width,
            bands: cube.bands,
            unit: Some(cube.unit),
            wavelengths_nm: cube.wavelengths.clone(),
            class_id: None,
        },
    )?;
    write_payload(path, &cube.data)
}

pub fn read_score_map(path: impl AsRef<Path>) -> Result<ScoreMap> {
    let path = path.as_ref();
    let header = read_header(path)?;
    if header.bands != 1 {
        return Err(Error::MalformedHeader {
            path: header_path(path),
            reason: format!("score map must have bands=1, got {}", header.bands),
        });
    }
    let class_id = header.class_id.ok_or_else(|| Error::MalformedHeader {
        path: header_path(path),
        reason: "missing class_id".into(),
    })?;
    let data = read_payload(path, header.height * header.width)?;
    ScoreMap::new(header.height, header.width, class_id, data)
}

pub fn write_score_map(map: &ScoreMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_header(
        path,
        &RawHeader {
            height: map.height,
            width: map.width,
            bands: 1,
            unit: None,
            wavelengths_nm: None,
            class_id: Some(map.class_id),
        },
    )?;
    write_payload(path, &map.scores)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let map = read_score_map(path)?;
    BinaryMask::new(map.height, map.width, map.class_id, map.scores.iter().map(|&v| v > 0.5).collect())
}

pub fn write_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let map = ScoreMap::new(
        mask.height,
        mask.width,
        mask.class_id,
        mask.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )?;
    write_score_map(&map, path)
}

// COCO-like annotation container.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: usize,
    pub file: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub image_id: usize,
    pub instance_id: usize,
    pub category_id: usize,
    /// [cx, cy, w, h] in pixel units, top-left pixel center at (0.5, 0.5).
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub images: Vec<ImageEntry>,
    pub categories: Vec<CategoryEntry>,
    pub annotations: Vec<AnnotationEntry>,
}

impl AnnotationSet {
    /// Annotations of one image as domain objects.
    pub fn annotations_for(&self, image_id: usize) -> Vec<Annotation> {
        self.annotations
            .iter()
            .filter(|a| a.image_id == image_id)
            .map(|a| Annotation {
                box_: BBox::new(a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]),
                class_id: a.category_id,
                instance_id: a.instance_id,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEntry {
    pub image_id: usize,
    pub category_id: usize,
    pub bbox: [f64; 4],
    pub confidence: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub detections: Vec<DetectionEntry>,
}

impl DetectionSet {
    pub fn detections_for(&self, image_id: usize) -> Vec<Detection> {
        self.detections
            .iter()
            .filter(|d| d.image_id == image_id)
            .map(|d| Detection {
                box_: BBox::new(d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3]),
                class_id: d.category_id,
                confidence: d.confidence,
            })
            .collect()
    }
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Write annotations JSON; entries sorted by (image_id, instance_id) for
/// deterministic byte output.
pub fn write_annotations(set: &AnnotationSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut sorted = set.clone();
    sorted.annotations.sort_by_key(|a| (a.image_id, a.instance_id));
    sorted.images.sort_by_key(|i| i.id);
    sorted.categories.sort_by_key(|c| c.id);
    let text = serde_json::to_string_pretty(&sorted).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<DetectionSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_detections(set: &DetectionSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(set).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn cube_round_trip_identity() {
        let dir = tmpdir();
        let path = dir.path().join("zero.hsc");
        let cube =
            HyperCube::new(2, 2, 1, vec![0.0; 4], None, Unit::Radiance).unwrap();
        write_cube(&cube, &path).unwrap();
        let back = read_cube(&path).unwrap();
        assert_eq!(cube, back);
        // identical bytes on rewrite
        let bytes1 = std::fs::read(&path).unwrap();
        write_cube(&back, &path).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn cube_header_payload_agreement() {
        let dir = tmpdir();
        let path = dir.path().join("big.hsc");
        let data: Vec<f32> = (0..128 * 128 * 30).map(|i| (i % 97) as f32).collect();
        let cube = HyperCube::new(128, 128, 30, data, None, Unit::Radiance).unwrap();
        write_cube(&cube, &path).unwrap();
        assert_eq!(read_cube(&path).unwrap().bands(), 30);
    }

    #[test]
    fn cube_size_mismatch() {
        let dir = tmpdir();
        let path = dir.path().join("bad.hsc");
        let cube = HyperCube::new(4, 4, 2, vec![1.0; 32], None, Unit::Radiance).unwrap();
        write_cube(&cube, &path).unwrap();
        // truncate payload to 31 floats
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..31 * 4]).unwrap();
        match read_cube(&path) {
            Err(Error::SizeMismatch { expected, actual, .. }) => {
                assert_eq!(expected, 32);
                assert_eq!(actual, 31);
            }
            other => panic!("expected SizeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn nan_is_rejected() {
        let err = HyperCube::new(1, 1, 2, vec![1.0, f32::NAN], None, Unit::Radiance);
        assert!(matches!(err, Err(Error::NonFiniteSample { index: 1 })));
    }

    #[test]
    fn band_reduce_150_to_30() {
        let data: Vec<f32> = vec![1.0; 2 * 2 * 150];
        let cube = HyperCube::new(2, 2, 150, data, None, Unit::Radiance).unwrap();
        assert_eq!(cube.band_reduce(5).unwrap().bands(), 30);
    }

    #[test]
    fn band_reduce_group_one_is_identity() {
        let data: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let cube = HyperCube::new(2, 2, 3, data, None, Unit::Radiance).unwrap();
        assert_eq!(cube.band_reduce(1).unwrap(), cube);
    }

    #[test]
    fn band_reduce_means() {
        let cube =
            HyperCube::new(1, 1, 4, vec![1.0, 3.0, 5.0, 7.0], None, Unit::Radiance).unwrap();
        let out = cube.band_reduce(2).unwrap();
        assert_eq!(out.data(), &[2.0, 6.0]);
    }

    #[test]
    fn band_reduce_indivisible() {
        let cube = HyperCube::new(1, 1, 5, vec![1.0; 5], None, Unit::Radiance).unwrap();
        assert!(matches!(cube.band_reduce(2), Err(Error::IndivisibleBandCount { .. })));
    }

    #[test]
    fn annotations_sorted_and_counted() {
        let dir = tmpdir();
        let path = dir.path().join("ann.json");
        let set = AnnotationSet {
            images: vec![ImageEntry { id: 0, file: "a.hsc".into(), height: 4, width: 4 }],
            categories: vec![CategoryEntry { id: 0, name: "c0".into() }],
            annotations: vec![
                AnnotationEntry { image_id: 0, instance_id: 2, category_id: 0, bbox: [1.0, 1.0, 1.0, 1.0] },
                AnnotationEntry { image_id: 0, instance_id: 0, category_id: 0, bbox: [2.0, 2.0, 1.0, 1.0] },
                AnnotationEntry { image_id: 0, instance_id: 1, category_id: 0, bbox: [3.0, 3.0, 1.0, 1.0] },
            ],
        };
        write_annotations(&set, &path).unwrap();
        let back = read_annotations(&path).unwrap();
        assert_eq!(back.annotations.len(), 3);
        let ids: Vec<_> = back.annotations.iter().map(|a| a.instance_id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn empty_annotation_set_round_trips() {
        let dir = tmpdir();
        let path = dir.path().join("empty.json");
        write_annotations(&AnnotationSet::default(), &path).unwrap();
        let back = read_annotations(&path).unwrap();
        assert!(back.annotations.is_empty());
    }

    #[test]
    fn score_map_and_mask_round_trip() {
        let dir = tmpdir();
        let spath = dir.path().join("s.hsc");
        let map = ScoreMap::new(2, 3, 4, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.1]).unwrap();
        write_score_map(&map, &spath).unwrap();
        assert_eq!(read_score_map(&spath).unwrap(), map);

        let mpath = dir.path().join("m.hsc");
        let mask = BinaryMask::new(2, 2, 1, vec![true, false, false, true]).unwrap();
        write_mask(&mask, &mpath).unwrap();
        assert_eq!(read_mask(&mpath).unwrap(), mask);
    }

    #[test]
    fn band_reduce_energy_ratio() {
        let data: Vec<f32> = (0..3 * 3 * 6).map(|i| (i as f32 * 0.37).sin().abs() + 0.5).collect();
        let cube = HyperCube::new(3, 3, 6, data, None, Unit::Radiance).unwrap();
        let out = cube.band_reduce(3).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let sin: f64 = cube.spectrum(x, y).iter().sum();
                let sout: f64 = out.spectrum(x, y).iter().sum();
                assert!((sout * 3.0 - sin).abs() / sin.abs() <= 1e-5);
            }
        }
    }
}
