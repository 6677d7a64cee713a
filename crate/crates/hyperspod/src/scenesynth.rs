//! Object template generation, linear-mixing injection into background
//! cubes, and full annotated dataset synthesis.
//!
//! Templates grow by seeded accretion (repeatedly attaching a uniform-random
//! 4-neighbor of the blob), which guarantees connectivity. Injection is the
//! linear mixing model: the new pixel spectrum is the abundance-weighted sum
//! of the endmember spectra and the original background spectrum.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsicube::{
    self, Annotation, AnnotationEntry, AnnotationSet, BBox, BinaryMask, CategoryEntry, HyperCube,
    ImageEntry, Unit,
};
use crate::specmodel::{simulate_spectrum, simulate_spectrum_forced, FluctuationDraw, SpectrumStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    /// One endmember; object abundance equals endmember abundance.
    Single,
    /// Every pixel mixes all endmembers; the object abundance is split
    /// among them by a uniform simplex draw.
    Hybrid,
    /// Pixels are partitioned into contiguous groups, one endmember each.
    Combined,
}

/// Per-class simulation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectClassSpec {
    pub class_id: usize,
    pub name: String,
    pub kind: TemplateKind,
    pub endmembers: Vec<String>,
    /// Inclusive pixel-count range.
    pub pixel_range: (usize, usize),
    /// Abundance range for the center pixel when every pixel is mixed.
    pub max_abundance_range: (f64, f64),
    /// Abundance range for boundary-adjacent (mixed) pixels.
    pub mixed_abundance_range: (f64, f64),
}

impl ObjectClassSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.endmembers.len();
        let ok = match self.kind {
            TemplateKind::Single => n == 1,
            TemplateKind::Hybrid | TemplateKind::Combined => n >= 2,
        };
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "class {}: {:?} template needs {} endmembers, got {n}",
                self.class_id,
                self.kind,
                if self.kind == TemplateKind::Single { "exactly 1" } else { ">= 2" },
            )));
        }
        if self.pixel_range.0 < 1 || self.pixel_range.0 > self.pixel_range.1 {
            return Err(Error::InvalidConfig(format!(
                "class {}: bad pixel range {:?}",
                self.class_id, self.pixel_range
            )));
        }
        for (label, r) in
            [("max_abundance", self.max_abundance_range), ("mixed_abundance", self.mixed_abundance_range)]
        {
            if !(r.0 > 0.0 && r.0 <= r.1 && r.1 <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "class {}: {label} range {r:?} not within (0, 1]",
                    self.class_id
                )));
            }
        }
        Ok(())
    }
}

/// A connected set of pixel offsets with per-pixel endmember abundances.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTemplate {
    /// (dx, dy) offsets relative to the growth origin.
    pub offsets: Vec<(i32, i32)>,
    /// Per offset, abundance of each endmember (parallel to the class
    /// spec's endmember list). Sum per pixel is the object abundance.
    pub abundances: Vec<Vec<f64>>,
    pub class_id: usize,
}

impl ObjectTemplate {
    /// Total object abundance of pixel `i`.
    pub fn object_abundance(&self, i: usize) -> f64 {
        self.abundances[i].iter().sum()
    }

    /// Tight offset extent as (x_min, x_max, y_min, y_max).
    pub fn extent(&self) -> (i32, i32, i32, i32) {
        let xs = self.offsets.iter().map(|o| o.0);
        let ys = self.offsets.iter().map(|o| o.1);
        (
            xs.clone().min().unwrap(),
            xs.max().unwrap(),
            ys.clone().min().unwrap(),
            self.offsets.iter().map(|o| o.1).max().unwrap(),
        )
    }
}

/// Grow a 4-connected blob of `n_pixels` offsets by random accretion from
/// (0, 0). Offsets come out sorted row-major for determinism.
pub fn grow_template(n_pixels: usize, rng: &mut impl Rng) -> Vec<(i32, i32)> {
    assert!(n_pixels >= 1);
    let mut blob = BTreeSet::new();
    blob.insert((0i32, 0i32));
    while blob.len() < n_pixels {
        let frontier: Vec<(i32, i32)> = blob
            .iter()
            .flat_map(|&(x, y)| [(x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)])
            .filter(|c| !blob.contains(c))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let pick = frontier[rng.gen_range(0..frontier.len())];
        blob.insert(pick);
    }
    let mut offsets: Vec<(i32, i32)> = blob.into_iter().collect();
    offsets.sort_by_key(|&(x, y)| (y, x));
    offsets
}

fn centroid(offsets: &[(i32, i32)]) -> (f64, f64) {
    let n = offsets.len() as f64;
    let sx: f64 = offsets.iter().map(|o| o.0 as f64).sum();
    let sy: f64 = offsets.iter().map(|o| o.1 as f64).sum();
    (sx / n, sy / n)
}

/// True when all 8 neighbors of `p` are inside the offset set.
fn is_interior(p: (i32, i32), set: &BTreeSet<(i32, i32)>) -> bool {
    for dy in -1..=1 {
        for dx in -1..=1 {
            if (dx, dy) != (0, 0) && !set.contains(&(p.0 + dx, p.1 + dy)) {
                return false;
            }
        }
    }
    true
}

/// Uniform draw from the simplex scaled to `total`, one weight per part.
fn simplex_split(total: f64, parts: usize, rng: &mut impl Rng) -> Vec<f64> {
    if parts == 1 {
        return vec![total];
    }
    let mut cuts: Vec<f64> = (0..parts - 1).map(|_| rng.gen_range(0.0..1.0)).collect();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0.0;
    for c in cuts {
        out.push((c - prev) * total);
        prev = c;
    }
    out.push((1.0 - prev) * total);
    out
}

/// Assign per-pixel abundances to a grown blob.
///
/// Interior pixels (no 8-neighbor outside the blob) are pure: abundance 1.
/// Mixed pixels get values sampled from the class's mixed range, sorted
/// descending and assigned by ascending distance to the blob centroid. When
/// every pixel is mixed, the centroid-nearest pixel is resampled from the
/// max-abundance range. The object abundance is then split per endmember
/// according to the template kind.
pub fn assign_abundances(
    offsets: &[(i32, i32)],
    spec: &ObjectClassSpec,
    rng: &mut impl Rng,
) -> Result<ObjectTemplate> {
    if offsets.is_empty() {
        return Err(Error::EmptyTemplate);
    }
    spec.validate()?;
    let set: BTreeSet<(i32, i32)> = offsets.iter().copied().collect();
    let (cx, cy) = centroid(offsets);
    let dist =
        |p: (i32, i32)| ((p.0 as f64 - cx).powi(2) + (p.1 as f64 - cy).powi(2)).sqrt();

    let mut object_abundance = vec![0.0f64; offsets.len()];
    let mut mixed: Vec<usize> = Vec::new();
    for (i, &p) in offsets.iter().enumerate() {
        if is_interior(p, &set) {
            object_abundance[i] = 1.0;
        } else {
            mixed.push(i);
        }
    }
    // descending samples meet ascending centroid distance
    let mut samples: Vec<f64> = mixed
        .iter()
        .map(|_| rng.gen_range(spec.mixed_abundance_range.0..=spec.mixed_abundance_range.1))
        .collect();
    samples.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut order = mixed.clone();
    order.sort_by(|&a, &b| {
        dist(offsets[a]).partial_cmp(&dist(offsets[b])).unwrap().then(a.cmp(&b))
    });
    for (rank, &i) in order.iter().enumerate() {
        object_abundance[i] = samples[rank];
    }
    if mixed.len() == offsets.len() {
        let center = order[0];
        object_abundance[center] =
            rng.gen_range(spec.max_abundance_range.0..=spec.max_abundance_range.1);
    }

    let n_em = spec.endmembers.len();
    let abundances: Vec<Vec<f64>> = match spec.kind {
        TemplateKind::Single => object_abundance.iter().map(|&a| vec![a]).collect(),
        TemplateKind::Hybrid => {
            object_abundance.iter().map(|&a| simplex_split(a, n_em, rng)).collect()
        }
        TemplateKind::Combined => {
            // contiguous angular sectors around the centroid, one endmember
            // per sector
            let mut by_angle: Vec<usize> = (0..offsets.len()).collect();
            let angle = |p: (i32, i32)| (p.1 as f64 - cy).atan2(p.0 as f64 - cx);
            by_angle.sort_by(|&a, &b| {
                angle(offsets[a]).partial_cmp(&angle(offsets[b])).unwrap().then(a.cmp(&b))
            });
            let mut group = vec![0usize; offsets.len()];
            for (rank, &i) in by_angle.iter().enumerate() {
                group[i] = rank * n_em / offsets.len();
            }
            object_abundance
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    let mut row = vec![0.0; n_em];
                    row[group[i]] = a;
                    row
                })
                .collect()
        }
    };
    Ok(ObjectTemplate { offsets: offsets.to_vec(), abundances, class_id: spec.class_id })
}

/// Inject a template at `position` (absolute pixel of the template origin).
///
/// Per object pixel the new spectrum is the abundance-weighted mix of the
/// endmember spectra and the original background spectrum. The input cube
/// is not mutated. `spectra` is one radiance spectrum per endmember,
/// parallel to the template's abundance rows.
pub fn inject(
    cube: &HyperCube,
    template: &ObjectTemplate,
    spectra: &[Vec<f64>],
    position: (i32, i32),
) -> Result<(HyperCube, Annotation)> {
    let (h, w, bands) = (cube.height() as i32, cube.width() as i32, cube.bands());
    for &(dx, dy) in &template.offsets {
        let (x, y) = (position.0 + dx, position.1 + dy);
        if x < 0 || y < 0 || x >= w || y >= h {
            return Err(Error::OutOfBounds {
                x: x as i64,
                y: y as i64,
                width: w as usize,
                height: h as usize,
            });
        }
    }
    for s in spectra {
        if s.len() != bands {
            return Err(Error::LengthMismatch { expected: bands, actual: s.len() });
        }
    }
    let mut out = cube.clone();
    for (i, &(dx, dy)) in template.offsets.iter().enumerate() {
        let (x, y) = ((position.0 + dx) as usize, (position.1 + dy) as usize);
        let total: f64 = template.abundances[i].iter().sum();
        for b in 0..bands {
            let mixed: f64 = template.abundances[i]
                .iter()
                .zip(spectra)
                .map(|(&e, s)| e * s[b])
                .sum::<f64>()
                + (1.0 - total) * cube.sample(x, y, b) as f64;
            out.set_sample(x, y, b, mixed as f32);
        }
    }
    let (x0, x1, y0, y1) = template.extent();
    let ann = Annotation {
        box_: BBox::new(
            position.0 as f64 + (x0 + x1 + 1) as f64 / 2.0,
            position.1 as f64 + (y0 + y1 + 1) as f64 / 2.0,
            (x1 - x0 + 1) as f64,
            (y1 - y0 + 1) as f64,
        ),
        class_id: template.class_id,
        instance_id: 0,
    };
    Ok((out, ann))
}

/// Smooth positive radiance curve scaled so its maximum equals `m_t`:
/// a low-order random cosine mixture, a stand-in for library endmembers.
pub fn synth_endmember_baseline(bands: usize, m_t: f64, rng: &mut impl Rng) -> Vec<f64> {
    let phases: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let amps: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..0.4)).collect();
    let raw: Vec<f64> = (0..bands)
        .map(|b| {
            let t = b as f64 / bands as f64;
            let mut v = 1.0;
            for (k, (p, a)) in phases.iter().zip(&amps).enumerate() {
                v += a * ((k + 1) as f64 * std::f64::consts::TAU * t + p).cos();
            }
            v.max(0.05)
        })
        .collect();
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    raw.iter().map(|v| v / max * m_t).collect()
}

/// Piecewise-smooth background: `n_classes` regions (seeded Voronoi) with
/// distinct mean spectra and per-pixel fluctuation. `fluctuation` scales the
/// local noise; 0 gives a constant value per region.
pub fn synth_background(
    height: usize,
    width: usize,
    bands: usize,
    n_classes: usize,
    fluctuation: f64,
    rng: &mut impl Rng,
) -> HyperCube {
    assert!(height >= 1 && width >= 1 && bands >= 1 && n_classes >= 1);
    let sites: Vec<(f64, f64)> = (0..n_classes)
        .map(|_| (rng.gen_range(0.0..width as f64), rng.gen_range(0.0..height as f64)))
        .collect();
    let class_stats: Vec<SpectrumStats> = (0..n_classes)
        .map(|_| {
            let level = rng.gen_range(800.0..2500.0);
            let mu = synth_endmember_baseline(bands, level, rng);
            let gamma = vec![0.05; bands];
            SpectrumStats {
                sigma: mu.iter().map(|m| m * 0.05).collect(),
                mu,
                gamma,
                sigma_a: 0.6 * fluctuation,
                sigma_v: vec![0.8 * fluctuation; bands],
            }
        })
        .collect();
    let mut data = vec![0f32; height * width * bands];
    let plane = height * width;
    for y in 0..height {
        for x in 0..width {
            let nearest = sites
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da = (a.0 - x as f64).powi(2) + (a.1 - y as f64).powi(2);
                    let db = (b.0 - x as f64).powi(2) + (b.1 - y as f64).powi(2);
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(i, _)| i)
                .unwrap();
            let stats = &class_stats[nearest];
            let spectrum = simulate_spectrum(stats, &stats.mu.clone(), Some(0.0), rng)
                .expect("lengths match");
            for b in 0..bands {
                data[b * plane + y * width + x] = spectrum[b] as f32;
            }
        }
    }
    HyperCube::new(height, width, bands, data, None, Unit::Radiance).expect("finite synthesis")
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

/// Full dataset recipe, loadable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Inclusive object-count range per image.
    pub objects_per_image: (usize, usize),
    pub background_classes: usize,
    #[serde(default = "default_background_fluctuation")]
    pub background_fluctuation: f64,
    /// Minimum pixel gap enforced between object bounding boxes during
    /// placement (0 = boxes may touch but not overlap).
    #[serde(default)]
    pub min_separation: f64,
    pub seed: u64,
    /// Peak-radiance range for synthesized endmember baselines.
    #[serde(default = "default_m_t_range")]
    pub m_t_range: (f64, f64),
    /// Fluctuation statistics applied to injected object spectra.
    #[serde(default = "default_object_gamma")]
    pub object_gamma: f64,
    #[serde(default = "default_object_sigma_a")]
    pub object_sigma_a: f64,
    #[serde(default = "default_object_sigma_v")]
    pub object_sigma_v: f64,
    pub classes: Vec<ObjectClassSpec>,
}

fn default_background_fluctuation() -> f64 {
    1.0
}
fn default_m_t_range() -> (f64, f64) {
    crate::specmodel::M_T_RANGE
}
fn default_object_gamma() -> f64 {
    0.05
}
fn default_object_sigma_a() -> f64 {
    0.6
}
fn default_object_sigma_v() -> f64 {
    0.8
}

impl DatasetConfig {
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: DatasetConfig =
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images == 0 || self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(Error::InvalidConfig("zero-sized dataset dimensions".into()));
        }
        if self.objects_per_image.0 > self.objects_per_image.1
            || self.objects_per_image.1 > self.height * self.width
        {
            return Err(Error::InvalidConfig(format!(
                "bad objects_per_image range {:?}",
                self.objects_per_image
            )));
        }
        if self.classes.is_empty() {
            return Err(Error::InvalidConfig("no object classes".into()));
        }
        for c in &self.classes {
            c.validate()?;
        }
        Ok(())
    }

    /// Names of all endmembers across the class roster, deduplicated and
    /// ordered by first appearance.
    pub fn endmember_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for c in &self.classes {
            for e in &c.endmembers {
                if !names.contains(e) {
                    names.push(e.clone());
                }
            }
        }
        names
    }
}

/// Per-file provenance emitted by [`generate_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub image_id: usize,
    pub cube: String,
    pub masks: Vec<String>,
    pub objects: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub seed: u64,
    pub annotations: String,
    /// Endmember baseline CSVs, one per unique endmember name, usable as
    /// detector priors.
    #[serde(default)]
    pub endmembers: Vec<String>,
    pub images: Vec<ManifestImage>,
}

/// Derive the per-image rng stream: independent of worker schedule.
fn image_seed(seed: u64, image_index: u64) -> u64 {
    // splitmix64 over (seed, index)
    let mut z = seed ^ image_index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct SynthImage {
    image_id: usize,
    cube: HyperCube,
    annotations: Vec<Annotation>,
    masks: Vec<BinaryMask>,
}

fn synth_image(config: &DatasetConfig, baselines: &[Vec<f64>], image_id: usize) -> Result<SynthImage> {
    let mut rng = ChaCha12Rng::seed_from_u64(image_seed(config.seed, image_id as u64));
    let mut cube = synth_background(
        config.height,
        config.width,
        config.bands,
        config.background_classes,
        config.background_fluctuation,
        &mut rng,
    );
    let names = config.endmember_names();
    let object_stats = SpectrumStats {
        mu: vec![1.0; config.bands],
        sigma: vec![config.object_gamma; config.bands],
        gamma: vec![config.object_gamma; config.bands],
        sigma_a: config.object_sigma_a,
        sigma_v: vec![config.object_sigma_v; config.bands],
    };
    let n_objects = rng.gen_range(config.objects_per_image.0..=config.objects_per_image.1);
    let mut annotations: Vec<Annotation> = Vec::new();
    let mut masks: Vec<BinaryMask> = config
        .classes
        .iter()
        .map(|c| {
            BinaryMask::new(config.height, config.width, c.class_id, vec![false; config.height * config.width])
                .expect("sized mask")
        })
        .collect();
    for instance_id in 0..n_objects {
        let class = &config.classes[rng.gen_range(0..config.classes.len())];
        let n_pixels = rng.gen_range(class.pixel_range.0..=class.pixel_range.1);
        let offsets = grow_template(n_pixels, &mut rng);
        let template = assign_abundances(&offsets, class, &mut rng)?;
        // one wide-area factor per object, shared by its endmember spectra
        let b = rng.gen_range(crate::specmodel::WIDE_AREA_B_RANGE.0..=crate::specmodel::WIDE_AREA_B_RANGE.1);
        let spectra: Vec<Vec<f64>> = class
            .endmembers
            .iter()
            .map(|name| {
                let idx = names.iter().position(|n| n == name).expect("roster name");
                let a = rand_distr::Distribution::sample(
                    &rand_distr::Normal::new(0.0, object_stats.sigma_a).unwrap(),
                    &mut rng,
                );
                simulate_spectrum_forced(&object_stats, &baselines[idx], FluctuationDraw { a, b }, &mut rng)
            })
            .collect();
        let (x0, x1, y0, y1) = {
            let t = &template;
            t.extent()
        };
        // rejection sampling against existing bboxes, template fully inside
        let mut placed = false;
        for _try in 0..100 {
            let px = rng.gen_range(-x0..config.width as i32 - x1);
            let py = rng.gen_range(-y0..config.height as i32 - y1);
            let candidate = BBox::new(
                px as f64 + (x0 + x1 + 1) as f64 / 2.0,
                py as f64 + (y0 + y1 + 1) as f64 / 2.0,
                (x1 - x0 + 1) as f64,
                (y1 - y0 + 1) as f64,
            );
            let sep = config.min_separation;
            let inflated = BBox::new(candidate.cx, candidate.cy, candidate.w + sep, candidate.h + sep);
            if annotations.iter().any(|a| a.box_.intersection_area(&inflated) > 0.0) {
                continue;
            }
            let (next, mut ann) = inject(&cube, &template, &spectra, (px, py))?;
            ann.instance_id = instance_id;
            cube = next;
            let mask = masks
                .iter_mut()
                .find(|m| m.class_id == class.class_id)
                .expect("class mask");
            for &(dx, dy) in &template.offsets {
                let (x, y) = ((px + dx) as usize, (py + dy) as usize);
                mask.bits[y * config.width + x] = true;
            }
            annotations.push(ann);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::OverlapRejected { tries: 100 });
        }
    }
    Ok(SynthImage { image_id, cube, annotations, masks })
}

/// Synthesize the full dataset into `out_dir`. Rerun with the same seed is
/// byte-identical; images are generated in parallel but each owns an rng
/// stream derived from (seed, image_index) so parallelism never changes
/// output.
pub fn generate_dataset(config: &DatasetConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // endmember baselines are dataset-wide, from a dedicated stream
    let mut em_rng = ChaCha12Rng::seed_from_u64(image_seed(config.seed, u64::MAX));
    let names = config.endmember_names();
    let baselines: Vec<Vec<f64>> = names
        .iter()
        .map(|_| {
            let m_t = em_rng.gen_range(config.m_t_range.0..=config.m_t_range.1);
            synth_endmember_baseline(config.bands, m_t, &mut em_rng)
        })
        .collect();

    use rayon::prelude::*;
    let mut images: Vec<SynthImage> = (0..config.images)
        .into_par_iter()
        .map(|i| synth_image(config, &baselines, i))
        .collect::<Result<Vec<_>>>()?;
    images.sort_by_key(|im| im.image_id);

    let mut set = AnnotationSet {
        images: Vec::new(),
        categories: config
            .classes
            .iter()
            .map(|c| CategoryEntry { id: c.class_id, name: c.name.clone() })
            .collect(),
        annotations: Vec::new(),
    };
    let mut manifest_images = Vec::new();
    for im in &images {
        let cube_name = format!("img_{:04}.hsc", im.image_id);
        hsicube::write_cube(&im.cube, out_dir.join(&cube_name))?;
        let mut mask_names = Vec::new();
        for mask in &im.masks {
            let mask_name = format!("mask_{:04}_c{}.hsc", im.image_id, mask.class_id);
            hsicube::write_mask(mask, out_dir.join(&mask_name))?;
            mask_names.push(mask_name);
        }
        set.images.push(ImageEntry {
            id: im.image_id,
            file: cube_name.clone(),
            height: im.cube.height(),
            width: im.cube.width(),
        });
        for ann in &im.annotations {
            set.annotations.push(AnnotationEntry {
                image_id: im.image_id,
                instance_id: ann.instance_id,
                category_id: ann.class_id,
                bbox: [ann.box_.cx, ann.box_.cy, ann.box_.w, ann.box_.h],
            });
        }
        manifest_images.push(ManifestImage {
            image_id: im.image_id,
            cube: cube_name,
            masks: mask_names,
            objects: im.annotations.len(),
            seed: image_seed(config.seed, im.image_id as u64),
        });
    }
    hsicube::write_annotations(&set, out_dir.join("annotations.json"))?;
    let mut endmember_files = Vec::new();
    for (name, baseline) in names.iter().zip(&baselines) {
        let file = format!("endmember_{name}.csv");
        let spectrum = crate::specmodel::EndmemberSpectrum {
            name: name.clone(),
            reflectance: None,
            radiance_baseline: baseline.clone(),
        };
        crate::specmodel::write_endmember_csv(&spectrum, None, out_dir.join(&file))?;
        endmember_files.push(file);
    }
    let manifest = Manifest {
        name: config.name.clone(),
        seed: config.seed,
        annotations: "annotations.json".into(),
        endmembers: endmember_files,
        images: manifest_images,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::json(out_dir.join("manifest.json"), e))?;
    fs::write(out_dir.join("manifest.json"), text)
        .map_err(|e| Error::io(out_dir.join("manifest.json"), e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::mask_to_objects;

    fn single_spec(pixels: (usize, usize)) -> ObjectClassSpec {
        ObjectClassSpec {
            class_id: 0,
            name: "c0".into(),
            kind: TemplateKind::Single,
            endmembers: vec!["em0".into()],
            pixel_range: pixels,
            max_abundance_range: (0.95, 1.0),
            mixed_abundance_range: (0.1, 1.0),
        }
    }

    // independent connectivity check, 4-neighborhood
    fn flood_connected(offsets: &[(i32, i32)]) -> bool {
        let set: BTreeSet<(i32, i32)> = offsets.iter().copied().collect();
        let mut seen = BTreeSet::new();
        let mut stack = vec![offsets[0]];
        seen.insert(offsets[0]);
        while let Some((x, y)) = stack.pop() {
            for n in [(x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)] {
                if set.contains(&n) && seen.insert(n) {
                    stack.push(n);
                }
            }
        }
        seen.len() == offsets.len()
    }

    #[test]
    fn singleton_template() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert_eq!(grow_template(1, &mut rng), vec![(0, 0)]);
    }

    #[test]
    fn grown_templates_are_connected() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for n in [3usize, 5, 11, 16] {
            for _ in 0..20 {
                let offsets = grow_template(n, &mut rng);
                assert_eq!(offsets.len(), n);
                assert!(flood_connected(&offsets));
            }
        }
    }

    #[test]
    fn grow_template_deterministic_per_seed() {
        let a = grow_template(12, &mut ChaCha12Rng::seed_from_u64(42));
        let b = grow_template(12, &mut ChaCha12Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn single_pixel_abundance_range() {
        // C1-style: 1 pixel, all mixed, max abundance in [0.05, 0.2]
        let spec = ObjectClassSpec {
            max_abundance_range: (0.05, 0.2),
            mixed_abundance_range: (0.01, 1.0),
            pixel_range: (1, 1),
            ..single_spec((1, 1))
        };
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t = assign_abundances(&[(0, 0)], &spec, &mut rng).unwrap();
            let a = t.object_abundance(0);
            assert!((0.05..=0.2).contains(&a), "abundance {a}");
        }
    }

    #[test]
    fn solid_square_center_is_pure() {
        let offsets: Vec<(i32, i32)> =
            (0..3).flat_map(|y| (0..3).map(move |x| (x, y))).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let t = assign_abundances(&offsets, &single_spec((9, 9)), &mut rng).unwrap();
        let center = offsets.iter().position(|&o| o == (1, 1)).unwrap();
        assert_eq!(t.object_abundance(center), 1.0);
        // boundary pixels are mixed: strictly below 1 almost surely
        for (i, &o) in offsets.iter().enumerate() {
            if o != (1, 1) {
                assert!(t.object_abundance(i) <= 1.0);
            }
        }
    }

    #[test]
    fn hybrid_split_sums_to_object_abundance() {
        let spec = ObjectClassSpec {
            kind: TemplateKind::Hybrid,
            endmembers: vec!["a".into(), "b".into()],
            ..single_spec((4, 4))
        };
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let offsets = grow_template(4, &mut rng);
        let t = assign_abundances(&offsets, &spec, &mut rng).unwrap();
        for row in &t.abundances {
            assert_eq!(row.len(), 2);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        // per pixel the split sums back to the object abundance
        for i in 0..t.offsets.len() {
            let total: f64 = t.abundances[i].iter().sum();
            assert!(total > 0.0 && total <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn combined_pixels_have_one_endmember() {
        let spec = ObjectClassSpec {
            kind: TemplateKind::Combined,
            endmembers: vec!["a".into(), "b".into(), "c".into()],
            ..single_spec((11, 11))
        };
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let offsets = grow_template(11, &mut rng);
        let t = assign_abundances(&offsets, &spec, &mut rng).unwrap();
        for row in &t.abundances {
            assert_eq!(row.iter().filter(|&&v| v > 0.0).count(), 1);
        }
    }

    #[test]
    fn abundance_monotone_with_centroid_distance() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..30 {
            let offsets = grow_template(8, &mut rng);
            let t = assign_abundances(&offsets, &single_spec((8, 8)), &mut rng).unwrap();
            let set: BTreeSet<(i32, i32)> = offsets.iter().copied().collect();
            let (cx, cy) = centroid(&offsets);
            let mut mixed: Vec<(f64, f64)> = offsets
                .iter()
                .enumerate()
                .filter(|(_, &p)| !is_interior(p, &set))
                .map(|(i, &p)| {
                    let d = ((p.0 as f64 - cx).powi(2) + (p.1 as f64 - cy).powi(2)).sqrt();
                    (d, t.object_abundance(i))
                })
                .collect();
            mixed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for pair in mixed.windows(2) {
                if pair[0].0 < pair[1].0 {
                    assert!(pair[0].1 >= pair[1].1 - 1e-12);
                }
            }
        }
    }

    #[test]
    fn inject_full_abundance_equals_endmember() {
        let cube = HyperCube::new(4, 4, 2, vec![100.0; 32], None, Unit::Radiance).unwrap();
        let template = ObjectTemplate {
            offsets: vec![(0, 0)],
            abundances: vec![vec![1.0]],
            class_id: 0,
        };
        let (out, ann) = inject(&cube, &template, &[vec![300.0, 400.0]], (2, 1)).unwrap();
        assert_eq!(out.sample(2, 1, 0), 300.0);
        assert_eq!(out.sample(2, 1, 1), 400.0);
        assert_eq!(ann.box_, BBox::new(2.5, 1.5, 1.0, 1.0));
        // untouched elsewhere, input not mutated
        assert_eq!(out.sample(0, 0, 0), 100.0);
        assert_eq!(cube.sample(2, 1, 0), 100.0);
    }

    #[test]
    fn inject_zero_abundance_is_identity() {
        let cube = HyperCube::new(2, 2, 1, vec![7.0; 4], None, Unit::Radiance).unwrap();
        let template = ObjectTemplate {
            offsets: vec![(0, 0)],
            abundances: vec![vec![0.0]],
            class_id: 0,
        };
        let (out, _) = inject(&cube, &template, &[vec![900.0]], (0, 0)).unwrap();
        assert_eq!(out, cube);
    }

    #[test]
    fn inject_convex_combination() {
        let cube = HyperCube::new(1, 1, 1, vec![100.0], None, Unit::Radiance).unwrap();
        let template = ObjectTemplate {
            offsets: vec![(0, 0)],
            abundances: vec![vec![0.5]],
            class_id: 0,
        };
        let (out, _) = inject(&cube, &template, &[vec![300.0]], (0, 0)).unwrap();
        assert_eq!(out.sample(0, 0, 0), 200.0);
    }

    #[test]
    fn inject_out_of_bounds() {
        let cube = HyperCube::new(2, 2, 1, vec![0.0; 4], None, Unit::Radiance).unwrap();
        let template = ObjectTemplate {
            offsets: vec![(0, 0), (1, 0)],
            abundances: vec![vec![1.0], vec![1.0]],
            class_id: 0,
        };
        assert!(matches!(
            inject(&cube, &template, &[vec![1.0]], (1, 0)),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn background_constant_when_unfluctuated_single_class() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let cube = synth_background(4, 4, 3, 1, 0.0, &mut rng);
        for b in 0..3 {
            let first = cube.sample(0, 0, b);
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(cube.sample(x, y, b), first);
                }
            }
        }
    }

    #[test]
    fn background_deterministic_per_seed() {
        let a = synth_background(8, 8, 4, 3, 1.0, &mut ChaCha12Rng::seed_from_u64(5));
        let b = synth_background(8, 8, 4, 3, 1.0, &mut ChaCha12Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    fn mini_config(images: usize, objects: (usize, usize)) -> DatasetConfig {
        DatasetConfig {
            name: "mini".into(),
            images,
            height: 24,
            width: 24,
            bands: 6,
            objects_per_image: objects,
            background_classes: 2,
            background_fluctuation: 1.0,
            min_separation: 0.0,
            seed: 99,
            m_t_range: (2000.0, 3000.0),
            object_gamma: 0.05,
            object_sigma_a: 0.6,
            object_sigma_v: 0.8,
            classes: vec![
                single_spec((2, 4)),
                ObjectClassSpec {
                    class_id: 1,
                    name: "c1".into(),
                    endmembers: vec!["em1".into()],
                    ..single_spec((1, 2))
                },
            ],
        }
    }

    #[test]
    fn dataset_round_trips_and_is_deterministic() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let config = mini_config(3, (1, 5));
        let m1 = generate_dataset(&config, dir1.path()).unwrap();
        let m2 = generate_dataset(&config, dir2.path()).unwrap();
        assert_eq!(m1, m2);
        for im in &m1.images {
            let b1 = std::fs::read(dir1.path().join(&im.cube)).unwrap();
            let b2 = std::fs::read(dir2.path().join(&im.cube)).unwrap();
            assert_eq!(b1, b2, "cube bytes differ for {}", im.cube);
            assert!((1..=20).contains(&im.objects.max(1)));
        }
        let set = hsicube::read_annotations(dir1.path().join(&m1.annotations)).unwrap();
        assert_eq!(set.images.len(), 3);
    }

    #[test]
    fn zero_object_recipe_leaves_background() {
        let dir = tempfile::tempdir().unwrap();
        let config = mini_config(2, (0, 0));
        let manifest = generate_dataset(&config, dir.path()).unwrap();
        assert!(manifest.images.iter().all(|im| im.objects == 0));
        let set = hsicube::read_annotations(dir.path().join("annotations.json")).unwrap();
        assert!(set.annotations.is_empty());
        // background-only image must equal a fresh background synthesis
        let mut rng = ChaCha12Rng::seed_from_u64(image_seed(config.seed, 0));
        let bg = synth_background(24, 24, 6, 2, 1.0, &mut rng);
        let written = hsicube::read_cube(dir.path().join(&manifest.images[0].cube)).unwrap();
        assert_eq!(bg, written);
    }

    #[test]
    fn annotations_round_trip_with_mask_components() {
        let dir = tempfile::tempdir().unwrap();
        let config = mini_config(4, (1, 6));
        let manifest = generate_dataset(&config, dir.path()).unwrap();
        let set = hsicube::read_annotations(dir.path().join("annotations.json")).unwrap();
        for im in &manifest.images {
            let mut expected: Vec<[f64; 4]> = set
                .annotations_for(im.image_id)
                .iter()
                .map(|a| [a.box_.cx, a.box_.cy, a.box_.w, a.box_.h])
                .collect();
            let mut recovered = Vec::new();
            for mask_name in &im.masks {
                let mask = hsicube::read_mask(dir.path().join(mask_name)).unwrap();
                for ann in mask_to_objects(&mask) {
                    recovered.push([ann.box_.cx, ann.box_.cy, ann.box_.w, ann.box_.h]);
                }
            }
            let key = |b: &[f64; 4]| (b[0] * 1000.0) as i64 * 100_000 + (b[1] * 1000.0) as i64;
            expected.sort_by_key(key);
            recovered.sort_by_key(key);
            assert_eq!(expected, recovered, "image {}", im.image_id);
        }
    }
}
