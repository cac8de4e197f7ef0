//! Procedural two-domain detection scenes and the weak/strong augmentation
//! operators used by the mean-teacher recipe.
//!
//! A scene is a single-channel grid with a handful of soft-edged elliptical
//! blobs on a flat background. Class 0 blobs are round, class 1 blobs are
//! horizontal bars. Target-domain scenes are rendered from the same
//! distribution and then pushed through a [`DomainGapConfig`].

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub const NUM_CLASSES: usize = 2;

/// Row-major `H x W x C` pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.pixels[self.index(row, col, ch)]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }

    fn hflip(&self) -> Image {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                for ch in 0..self.channels {
                    let dst = out.index(r, c, ch);
                    out.pixels[dst] = self.get(r, self.width - 1 - c, ch);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: Image,
    pub objects: Vec<GroundTruthObject>,
    pub domain: Domain,
    pub sample_id: u64,
}

impl SceneSample {
    /// Drops the labels. This is the only form in which target-domain
    /// training data reaches the trainer.
    pub fn strip_labels(&self) -> UnlabeledScene {
        UnlabeledScene {
            image: self.image.clone(),
            sample_id: self.sample_id,
        }
    }
}

/// A scene with no access to its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledScene {
    pub image: Image,
    pub sample_id: u64,
}

/// Appearance shift applied to target-domain scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainGapConfig {
    pub intensity_inversion: bool,
    pub contrast_scale: f64,
    pub noise_sigma: f64,
    /// Fraction of the blob surface texture removed.
    pub texture_drop: f64,
}

impl Default for DomainGapConfig {
    fn default() -> Self {
        Self {
            intensity_inversion: true,
            contrast_scale: 0.7,
            noise_sigma: 0.05,
            texture_drop: 0.2,
        }
    }
}

impl DomainGapConfig {
    pub fn neutral() -> Self {
        Self {
            intensity_inversion: false,
            contrast_scale: 1.0,
            noise_sigma: 0.0,
            texture_drop: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.contrast_scale > 0.0 && self.contrast_scale.is_finite()) {
            return Err(Error::config("contrast_scale must be > 0"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.texture_drop) {
            return Err(Error::config("texture_drop must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Scene layout and object appearance ranges. Ranges are inclusive `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneGeometry {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Diameter of class-0 (round) blobs.
    pub round_size: [f64; 2],
    /// Length of class-1 (bar) blobs.
    pub bar_length: [f64; 2],
    /// Thickness of class-1 (bar) blobs.
    pub bar_thickness: [f64; 2],
    pub background: [f64; 2],
    pub amplitude: [f64; 2],
    /// Probability that a blob is darker than the background.
    pub dark_fraction: f64,
    /// Amplitude of the stripe texture on blob surfaces.
    pub texture_amplitude: f64,
    /// Width of the soft edge, in units of the blob radius.
    pub edge_softness: f64,
    /// Minimum gap in pixels between object boxes.
    pub min_gap: f64,
}

impl Default for SceneGeometry {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            min_objects: 2,
            max_objects: 5,
            round_size: [4.0, 6.0],
            bar_length: [8.0, 10.0],
            bar_thickness: [3.0, 4.0],
            background: [0.35, 0.55],
            amplitude: [0.35, 0.45],
            dark_fraction: 0.25,
            texture_amplitude: 0.08,
            edge_softness: 0.15,
            min_gap: 1.0,
        }
    }
}

impl SceneGeometry {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("round_size", self.round_size),
            ("bar_length", self.bar_length),
            ("bar_thickness", self.bar_thickness),
            ("background", self.background),
            ("amplitude", self.amplitude),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config(format!("{name}: invalid range [{lo}, {hi}]")));
            }
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("scene must be non-empty"));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::config("min_objects exceeds max_objects"));
        }
        if self.round_size[0] <= 0.0 || self.bar_length[0] <= 0.0 || self.bar_thickness[0] <= 0.0 {
            return Err(Error::config("object sizes must be positive"));
        }
        let widest = self.round_size[1].max(self.bar_length[1]);
        let tallest = self.round_size[1].max(self.bar_thickness[1]);
        if widest >= self.width as f64 || tallest >= self.height as f64 {
            return Err(Error::config(format!(
                "objects up to {widest}x{tallest} do not fit a {}x{} scene",
                self.width, self.height
            )));
        }
        if !(0.0..=1.0).contains(&self.dark_fraction) {
            return Err(Error::config("dark_fraction must lie in [0, 1]"));
        }
        if !(self.edge_softness > 0.0) || self.min_gap < 0.0 || self.texture_amplitude < 0.0 {
            return Err(Error::config("edge_softness must be > 0, min_gap and texture >= 0"));
        }
        Ok(())
    }
}

struct Blob {
    bbox: BBox,
    amplitude: f64,
    texture_phase: f64,
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn separated(a: &BBox, b: &BBox, gap: f64) -> bool {
    a.x2() + gap <= b.x1() || b.x2() + gap <= a.x1() || a.y2() + gap <= b.y1() || b.y2() + gap <= a.y1()
}

/// Renders one scene. Randomness depends only on `(seed, sample_id)`;
/// the domain decides whether `gap` is applied.
pub fn render_scene(
    seed: u64,
    sample_id: u64,
    domain: Domain,
    gap: &DomainGapConfig,
    geometry: &SceneGeometry,
) -> Result<SceneSample> {
    geometry.validate()?;
    gap.validate()?;
    let mut rng = rng::stream(seed, Purpose::Scene, sample_id);
    let (h, w) = (geometry.height, geometry.width);

    let n_objects = rng.random_range(geometry.min_objects..=geometry.max_objects);
    let mut blobs: Vec<Blob> = Vec::with_capacity(n_objects);
    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let class_id = rng.random_range(0..NUM_CLASSES);
        let (bw, bh) = if class_id == 0 {
            let d = uniform(&mut rng, geometry.round_size);
            (d, d)
        } else {
            (uniform(&mut rng, geometry.bar_length), uniform(&mut rng, geometry.bar_thickness))
        };
        let amplitude = uniform(&mut rng, geometry.amplitude);
        let dark = rng.random_bool(geometry.dark_fraction);
        let texture_phase = rng.random_range(0.0..2.0 * PI);
        let mut placed = None;
        for _ in 0..64 {
            let cx = rng.random_range(0.5 * bw..=(w as f64 - 0.5 * bw));
            let cy = rng.random_range(0.5 * bh..=(h as f64 - 0.5 * bh));
            let cand = BBox::new(cx, cy, bw, bh);
            if blobs.iter().all(|b| separated(&b.bbox, &cand, geometry.min_gap)) {
                placed = Some(cand);
                break;
            }
        }
        if let Some(bbox) = placed {
            objects.push(GroundTruthObject { class_id, bbox });
            blobs.push(Blob {
                bbox,
                amplitude: if dark { -amplitude } else { amplitude },
                texture_phase,
            });
        }
    }
    let background = uniform(&mut rng, geometry.background);

    let (texture_scale, contrast, sigma, invert) = match domain {
        Domain::Source => (1.0, 1.0, 0.0, false),
        Domain::Target => (
            1.0 - gap.texture_drop,
            gap.contrast_scale,
            gap.noise_sigma,
            gap.intensity_inversion,
        ),
    };
    let noise = if sigma > 0.0 {
        Some(Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?)
    } else {
        None
    };

    let mut image = Image::filled(h, w, 1, 0.0);
    for r in 0..h {
        for c in 0..w {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let mut v = background;
            for blob in &blobs {
                let dx = (x - blob.bbox.cx) / (0.5 * blob.bbox.w);
                let dy = (y - blob.bbox.cy) / (0.5 * blob.bbox.h);
                let rho = (dx * dx + dy * dy).sqrt();
                let mask = 1.0 / (1.0 + ((rho - 1.0) / geometry.edge_softness).exp());
                let stripes = geometry.texture_amplitude
                    * texture_scale
                    * (2.0 * PI * x / 3.0 + blob.texture_phase).sin();
                v += mask * (blob.amplitude + stripes);
            }
            if contrast != 1.0 {
                v = 0.5 + contrast * (v - 0.5);
            }
            if let Some(dist) = &noise {
                v += dist.sample(&mut rng);
            }
            let mut p = (v as f32).clamp(0.0, 1.0);
            if invert {
                p = 1.0 - p;
            }
            let idx = image.index(r, c, 0);
            image.pixels[idx] = p;
        }
    }

    Ok(SceneSample {
        image,
        objects,
        domain,
        sample_id,
    })
}

/// Renders `count` consecutive sample ids starting at `first_id`.
pub fn generate_split(
    seed: u64,
    domain: Domain,
    first_id: u64,
    count: usize,
    gap: &DomainGapConfig,
    geometry: &SceneGeometry,
) -> Result<Vec<SceneSample>> {
    (0..count as u64)
        .map(|k| render_scene(seed, first_id + k, domain, gap, geometry))
        .collect()
}

/// Source samples take ids `0..n_source`, target samples the next
/// `n_target` ids, so the two lists never share an id.
pub fn generate_dataset(
    seed: u64,
    n_source: usize,
    n_target: usize,
    gap: &DomainGapConfig,
    geometry: &SceneGeometry,
) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    if n_source == 0 || n_target == 0 {
        return Err(Error::config("n_source and n_target must be >= 1"));
    }
    let source = generate_split(seed, Domain::Source, 0, n_source, gap, geometry)?;
    let target = generate_split(seed, Domain::Target, n_source as u64, n_target, gap, geometry)?;
    Ok((source, target))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub weak_noise: f64,
    pub strong_noise: f64,
    /// Upper bound on the cutout patch area as a fraction of the scene.
    pub cutout_max_fraction: f64,
    /// Contrast factor drawn from `[1 - j, 1 + j]`.
    pub contrast_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            weak_noise: 0.02,
            strong_noise: 0.08,
            cutout_max_fraction: 0.25,
            contrast_jitter: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            weak_noise: 0.0,
            strong_noise: 0.0,
            cutout_max_fraction: 0.0,
            contrast_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.flip_prob)
            && self.weak_noise >= 0.0
            && self.strong_noise >= 0.0
            && (0.0..=1.0).contains(&self.cutout_max_fraction)
            && (0.0..1.0).contains(&self.contrast_jitter);
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid augmentation settings: {self:?}")))
        }
    }
}

/// Axis-aligned pixel rectangle `[row0, row1) x [col0, col1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

pub fn apply_cutout(image: &mut Image, rect: PixelRect) {
    for r in rect.row0..rect.row1.min(image.height) {
        for c in rect.col0..rect.col1.min(image.width) {
            for ch in 0..image.channels {
                let idx = image.index(r, c, ch);
                image.pixels[idx] = 0.0;
            }
        }
    }
}

fn add_noise(image: &mut Image, sigma: f64, rng: &mut impl Rng) {
    if sigma <= 0.0 {
        return;
    }
    let dist = Normal::new(0.0, sigma).expect("sigma validated");
    for p in image.pixels.iter_mut() {
        *p = (*p as f64 + dist.sample(rng)).clamp(0.0, 1.0) as f32;
    }
}

pub fn flip_objects(objects: &[GroundTruthObject], width: usize) -> Vec<GroundTruthObject> {
    objects
        .iter()
        .map(|o| GroundTruthObject {
            class_id: o.class_id,
            bbox: o.bbox.hflip(width as f64),
        })
        .collect()
}

/// Draws the shared flip decision for a view pair.
pub fn draw_flip(cfg: &AugmentConfig, rng: &mut impl Rng) -> bool {
    cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob)
}

pub fn maybe_flip(image: &Image, flip: bool) -> Image {
    if flip {
        image.hflip()
    } else {
        image.clone()
    }
}

/// Weak photometric part: additive Gaussian noise.
pub fn weak_photometric(image: &mut Image, cfg: &AugmentConfig, rng: &mut impl Rng) {
    add_noise(image, cfg.weak_noise, rng);
}

/// Strong photometric part: contrast jitter, heavier noise, cutout.
pub fn strong_photometric(image: &mut Image, cfg: &AugmentConfig, rng: &mut impl Rng) {
    if cfg.contrast_jitter > 0.0 {
        let factor = rng.random_range(1.0 - cfg.contrast_jitter..=1.0 + cfg.contrast_jitter);
        for p in image.pixels.iter_mut() {
            *p = (0.5 + factor * (*p as f64 - 0.5)).clamp(0.0, 1.0) as f32;
        }
    }
    add_noise(image, cfg.strong_noise, rng);
    if cfg.cutout_max_fraction > 0.0 {
        let side = cfg.cutout_max_fraction.sqrt();
        let ph = ((rng.random_range(0.0..=side) * image.height as f64).floor() as usize).min(image.height);
        let pw = ((rng.random_range(0.0..=side) * image.width as f64).floor() as usize).min(image.width);
        let row0 = rng.random_range(0..=image.height - ph);
        let col0 = rng.random_range(0..=image.width - pw);
        apply_cutout(
            image,
            PixelRect {
                row0,
                row1: row0 + ph,
                col0,
                col1: col0 + pw,
            },
        );
    }
}

/// Horizontal flip with probability `flip_prob`, then weak noise.
pub fn weak_augment(s: &SceneSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> SceneSample {
    let flip = draw_flip(cfg, rng);
    let mut image = maybe_flip(&s.image, flip);
    weak_photometric(&mut image, cfg, rng);
    SceneSample {
        image,
        objects: if flip { flip_objects(&s.objects, s.image.width) } else { s.objects.clone() },
        domain: s.domain,
        sample_id: s.sample_id,
    }
}

/// Horizontal flip, contrast jitter, strong noise and a random cutout.
pub fn strong_augment(s: &SceneSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> SceneSample {
    let flip = draw_flip(cfg, rng);
    let mut image = maybe_flip(&s.image, flip);
    strong_photometric(&mut image, cfg, rng);
    SceneSample {
        image,
        objects: if flip { flip_objects(&s.objects, s.image.width) } else { s.objects.clone() },
        domain: s.domain,
        sample_id: s.sample_id,
    }
}

// ---------------------------------------------------------------------------
// On-disk dataset format

const SCENE_MAGIC: &[u8; 4] = b"SCN1";
const SCENE_HEADER_LEN: usize = 16;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneSidecar {
    sample_id: u64,
    domain: Domain,
    objects: Vec<GroundTruthObject>,
}

pub fn encode_pixels(image: &Image) -> Result<Vec<u8>> {
    let dim = |v: usize, name: &str| {
        u16::try_from(v).map_err(|_| Error::Format(format!("{name} {v} exceeds u16")))
    };
    let mut bytes = Vec::with_capacity(SCENE_HEADER_LEN + 4 * image.pixels.len());
    bytes.extend_from_slice(SCENE_MAGIC);
    bytes.extend_from_slice(&dim(image.height, "height")?.to_le_bytes());
    bytes.extend_from_slice(&dim(image.width, "width")?.to_le_bytes());
    bytes.extend_from_slice(&dim(image.channels, "channels")?.to_le_bytes());
    bytes.resize(SCENE_HEADER_LEN, 0);
    for p in &image.pixels {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    Ok(bytes)
}

pub fn decode_pixels(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < SCENE_HEADER_LEN || &bytes[..4] != SCENE_MAGIC {
        return Err(Error::Format("missing SCN1 header".into()));
    }
    let read_u16 = |at: usize| u16::from_le_bytes([bytes[at], bytes[at + 1]]) as usize;
    let (height, width, channels) = (read_u16(4), read_u16(6), read_u16(8));
    let n = height * width * channels;
    let body = &bytes[SCENE_HEADER_LEN..];
    if body.len() != 4 * n {
        return Err(Error::Format(format!(
            "expected {} pixel bytes, found {}",
            4 * n,
            body.len()
        )));
    }
    let pixels = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Image {
        height,
        width,
        channels,
        pixels,
    })
}

fn scene_stem(id: u64) -> String {
    format!("scene_{id:06}")
}

/// Writes one `.scn` pixel file and one `.json` sidecar per sample.
pub fn dump_dataset(dir: &Path, samples: &[SceneSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in samples {
        let stem = scene_stem(s.sample_id);
        fs::write(dir.join(format!("{stem}.scn")), encode_pixels(&s.image)?)?;
        let sidecar = SceneSidecar {
            sample_id: s.sample_id,
            domain: s.domain,
            objects: s.objects.clone(),
        };
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&sidecar)?)?;
    }
    Ok(())
}

/// Loads every sample in `dir`, ordered by sample id.
pub fn load_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "scn") {
            stems.push(path.with_extension(""));
        }
    }
    stems.sort();
    let mut samples = Vec::with_capacity(stems.len());
    for stem in stems {
        let image = decode_pixels(&fs::read(stem.with_extension("scn"))?)?;
        let sidecar: SceneSidecar = serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?;
        samples.push(SceneSample {
            image,
            objects: sidecar.objects,
            domain: sidecar.domain,
            sample_id: sidecar.sample_id,
        });
    }
    samples.sort_by_key(|s| s.sample_id);
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> SceneGeometry {
        SceneGeometry::default()
    }

    #[test]
    fn dataset_ids_are_disjoint_and_ordered() {
        let (src, tgt) = generate_dataset(7, 2, 2, &DomainGapConfig::neutral(), &geom()).unwrap();
        assert_eq!(src.iter().map(|s| s.sample_id).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(tgt.iter().map(|s| s.sample_id).collect::<Vec<_>>(), vec![2, 3]);
        assert!(src.iter().all(|s| s.domain == Domain::Source));
        assert!(tgt.iter().all(|s| s.domain == Domain::Target));
    }

    #[test]
    fn neutral_gap_renders_domains_identically() {
        let gap = DomainGapConfig::neutral();
        for id in 0..4 {
            let a = render_scene(7, id, Domain::Source, &gap, &geom()).unwrap();
            let b = render_scene(7, id, Domain::Target, &gap, &geom()).unwrap();
            assert_eq!(a.image, b.image);
            assert_eq!(a.objects, b.objects);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let gap = DomainGapConfig::default();
        let a = generate_dataset(11, 5, 5, &gap, &geom()).unwrap();
        let b = generate_dataset(11, 5, 5, &gap, &geom()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inversion_mirrors_mean_intensity() {
        let inverted = DomainGapConfig::default();
        let upright = DomainGapConfig {
            intensity_inversion: false,
            ..inverted
        };
        let (_, tgt_inv) = generate_dataset(7, 2, 6, &inverted, &geom()).unwrap();
        let (_, tgt_up) = generate_dataset(7, 2, 6, &upright, &geom()).unwrap();
        for (a, b) in tgt_inv.iter().zip(&tgt_up) {
            assert!((a.image.mean() - (1.0 - b.image.mean())).abs() < 1e-6);
            assert_eq!(a.objects, b.objects);
        }
    }

    #[test]
    fn samples_respect_invariants() {
        let (src, tgt) = generate_dataset(3, 40, 40, &DomainGapConfig::default(), &geom()).unwrap();
        for s in src.iter().chain(&tgt) {
            assert!(s.image.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
            for (i, o) in s.objects.iter().enumerate() {
                assert!(o.class_id < NUM_CLASSES);
                assert!(o.bbox.inside_scene(32.0, 32.0), "{:?}", o.bbox);
                for other in &s.objects[i + 1..] {
                    assert_ne!(o.bbox, other.bbox);
                }
            }
        }
    }

    #[test]
    fn neutral_domains_have_matching_means() {
        let (src, tgt) = generate_dataset(5, 150, 150, &DomainGapConfig::neutral(), &geom()).unwrap();
        let mean = |v: &[SceneSample]| v.iter().map(|s| s.image.mean()).sum::<f64>() / v.len() as f64;
        assert!((mean(&src) - mean(&tgt)).abs() < 0.01);
    }

    #[test]
    fn oversized_geometry_is_rejected() {
        let g = SceneGeometry {
            bar_length: [8.0, 40.0],
            ..geom()
        };
        assert!(matches!(
            generate_dataset(1, 1, 1, &DomainGapConfig::neutral(), &g),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_counts_are_rejected() {
        assert!(generate_dataset(1, 0, 1, &DomainGapConfig::neutral(), &geom()).is_err());
    }

    fn sample() -> SceneSample {
        render_scene(7, 0, Domain::Source, &DomainGapConfig::neutral(), &geom()).unwrap()
    }

    #[test]
    fn zero_magnitude_augmentations_are_identity() {
        let s = sample();
        let cfg = AugmentConfig::identity();
        let mut rng = rng::stream(1, Purpose::Flip, 0);
        assert_eq!(weak_augment(&s, &cfg, &mut rng), s);
        assert_eq!(strong_augment(&s, &cfg, &mut rng), s);
    }

    #[test]
    fn forced_flip_mirrors_boxes() {
        let mut s = sample();
        s.objects = vec![GroundTruthObject {
            class_id: 1,
            bbox: BBox::new(10.0, 5.0, 4.0, 4.0),
        }];
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            ..AugmentConfig::identity()
        };
        let out = weak_augment(&s, &cfg, &mut rng::stream(1, Purpose::Flip, 0));
        assert_eq!(out.objects[0].bbox, BBox::new(22.0, 5.0, 4.0, 4.0));
        assert_eq!(out.objects[0].class_id, 1);
        assert_eq!(out.image.get(3, 0, 0), s.image.get(3, 31, 0));
    }

    #[test]
    fn augmentation_is_stream_deterministic() {
        let s = sample();
        let cfg = AugmentConfig::default();
        let a = strong_augment(&s, &cfg, &mut rng::stream(9, Purpose::StrongPhotometric, 4));
        let b = strong_augment(&s, &cfg, &mut rng::stream(9, Purpose::StrongPhotometric, 4));
        assert_eq!(a, b);
        let c = weak_augment(&s, &cfg, &mut rng::stream(9, Purpose::WeakPhotometric, 4));
        let d = weak_augment(&s, &cfg, &mut rng::stream(9, Purpose::WeakPhotometric, 4));
        assert_eq!(c, d);
    }

    #[test]
    fn full_cutout_zeroes_everything_keeps_boxes() {
        let s = sample();
        let mut image = s.image.clone();
        apply_cutout(
            &mut image,
            PixelRect {
                row0: 0,
                row1: 32,
                col0: 0,
                col1: 32,
            },
        );
        assert!(image.pixels.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn augmentations_keep_boxes_inside() {
        let cfg = AugmentConfig::default();
        for id in 0..30 {
            let s = render_scene(2, id, Domain::Source, &DomainGapConfig::neutral(), &geom()).unwrap();
            let mut rng = rng::stream(2, Purpose::StrongPhotometric, id);
            for out in [weak_augment(&s, &cfg, &mut rng), strong_augment(&s, &cfg, &mut rng)] {
                assert_eq!(out.objects.len(), s.objects.len());
                for (o, orig) in out.objects.iter().zip(&s.objects) {
                    assert!(o.bbox.inside_scene(32.0, 32.0));
                    assert_eq!(o.class_id, orig.class_id);
                }
                assert!(out.image.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }

    #[test]
    fn pixel_file_round_trip_is_bit_exact() {
        let s = render_scene(4, 1, Domain::Target, &DomainGapConfig::default(), &geom()).unwrap();
        let bytes = encode_pixels(&s.image).unwrap();
        assert_eq!(&bytes[..4], b"SCN1");
        assert_eq!(bytes.len(), 16 + 4 * 32 * 32);
        let back = decode_pixels(&bytes).unwrap();
        assert_eq!(back.pixels.iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
                   s.image.pixels.iter().map(|p| p.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn corrupt_pixel_file_is_rejected() {
        assert!(decode_pixels(b"XXXX0000000000000000").is_err());
        let s = sample();
        let mut bytes = encode_pixels(&s.image).unwrap();
        bytes.pop();
        assert!(decode_pixels(&bytes).is_err());
    }
}
