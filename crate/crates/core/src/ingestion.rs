//! CT preprocessing, synthetic datasets and the on-disk dataset manifest.
//!
//! A dataset directory holds `manifest.json`, `images/*.png` (8-bit
//! grayscale, already windowed from Hounsfield units) and `masks/*.png`
//! (8-bit paletted, index = class id). DICOM/NIfTI volumes are converted to
//! this layout offline with [`window_hu`] before ingestion.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data_model::{GroundTruthMask, ImageSlice, Raster, ScanSlices};
use crate::error::{Error, Result};
use crate::png_io;
use crate::seed;

/// Preprocessing record stored in every manifest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    /// Hounsfield window `(low, high)` mapped onto `[0, 255]`.
    pub hu_window: (f64, f64),
    /// Target `(height, width)`.
    pub target_size: (usize, usize),
    /// `(mean, std)` applied to `x / 255`.
    pub normalization: (f64, f64),
}

impl Default for Preprocessing {
    fn default() -> Self {
        Preprocessing {
            hu_window: (-1000.0, 400.0),
            target_size: (352, 352),
            normalization: (0.485, 0.229),
        }
    }
}

impl Preprocessing {
    fn validate(&self) -> Result<()> {
        let (low, high) = self.hu_window;
        if !(low < high) {
            return Err(Error::invalid(format!("HU window low {low} must be below high {high}")));
        }
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return Err(Error::invalid("target size must be positive"));
        }
        if !(self.normalization.1 > 0.0) {
            return Err(Error::invalid("normalization std must be positive"));
        }
        Ok(())
    }
}

/// Clip to the HU window and map linearly onto `[0, 255]`, rounding to nearest.
pub fn window_hu(raw: &Raster<i32>, window: (f64, f64)) -> Result<Raster<u8>> {
    let (low, high) = window;
    if !(low < high) {
        return Err(Error::invalid(format!("HU window low {low} must be below high {high}")));
    }
    Ok(raw.map(|&hu| {
        let v = (hu as f64).clamp(low, high);
        ((v - low) / (high - low) * 255.0).round() as u8
    }))
}

/// Bilinear resampling with pixel-center alignment, rounded back to 8 bits.
pub fn resize_bilinear(img: &Raster<u8>, target: (usize, usize)) -> Raster<u8> {
    let (h0, w0) = img.shape();
    let (h, w) = target;
    if (h0, w0) == (h, w) {
        return img.clone();
    }
    let sy = h0 as f64 / h as f64;
    let sx = w0 as f64 / w as f64;
    let coord = |dst: usize, scale: f64, max: usize| {
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (max - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(max - 1);
        (i0, i1, s - i0 as f64)
    };
    Raster::from_fn(h, w, |r, c| {
        let (r0, r1, fy) = coord(r, sy, h0);
        let (c0, c1, fx) = coord(c, sx, w0);
        let p = |rr, cc| img.get(rr, cc) as f64;
        let top = p(r0, c0) * (1.0 - fx) + p(r0, c1) * fx;
        let bottom = p(r1, c0) * (1.0 - fx) + p(r1, c1) * fx;
        (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8
    })
}

/// `(x / 255 - mean) / std`.
pub fn normalize(img: &Raster<u8>, normalization: (f64, f64)) -> Raster<f64> {
    let (mean, std) = normalization;
    img.map(|&v| (v as f64 / 255.0 - mean) / std)
}

/// Window, resize and normalize one raw HU slice.
pub fn preprocess_slice(raw: &Raster<i32>, prep: &Preprocessing) -> Result<Raster<f64>> {
    Ok(normalize(&preprocess_to_u8(raw, prep)?, prep.normalization))
}

/// The 8-bit stage of [`preprocess_slice`]; this is what gets stored on disk.
pub fn preprocess_to_u8(raw: &Raster<i32>, prep: &Preprocessing) -> Result<Raster<u8>> {
    prep.validate()?;
    if raw.is_empty() {
        return Err(Error::invalid("empty slice"));
    }
    Ok(resize_bilinear(&window_hu(raw, prep.hu_window)?, prep.target_size))
}

fn resize_nearest(mask: &Raster<u8>, target: (usize, usize)) -> Raster<u8> {
    let (h0, w0) = mask.shape();
    let (h, w) = target;
    Raster::from_fn(h, w, |r, c| {
        let rr = (((r as f64 + 0.5) * h0 as f64 / h as f64).floor() as usize).min(h0 - 1);
        let cc = (((c as f64 + 0.5) * w0 as f64 / w as f64).floor() as usize).min(w0 - 1);
        mask.get(rr, cc)
    })
}

/// Nearest-neighbor resampling of a binary mask.
pub fn resize_mask(mask: &GroundTruthMask, target: (usize, usize)) -> Result<GroundTruthMask> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    GroundTruthMask::new(mask.image_id.clone(), resize_nearest(mask.classes(), target))
}

/// One slice of a materialized dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub image: ImageSlice,
    pub mask: Option<GroundTruthMask>,
    /// The 8-bit image the normalized pixels were derived from.
    pub stored: Raster<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub preprocessing: Preprocessing,
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&DatasetEntry> {
        self.entries.iter().find(|e| e.image.id == id)
    }

    /// Slice ids grouped by scan, ordered by slice index, scans in first-seen order.
    pub fn scans(&self) -> Vec<ScanSlices> {
        let mut scans: Vec<(String, Vec<(usize, String)>)> = Vec::new();
        for e in &self.entries {
            let slot = match scans.iter().position(|(s, _)| *s == e.image.scan_id) {
                Some(i) => i,
                None => {
                    scans.push((e.image.scan_id.clone(), Vec::new()));
                    scans.len() - 1
                }
            };
            scans[slot].1.push((e.image.slice_index, e.image.id.clone()));
        }
        scans
            .into_iter()
            .map(|(scan_id, mut v)| {
                v.sort();
                ScanSlices {
                    scan_id,
                    slice_ids: v.into_iter().map(|(_, id)| id).collect(),
                }
            })
            .collect()
    }
}

/// Parameters of the synthetic lesion generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_images: usize,
    pub size: (usize, usize),
    /// Expected number of lesions in an image that has any.
    pub infection_density: f64,
    pub background_fraction: f64,
    /// Semi-axis range in pixels.
    pub radius_range: (f64, f64),
    /// Lesion brightness above the surrounding tissue, as a fraction of full scale.
    pub contrast: f64,
    /// Gaussian noise std, as a fraction of full scale.
    pub noise: f64,
    /// Expected number of small bright non-infected structures per image.
    #[serde(default)]
    pub distractors: f64,
    /// Upper bound on lesions per image.
    #[serde(default)]
    pub max_lesions: Option<usize>,
    #[serde(default = "default_slices_per_scan")]
    pub slices_per_scan: usize,
    pub seed: u64,
}

fn default_slices_per_scan() -> usize {
    20
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_images: 200,
            size: (64, 64),
            infection_density: 1.5,
            background_fraction: 0.3,
            radius_range: (3.0, 8.0),
            contrast: 0.25,
            noise: 0.08,
            distractors: 0.0,
            max_lesions: None,
            slices_per_scan: 20,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        if h == 0 || w == 0 {
            return Err(Error::invalid("synthetic images must have positive size"));
        }
        if self.n_images == 0 {
            return Err(Error::invalid("synthetic dataset needs at least one image"));
        }
        if !(0.0..=1.0).contains(&self.background_fraction) {
            return Err(Error::invalid("background fraction must lie in [0, 1]"));
        }
        let (lo, hi) = self.radius_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid("radius range must satisfy 0 < min <= max"));
        }
        if !(self.infection_density >= 0.0) || !(self.noise >= 0.0) || !(self.distractors >= 0.0) {
            return Err(Error::invalid("density, noise and distractors must be non-negative"));
        }
        if self.slices_per_scan == 0 || self.max_lesions == Some(0) {
            return Err(Error::invalid("slices per scan and lesion cap must be positive"));
        }
        Ok(())
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn sample(rng: &mut impl Rng, h: usize, w: usize, radius: (f64, f64)) -> Self {
        let (lo, hi) = radius;
        let a = rng.random_range(lo..=hi);
        let b = rng.random_range(lo..=hi);
        let theta = rng.random_range(0.0..PI);
        let my = hi.min(h as f64 / 4.0);
        let mx = hi.min(w as f64 / 4.0);
        Ellipse {
            cy: rng.random_range(my..=(h as f64 - my).max(my)),
            cx: rng.random_range(mx..=(w as f64 - mx).max(mx)),
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    fn contains(&self, r: usize, c: usize) -> bool {
        let dy = r as f64 + 0.5 - self.cy;
        let dx = c as f64 + 0.5 - self.cx;
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v <= 1.0
    }
}

/// Generate a deterministic synthetic dataset of noisy slices with
/// elliptical bright lesions.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let prep = Preprocessing {
        target_size: config.size,
        ..Preprocessing::default()
    };
    let (h, w) = config.size;
    let n_background = (config.background_fraction * config.n_images as f64).round() as usize;
    let mut order: Vec<usize> = (0..config.n_images).collect();
    order.shuffle(&mut seed::rng(config.seed, &[seed::tag("background")]));
    let mut is_background = vec![false; config.n_images];
    for &i in &order[..n_background] {
        is_background[i] = true;
    }

    let extra = Poisson::new((config.infection_density - 1.0).max(1e-12))
        .map_err(|e| Error::invalid(format!("infection density: {e}")))?;
    let distractor_count = Poisson::new(config.distractors.max(1e-12))
        .map_err(|e| Error::invalid(format!("distractors: {e}")))?;
    let noise = Normal::new(0.0, config.noise * 255.0)
        .map_err(|e| Error::invalid(format!("noise: {e}")))?;

    let mut entries = Vec::with_capacity(config.n_images);
    for i in 0..config.n_images {
        let mut rng = seed::rng(config.seed, &[seed::tag("image"), i as u64]);
        // low-frequency tissue texture
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.02..0.12),
                    rng.random_range(0.02..0.12),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(6.0..14.0),
                )
            })
            .collect();
        let mut lesions = Vec::new();
        if !is_background[i] {
            let mut n = 1 + extra.sample(&mut rng) as usize;
            if let Some(cap) = config.max_lesions {
                n = n.min(cap);
            }
            for _ in 0..n {
                lesions.push(Ellipse::sample(&mut rng, h, w, config.radius_range));
            }
        }
        let n_distractors = if config.distractors > 0.0 {
            distractor_count.sample(&mut rng) as usize
        } else {
            0
        };
        let distractors: Vec<Ellipse> = (0..n_distractors)
            .map(|_| Ellipse::sample(&mut rng, h, w, (1.0, 1.8)))
            .collect();

        let mut mask = Raster::filled(h, w, 0u8);
        let stored = Raster::from_fn(h, w, |r, c| {
            let mut v = 70.0;
            for &(fy, fx, phase, amp) in &waves {
                v += amp * (fy * r as f64 + fx * c as f64 + phase).cos();
            }
            if lesions.iter().any(|e| e.contains(r, c)) {
                v += config.contrast * 255.0;
                mask.set(r, c, 1);
            } else if distractors.iter().any(|e| e.contains(r, c)) {
                v += 1.6 * config.contrast * 255.0;
            }
            v += noise.sample(&mut rng);
            v.round().clamp(0.0, 255.0) as u8
        });
        let id = format!("synth{i:04}");
        let image = ImageSlice::new(
            id.clone(),
            format!("scan{:02}", i / config.slices_per_scan),
            i % config.slices_per_scan,
            normalize(&stored, prep.normalization),
        );
        entries.push(DatasetEntry {
            image,
            mask: Some(GroundTruthMask::new(id, mask)?),
            stored,
        });
    }
    Ok(Dataset {
        name: format!("synthetic-{}", config.seed),
        preprocessing: prep,
        entries,
    })
}

/// One manifest entry; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: Option<String>,
    pub scan_id: String,
    pub slice_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub preprocessing: Preprocessing,
    pub slices: Vec<ManifestEntry>,
}

/// Write `dataset` as `manifest.json` + PNGs under `dir`. Returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut slices = Vec::with_capacity(dataset.len());
    for e in &dataset.entries {
        let image = format!("images/{}.png", e.image.id);
        let p = dir.join(&image);
        fs::write(&p, png_io::encode_gray(&e.stored)?).map_err(|err| Error::io(&p, err))?;
        let mask = match &e.mask {
            Some(m) => {
                let rel = format!("masks/{}.png", e.image.id);
                let p = dir.join(&rel);
                fs::write(&p, png_io::encode_mask(m.classes())?).map_err(|err| Error::io(&p, err))?;
                Some(rel)
            }
            None => None,
        };
        slices.push(ManifestEntry {
            image,
            mask,
            scan_id: e.image.scan_id.clone(),
            slice_index: e.image.slice_index,
        });
    }
    let manifest = DatasetManifest {
        name: dataset.name.clone(),
        preprocessing: dataset.preprocessing,
        slices,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Read a manifest and materialize every slice it references.
pub fn load_manifest(path: &Path) -> Result<(DatasetManifest, Dataset)> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&text).map_err(|e| Error::Load {
        entry: path.display().to_string(),
        reason: format!("unparseable manifest: {e}"),
    })?;
    manifest.preprocessing.validate()?;
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    let prep = manifest.preprocessing;
    let mut entries = Vec::with_capacity(manifest.slices.len());
    for entry in &manifest.slices {
        let fail = |reason: String| Error::Load {
            entry: entry.image.clone(),
            reason,
        };
        let read_png = |rel: &str| -> Result<Raster<u8>> {
            let p = root.join(rel);
            let bytes = fs::read(&p).map_err(|e| fail(format!("{}: {e}", p.display())))?;
            png_io::decode_u8(&bytes).map_err(|e| fail(format!("{rel}: {e}")))
        };
        let raw = read_png(&entry.image)?;
        let id = Path::new(&entry.image)
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| fail("image path has no file name".into()))?
            .to_string();
        let mask = match &entry.mask {
            Some(rel) => {
                let m = read_png(rel)?;
                if m.shape() != raw.shape() {
                    return Err(fail(format!(
                        "mask shape {:?} differs from image shape {:?}",
                        m.shape(),
                        raw.shape()
                    )));
                }
                let m = GroundTruthMask::new(id.clone(), m).map_err(|e| fail(e.to_string()))?;
                Some(resize_mask(&m, prep.target_size)?)
            }
            None => None,
        };
        let stored = resize_bilinear(&raw, prep.target_size);
        entries.push(DatasetEntry {
            image: ImageSlice::new(
                id,
                entry.scan_id.clone(),
                entry.slice_index,
                normalize(&stored, prep.normalization),
            ),
            mask,
            stored,
        });
    }
    let dataset = Dataset {
        name: manifest.name.clone(),
        preprocessing: prep,
        entries,
    };
    Ok((manifest, dataset))
}
