//! Raw corpus ingestion, class reduction, face cropping, multi-resolution
//! replication, train/test split and reference sampling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anonet_tensor::par;
use image::{imageops, GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::FaceDetector;
use crate::error::{Error, Result};
use crate::mask::{reduce_classes, SemanticMask};
use crate::photo::{self, Photo};

pub const RAW_LAYOUT: &str = "<root>/photos/<stem>.{png,jpg,jpeg} (8-bit RGB), \
<root>/masks/<stem>.png (8-bit, pixel value = 19-label source id), optional <root>/identities.csv (stem,identity)";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Raw corpus root.
    pub root: PathBuf,
    /// Prepared dataset directory; defaults to `<out>/prepared`.
    pub prepared: Option<PathBuf>,
    pub crop_enabled: bool,
    /// Side lengths each face is degraded to before being brought back to
    /// the network size.
    pub resolution_set: Vec<u32>,
    pub split_seed: u64,
    pub holdout_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/raw"),
            prepared: None,
            crop_enabled: true,
            resolution_set: vec![256],
            split_seed: 0,
            holdout_fraction: 0.05,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution_set.is_empty() {
            return Err(Error::Config("resolution_set must not be empty".into()));
        }
        if let Some(s) = self.resolution_set.iter().find(|&&s| s < 32) {
            return Err(Error::Config(format!(
                "resolution {s} is below the minimum side of 32"
            )));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// A paired photo and mask at network size.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceSample {
    pub photo: Photo,
    pub mask: SemanticMask,
    pub identity: String,
    /// Side length the face was degraded to.
    pub source_resolution: u32,
    pub stem: String,
}

impl FaceSample {
    pub fn new(
        photo: Photo,
        mask: SemanticMask,
        identity: impl Into<String>,
        source_resolution: u32,
        stem: impl Into<String>,
    ) -> Result<Self> {
        if photo.dimensions() != mask.dimensions() {
            return Err(Error::ShapeMismatch {
                what: "photo/mask pair",
                expected: photo.dimensions(),
                found: mask.dimensions(),
            });
        }
        Ok(Self {
            photo,
            mask,
            identity: identity.into(),
            source_resolution,
            stem: stem.into(),
        })
    }
}

/// Counts of what preparation skipped or approximated.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrepareReport {
    /// Stems with a photo but no mask, or the reverse.
    pub unpaired: Vec<String>,
    /// Stems whose files could not be used, with the reason.
    pub corrupt: Vec<(String, String)>,
    /// Stems where no face was detected and the full image was used.
    pub detector_fallbacks: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Prepared {
    /// Usable stems, sorted.
    pub stems: Vec<String>,
    /// `stems.len() * resolution_set.len()` samples, stem-major.
    pub samples: Vec<FaceSample>,
    pub report: PrepareReport,
}

fn list_stems(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if let (Some(stem), Some(ext)) = (path.file_stem().and_then(|s| s.to_str()), ext) {
            if exts.contains(&ext.as_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

fn read_identities(root: &Path) -> Result<BTreeMap<String, String>> {
    let path = root.join("identities.csv");
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("stem")) {
            continue;
        }
        let (stem, id) = line.split_once(',').ok_or_else(|| {
            Error::Dataset(format!(
                "{}:{}: expected `stem,identity`",
                path.display(),
                n + 1
            ))
        })?;
        map.insert(stem.trim().to_string(), id.trim().to_string());
    }
    Ok(map)
}

enum Outcome {
    Ok(Vec<FaceSample>, bool),
    Corrupt(String),
}

fn prepare_one(
    stem: &str,
    photo_path: &Path,
    mask_path: &Path,
    identity: &str,
    cfg: &DatasetConfig,
    detector: &dyn FaceDetector,
    size: u32,
) -> Outcome {
    let photo = match image::open(photo_path) {
        Ok(p) => p.to_rgb8(),
        Err(e) => return Outcome::Corrupt(format!("photo: {e}")),
    };
    let raw_mask = match image::open(mask_path) {
        Ok(m) => m.to_luma8(),
        Err(e) => return Outcome::Corrupt(format!("mask: {e}")),
    };
    if photo.dimensions() != raw_mask.dimensions() {
        return Outcome::Corrupt(format!(
            "photo is {:?} but mask is {:?}",
            photo.dimensions(),
            raw_mask.dimensions()
        ));
    }
    let mask = match reduce_classes(&raw_mask) {
        Ok(m) => m,
        Err(e) => return Outcome::Corrupt(e.to_string()),
    };
    let (crop, fallback) = crop_face(&photo, cfg.crop_enabled, detector);
    let (x, y, w, h) = crop;
    let face = imageops::crop_imm(&photo, x, y, w, h).to_image();
    let face_mask = mask.crop(x, y, w, h).resize(size, size);
    let face = photo::from_rgb8(&face);
    let samples = cfg
        .resolution_set
        .iter()
        .map(|&r| FaceSample {
            photo: photo::degrade(&face, r, size),
            mask: face_mask.clone(),
            identity: identity.to_string(),
            source_resolution: r,
            stem: stem.to_string(),
        })
        .collect();
    Outcome::Ok(samples, fallback)
}

/// Crop rectangle `(x, y, w, h)` around the most confident face, or the full
/// image. The flag is true when the detector found nothing.
fn crop_face(
    photo: &RgbImage,
    enabled: bool,
    detector: &dyn FaceDetector,
) -> ((u32, u32, u32, u32), bool) {
    let full = (0, 0, photo.width(), photo.height());
    if !enabled {
        return (full, false);
    }
    match detector.detect(photo).first() {
        Some(b) => ((b.x0, b.y0, b.width(), b.height()), false),
        None => (full, true),
    }
}

/// Reads the raw corpus and emits network-sized pairs, `|resolution_set|`
/// per usable stem.
pub fn prepare_pairs(
    cfg: &DatasetConfig,
    detector: &dyn FaceDetector,
    size: u32,
) -> Result<Prepared> {
    cfg.validate()?;
    let (pdir, mdir) = (cfg.root.join("photos"), cfg.root.join("masks"));
    if !pdir.is_dir() || !mdir.is_dir() {
        return Err(Error::Dataset(format!(
            "raw dataset not found under {}; expected {RAW_LAYOUT}",
            cfg.root.display()
        )));
    }
    let photos = list_stems(&pdir, &["png", "jpg", "jpeg"])?;
    let masks = list_stems(&mdir, &["png"])?;
    let ids = read_identities(&cfg.root)?;
    let mut report = PrepareReport::default();
    let mut pairs = Vec::new();
    for (stem, p) in &photos {
        match masks.get(stem) {
            Some(m) => pairs.push((stem.clone(), p.clone(), m.clone())),
            None => report.unpaired.push(stem.clone()),
        }
    }
    report
        .unpaired
        .extend(masks.keys().filter(|s| !photos.contains_key(*s)).cloned());
    report.unpaired.sort();
    let outcomes = par::map_slice(&pairs, |(stem, p, m)| {
        let identity = ids.get(stem).map(String::as_str).unwrap_or(stem);
        prepare_one(stem, p, m, identity, cfg, detector, size)
    });
    let mut stems = Vec::new();
    let mut samples = Vec::new();
    for ((stem, ..), outcome) in pairs.iter().zip(outcomes) {
        match outcome {
            Outcome::Ok(s, fallback) => {
                if fallback {
                    report.detector_fallbacks.push(stem.clone());
                }
                stems.push(stem.clone());
                samples.extend(s);
            }
            Outcome::Corrupt(reason) => {
                log::warn!("skipping {stem}: {reason}");
                report.corrupt.push((stem.clone(), reason));
            }
        }
    }
    for s in &report.unpaired {
        log::warn!("skipping {s}: photo and mask are not both present");
    }
    Ok(Prepared {
        stems,
        samples,
        report,
    })
}

/// Seeded split of sorted stems into `(train, held_out)`; the held-out part
/// has `round(n * fraction)` stems.
pub fn split_stems(stems: &[String], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut order: Vec<String> = stems.to_vec();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = ((stems.len() as f64) * fraction).round() as usize;
    let mut test = order[..held].to_vec();
    let mut train = order[held..].to_vec();
    train.sort();
    test.sort();
    (train, test)
}

/// One entry of the prepared manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stem: String,
    pub identity: String,
    pub resolution: u32,
    pub photo: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub network_size: u32,
    pub resolution_set: Vec<u32>,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
    pub report: PrepareReport,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes the prepared pairs with their split. Refuses to touch a
/// non-empty directory unless `force`.
pub fn write_prepared(
    dir: &Path,
    prepared: &Prepared,
    cfg: &DatasetConfig,
    size: u32,
    force: bool,
) -> Result<DatasetManifest> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Dataset(format!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        if non_empty {
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let (_, test) = split_stems(&prepared.stems, cfg.holdout_fraction, cfg.split_seed);
    let test_set: std::collections::BTreeSet<&String> = test.iter().collect();
    let mut manifest = DatasetManifest {
        network_size: size,
        resolution_set: cfg.resolution_set.clone(),
        train: Vec::new(),
        test: Vec::new(),
        report: prepared.report.clone(),
    };
    for split in ["train", "test"] {
        let d = dir.join(split);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in &prepared.samples {
        let split = if test_set.contains(&s.stem) {
            "test"
        } else {
            "train"
        };
        let base = format!("{split}/{}_r{}", s.stem, s.source_resolution);
        let entry = ManifestEntry {
            stem: s.stem.clone(),
            identity: s.identity.clone(),
            resolution: s.source_resolution,
            photo: format!("{base}.png"),
            mask: format!("{base}_mask.png"),
        };
        photo::to_rgb8(&s.photo).save(dir.join(&entry.photo))?;
        s.mask.to_gray().save(dir.join(&entry.mask))?;
        if split == "test" {
            &mut manifest.test
        } else {
            &mut manifest.train
        }
        .push(entry);
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Which part of a prepared dataset to load.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Immutable in-memory collection of samples.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    samples: Vec<FaceSample>,
    identities: usize,
}

impl Dataset {
    pub fn from_samples(samples: Vec<FaceSample>) -> Self {
        let identities = samples
            .iter()
            .map(|s| s.identity.as_str())
            .collect::<std::collections::BTreeSet<_>>()
            .len();
        Self {
            samples,
            identities,
        }
    }

    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::Dataset(format!(
                "cannot read {}: {e}; run prepare-data first",
                path.display()
            ))
        })?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let entries = match split {
            Split::Train => &manifest.train,
            Split::Test => &manifest.test,
        };
        let samples = par::map_slice(entries, |e| -> Result<FaceSample> {
            let p = image::open(dir.join(&e.photo))?.to_rgb8();
            let m: GrayImage = image::open(dir.join(&e.mask))?.to_luma8();
            FaceSample::new(
                photo::from_rgb8(&p),
                SemanticMask::from_gray(&m)?,
                &e.identity,
                e.resolution,
                &e.stem,
            )
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_samples(samples))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[FaceSample] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> &FaceSample {
        &self.samples[i]
    }

    pub fn num_identities(&self) -> usize {
        self.identities
    }

    /// Index of a reference sample for `index`: uniform over samples of
    /// other identities when there are at least two identities, otherwise
    /// uniform over the other samples whose photo differs.
    pub fn sample_reference(&self, rng: &mut impl Rng, index: usize) -> Result<usize> {
        if self.samples.len() < 2 {
            return Err(Error::NotEnoughSamples {
                needed: 2,
                found: self.samples.len(),
            });
        }
        let x = &self.samples[index];
        let candidates: Vec<usize> = if self.identities >= 2 {
            (0..self.samples.len())
                .filter(|&j| self.samples[j].identity != x.identity)
                .collect()
        } else {
            (0..self.samples.len())
                .filter(|&j| j != index && self.samples[j].photo != x.photo)
                .collect()
        };
        if candidates.is_empty() {
            return Err(Error::Dataset(
                "every other sample is identical to the query".into(),
            ));
        }
        Ok(candidates[rng.random_range(0..candidates.len())])
    }

    /// `(x, y, x_tilde)` for sample `index`.
    pub fn sample_triple(
        &self,
        rng: &mut impl Rng,
        index: usize,
    ) -> Result<(&Photo, &SemanticMask, &FaceSample)> {
        let r = self.sample_reference(rng, index)?;
        let s = &self.samples[index];
        Ok((&s.photo, &s.mask, &self.samples[r]))
    }
}
