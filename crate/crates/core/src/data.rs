//! Paired degraded/reference image ingestion, preprocessing, augmentation and
//! batching.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::image::Image;

pub const DEGRADED_DIR: &str = "degraded";
pub const REFERENCE_DIR: &str = "reference";
pub const MIN_CROP_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `<root>/degraded/*` and `<root>/reference/*` matched by file stem.
    PairedDirs,
    /// Every image under `<root>` is its own reference.
    Identity,
}

impl FromStr for Layout {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired_dirs" | "paired" => Ok(Layout::PairedDirs),
            "identity" => Ok(Layout::Identity),
            other => Err(CoreError::Config(format!(
                "unknown layout '{other}' (paired_dirs or identity)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub degraded: PathBuf,
    pub reference: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    /// Sorted by id, ids unique.
    pub entries: Vec<ManifestEntry>,
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Image files in `dir` keyed by stem.
fn images_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in rd {
        let path = entry.map_err(|e| CoreError::io(dir, e))?.path();
        if !is_image(&path) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(CoreError::Manifest(format!(
                "two files share the id '{stem}': {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

pub fn load_manifest(root: &Path, layout: Layout) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(CoreError::Manifest(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let entries: Vec<ManifestEntry> = match layout {
        Layout::Identity => images_by_stem(root)?
            .into_iter()
            .map(|(id, p)| ManifestEntry {
                id,
                degraded: p.clone(),
                reference: p,
            })
            .collect(),
        Layout::PairedDirs => {
            let degraded = images_by_stem(&root.join(DEGRADED_DIR))?;
            let reference = images_by_stem(&root.join(REFERENCE_DIR))?;
            let orphans: Vec<String> = degraded
                .iter()
                .filter(|(id, _)| !reference.contains_key(*id))
                .chain(
                    reference
                        .iter()
                        .filter(|(id, _)| !degraded.contains_key(*id)),
                )
                .map(|(_, p)| p.display().to_string())
                .collect();
            if !orphans.is_empty() {
                return Err(CoreError::Manifest(format!(
                    "unmatched files: {}",
                    orphans.join(", ")
                )));
            }
            degraded
                .into_iter()
                .map(|(id, d)| {
                    let r = reference[&id].clone();
                    ManifestEntry {
                        id,
                        degraded: d,
                        reference: r,
                    }
                })
                .collect()
        }
    };
    if entries.is_empty() {
        return Err(CoreError::Manifest(format!(
            "no images found under {}",
            root.display()
        )));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split: "all".into(),
        entries,
    })
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `id<TAB>degraded<TAB>reference` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}",
                e.id,
                e.degraded.display(),
                e.reference.display()
            );
        }
        s
    }

    pub fn from_text(root: &Path, text: &str) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(CoreError::Manifest(format!(
                    "line {}: expected 3 tab-separated fields",
                    i + 1
                )));
            }
            if !seen.insert(f[0].to_string()) {
                return Err(CoreError::Manifest(format!(
                    "line {}: duplicate id '{}'",
                    i + 1,
                    f[0]
                )));
            }
            entries.push(ManifestEntry {
                id: f[0].into(),
                degraded: f[1].into(),
                reference: f[2].into(),
            });
        }
        if entries.is_empty() {
            return Err(CoreError::Manifest("manifest lists no pairs".into()));
        }
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Self {
            root: root.to_path_buf(),
            split: "all".into(),
            entries,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub degraded: Image,
    pub reference: Image,
}

pub fn decode_image(path: &Path) -> Result<Image> {
    let img =
        image::open(path).map_err(|e| CoreError::Input(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    Image::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
}

/// Writes an 8-bit image; the format follows the file extension.
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8())
        .expect("buffer length matches dimensions");
    buf.save(path)
        .map_err(|e| CoreError::Input(format!("{}: {e}", path.display())))
}

/// Both images resized to `size x size`.
pub fn preprocess(sample: PairedSample, size: usize) -> PairedSample {
    PairedSample {
        id: sample.id,
        degraded: sample.degraded.resize_bilinear(size, size),
        reference: sample.reference.resize_bilinear(size, size),
    }
}

pub fn load_sample(entry: &ManifestEntry, size: usize) -> Result<PairedSample> {
    let wrap = |e: CoreError| CoreError::Sample {
        id: entry.id.clone(),
        message: e.to_string(),
    };
    let degraded = decode_image(&entry.degraded).map_err(wrap)?;
    let reference = if entry.reference == entry.degraded {
        degraded.clone()
    } else {
        decode_image(&entry.reference).map_err(wrap)?
    };
    Ok(preprocess(
        PairedSample {
            id: entry.id.clone(),
            degraded,
            reference,
        },
        size,
    ))
}

/// Loads every readable pair; unreadable ones are returned separately.
pub fn load_all(manifest: &DatasetManifest, size: usize) -> (Vec<PairedSample>, Vec<CoreError>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for e in &manifest.entries {
        match load_sample(e, size) {
            Ok(s) => ok.push(s),
            Err(err) => failed.push(err),
        }
    }
    (ok, failed)
}

/// One geometric augmentation, recorded so it can be replayed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub top: usize,
    pub left: usize,
    pub crop_height: usize,
    pub crop_width: usize,
    pub flip: bool,
}

impl Augmentation {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            crop_height: height,
            crop_width: width,
            flip: false,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Self {
        let fraction = rng.gen_range(MIN_CROP_FRACTION..=1.0);
        let crop_height = ((height as f64 * fraction).round() as usize).clamp(1, height);
        let crop_width = ((width as f64 * fraction).round() as usize).clamp(1, width);
        let top = rng.gen_range(0..=height - crop_height);
        let left = rng.gen_range(0..=width - crop_width);
        let flip = rng.gen_bool(0.5);
        Self {
            top,
            left,
            crop_height,
            crop_width,
            flip,
        }
    }

    /// Crop, resize back to the input size, then optionally mirror.
    pub fn apply(&self, img: &Image) -> Result<Image> {
        let out = img
            .crop(self.top, self.left, self.crop_height, self.crop_width)?
            .resize_bilinear(img.height(), img.width());
        Ok(if self.flip {
            out.flip_horizontal()
        } else {
            out
        })
    }
}

/// Applies the same random crop and flip to both images of the pair.
pub fn augment(sample: &PairedSample, seed: u64) -> Result<(PairedSample, Augmentation)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aug = Augmentation::sample(&mut rng, sample.degraded.height(), sample.degraded.width());
    let out = PairedSample {
        id: sample.id.clone(),
        degraded: aug.apply(&sample.degraded)?,
        reference: aug.apply(&sample.reference)?,
    };
    Ok((out, aug))
}

/// Indices of `n` samples split into batches, shuffled by `(seed, epoch)`.
/// The last batch may be short.
pub fn batch_indices(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    shuffle: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(CoreError::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0xA24B_AED4_963E_E407));
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Clean scenes made of smooth gradients and discs, and a degraded copy with
/// wavelength-dependent attenuation, a blue-green haze and low contrast.
pub fn synthetic_pairs(n: usize, size: usize, seed: u64) -> Vec<PairedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let base: [f64; 3] = [
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
            ];
            let slope: [f64; 2] = [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)];
            let discs: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
                .map(|_| {
                    (
                        rng.gen_range(0.2..0.8),
                        rng.gen_range(0.2..0.8),
                        rng.gen_range(0.1..0.25),
                        [
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                        ],
                    )
                })
                .collect();
            let s = size as f64;
            let reference = Image::from_fn(size, size, |c, y, x| {
                let (u, v) = (x as f64 / s, y as f64 / s);
                let mut val = base[c] + slope[0] * (u - 0.5) + slope[1] * (v - 0.5);
                for (cx, cy, r, col) in &discs {
                    if (u - cx).powi(2) + (v - cy).powi(2) < r * r {
                        val = col[c];
                    }
                }
                val.clamp(-1.0, 1.0)
            });
            let attenuation = [0.35, 0.75, 0.85];
            let haze = [-0.6, 0.15, 0.35];
            let degraded = Image::from_fn(size, size, |c, y, x| {
                let t = attenuation[c];
                (t * reference.get(c, y, x) + (1.0 - t) * haze[c]).clamp(-1.0, 1.0)
            });
            PairedSample {
                id: format!("synthetic_{k:04}"),
                degraded,
                reference,
            }
        })
        .collect()
}
