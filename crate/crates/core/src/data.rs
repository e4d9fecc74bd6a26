//! Dataset ingestion: complex-slice directories, natural images with
//! synthesised phase, and geometric phantoms.
//!
//! Directory datasets follow `<root>/{train,val,test}/<files>`. Every slice
//! handed out is normalised to unit maximum magnitude.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Luma};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::container::read_complex;
use crate::kspace::{ComplexImage, RealImage};
use crate::phase::{derive_seed, synthesize_phase, PhaseParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    ComplexSlices,
    NaturalImages,
    Phantom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomFamily {
    Ellipses,
    Rectangles,
    /// Each slice is drawn from one of the two families with equal odds.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub family: PhantomFamily,
    /// Total slices across all splits.
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub id: String,
    pub kind: DatasetKind,
    #[serde(default)]
    pub root: Option<PathBuf>,
    pub target_shape: [usize; 2],
    #[serde(default)]
    pub split: Split,
    #[serde(default)]
    pub phase: PhaseParams,
    #[serde(default)]
    pub phantom: Option<PhantomSpec>,
    /// Train/val/test fractions for phantom datasets.
    #[serde(default = "default_fractions")]
    pub split_fractions: [f64; 3],
}

fn default_fractions() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

impl DatasetSpec {
    pub fn phantom(id: &str, family: PhantomFamily, count: usize, seed: u64, shape: [usize; 2]) -> Self {
        Self {
            id: id.to_string(),
            kind: DatasetKind::Phantom,
            root: None,
            target_shape: shape,
            split: Split::Train,
            phase: PhaseParams::default(),
            phantom: Some(PhantomSpec { family, count, seed }),
            split_fractions: default_fractions(),
        }
    }

    pub fn with_split(&self, split: Split) -> Self {
        Self {
            split,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.target_shape;
        if h < 32 || w < 32 {
            return Err(Error::Config(format!(
                "dataset '{}': target_shape must be at least 32x32, got {h}x{w}",
                self.id
            )));
        }
        let f = self.split_fractions;
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) || ((f[0] + f[1] + f[2]) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "dataset '{}': split fractions must be non-negative and sum to 1",
                self.id
            )));
        }
        self.phase.validate()?;
        match self.kind {
            DatasetKind::Phantom if self.phantom.is_none() => Err(Error::Config(format!(
                "dataset '{}': phantom datasets need a 'phantom' section",
                self.id
            ))),
            DatasetKind::ComplexSlices | DatasetKind::NaturalImages if self.root.is_none() => Err(
                Error::Config(format!("dataset '{}': 'root' is required", self.id)),
            ),
            _ => Ok(()),
        }
    }

    fn split_dir(&self) -> Result<PathBuf> {
        let root = self
            .root
            .as_ref()
            .ok_or_else(|| Error::Config(format!("dataset '{}': 'root' is required", self.id)))?;
        Ok(root.join(self.split.as_str()))
    }
}

/// A slice with a stable identifier (file name or phantom index).
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub id: String,
    pub image: ComplexImage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SkippedFile {
    pub file: String,
    pub reason: String,
}

/// Accounting of a directory load: `decoded + skipped.len() == scanned`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LoadReport {
    pub scanned: usize,
    pub decoded: usize,
    pub skipped: Vec<SkippedFile>,
}

/// Scales the slice to unit maximum magnitude; returns the applied divisor.
pub fn normalize_slice(img: &ComplexImage) -> Result<(ComplexImage, f32)> {
    let scale = img.max_magnitude();
    if scale == 0.0 {
        return Err(Error::InvalidInput("cannot normalise an all-zero slice".into()));
    }
    Ok((img.scaled(1.0 / scale), scale))
}

pub fn denormalize_slice(img: &ComplexImage, scale: f32) -> ComplexImage {
    img.scaled(scale)
}

fn sorted_files(dir: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| Error::io(format!("reading directory {}", dir.display()), e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::io(format!("reading directory {}", dir.display()), e))?
            .path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if path.is_file() && ext.is_some_and(|e| extensions.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads every `.cimg` file of a directory in lexicographic order.
pub fn load_complex_dir(dir: &Path, target_shape: Option<[usize; 2]>) -> Result<Vec<Slice>> {
    let files = sorted_files(dir, &["cimg"])?;
    if files.is_empty() {
        return Err(Error::EmptyDataset(dir.display().to_string()));
    }
    files
        .par_iter()
        .map(|path| {
            let img = read_complex(path)?;
            if let Some([h, w]) = target_shape {
                if img.shape() != (h, w) {
                    return Err(Error::Container {
                        path: path.clone(),
                        reason: format!(
                            "slice is {}x{}, dataset expects {h}x{w}",
                            img.height(),
                            img.width()
                        ),
                    });
                }
            }
            let (image, _) = normalize_slice(&img).map_err(|e| Error::Container {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            Ok(Slice {
                id: file_name(path),
                image,
            })
        })
        .collect()
}

pub fn load_complex_dataset(spec: &DatasetSpec) -> Result<Vec<Slice>> {
    spec.validate()?;
    load_complex_dir(&spec.split_dir()?, Some(spec.target_shape))
}

/// Grayscale magnitude in `[0, 1]`: ITU-R 601 luma, centre-cropped to the
/// largest square and resized bilinearly.
pub fn decode_magnitude(path: &Path, target_shape: [usize; 2]) -> Result<RealImage> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let side = w.min(h);
    let (x0, y0) = ((w - side) / 2, (h - side) / 2);
    let gray: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_fn(side, side, |x, y| {
        let p = rgb.get_pixel(x0 + x, y0 + y).0;
        Luma([(0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0])
    });
    let [th, tw] = target_shape;
    let resized = if (side as usize, side as usize) == (th, tw) {
        gray
    } else {
        image::imageops::resize(&gray, tw as u32, th as u32, FilterType::Triangle)
    };
    let data = resized
        .into_raw()
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0) as f64)
        .collect();
    RealImage::new(th, tw, data)
}

/// Converts a flat directory of PNG/JPEG/BMP files into complex slices.
/// Files that fail to decode are skipped and listed in the report.
pub fn load_natural_dir(
    dir: &Path,
    target_shape: [usize; 2],
    phase: &PhaseParams,
) -> Result<(Vec<Slice>, LoadReport)> {
    let files = sorted_files(dir, &["png", "jpg", "jpeg", "bmp"])?;
    let results: Vec<(String, Result<ComplexImage>)> = files
        .par_iter()
        .map(|path| {
            let id = file_name(path);
            let out = decode_magnitude(path, target_shape).and_then(|mag| {
                let params = phase.with_seed(derive_seed(phase.seed, &id));
                let img = synthesize_phase(&mag, &params)?;
                Ok(normalize_slice(&img)?.0)
            });
            (id, out)
        })
        .collect();

    let mut report = LoadReport {
        scanned: files.len(),
        ..LoadReport::default()
    };
    let mut slices = Vec::new();
    for (id, res) in results {
        match res {
            Ok(image) => {
                report.decoded += 1;
                slices.push(Slice { id, image });
            }
            Err(e) => {
                warn!("skipping {id}: {e}");
                report.skipped.push(SkippedFile {
                    file: id,
                    reason: e.to_string(),
                });
            }
        }
    }
    if slices.is_empty() {
        return Err(Error::EmptyDataset(dir.display().to_string()));
    }
    Ok((slices, report))
}

pub fn load_natural_dataset(spec: &DatasetSpec) -> Result<(Vec<Slice>, LoadReport)> {
    spec.validate()?;
    load_natural_dir(&spec.split_dir()?, spec.target_shape, &spec.phase)
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        cos: f64,
        sin: f64,
    },
    Rect {
        y0: f64,
        y1: f64,
        x0: f64,
        x1: f64,
    },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse {
                cy,
                cx,
                ry,
                rx,
                cos,
                sin,
            } => {
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { y0, y1, x0, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, family: PhantomFamily) -> Shape {
    // Geometry in normalised [0, 1] coordinates.
    let cy = rng.random_range(0.2..0.8);
    let cx = rng.random_range(0.2..0.8);
    let ry = rng.random_range(0.06..0.3);
    let rx = rng.random_range(0.06..0.3);
    match family {
        PhantomFamily::Ellipses => {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Shape::Ellipse {
                cy,
                cx,
                ry,
                rx,
                cos: theta.cos(),
                sin: theta.sin(),
            }
        }
        _ => Shape::Rect {
            y0: cy - ry,
            y1: cy + ry,
            x0: cx - rx,
            x1: cx + rx,
        },
    }
}

fn phantom_magnitude(rng: &mut ChaCha8Rng, family: PhantomFamily, h: usize, w: usize) -> Vec<f32> {
    let family = match family {
        PhantomFamily::Mixed if rng.random_bool(0.5) => PhantomFamily::Ellipses,
        PhantomFamily::Mixed => PhantomFamily::Rectangles,
        f => f,
    };
    let n_shapes = rng.random_range(3..=8);
    let shapes: Vec<(Shape, f32)> = (0..n_shapes)
        .map(|_| {
            let s = random_shape(rng, family);
            (s, rng.random_range(0.2f32..=1.0))
        })
        .collect();
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        let y = (r as f64 + 0.5) / h as f64;
        for c in 0..w {
            let x = (c as f64 + 0.5) / w as f64;
            for (shape, value) in &shapes {
                if shape.contains(y, x) {
                    out[r * w + c] = *value;
                }
            }
        }
    }
    out
}

/// Index range of each split for a dataset of `count` slices.
pub fn split_range(count: usize, fractions: [f64; 3], split: Split) -> std::ops::Range<usize> {
    let n_train = ((fractions[0] * count as f64).round() as usize).min(count);
    let n_val = ((fractions[1] * count as f64).round() as usize).min(count - n_train);
    match split {
        Split::Train => 0..n_train,
        Split::Val => n_train..n_train + n_val,
        Split::Test => n_train + n_val..count,
    }
}

/// One phantom slice; slice `index` depends only on `(spec, index)`.
pub fn phantom_slice(spec: &DatasetSpec, index: usize) -> Result<Slice> {
    let ph = spec
        .phantom
        .ok_or_else(|| Error::Config(format!("dataset '{}' is not a phantom dataset", spec.id)))?;
    let [h, w] = spec.target_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(ph.seed);
    rng.set_stream(index as u64);
    let mag = phantom_magnitude(&mut rng, ph.family, h, w);
    let phase = spec.phase.with_seed(rng.random());
    let img = synthesize_phase(
        &RealImage::new(h, w, mag.into_iter().map(f64::from).collect())?,
        &phase,
    )?;
    let (image, _) = normalize_slice(&img)?;
    Ok(Slice {
        id: format!("{}-{index:05}", spec.id),
        image,
    })
}

/// The phantom slices of the spec's split.
pub fn generate_phantoms(spec: &DatasetSpec) -> Result<Vec<Slice>> {
    spec.validate()?;
    let ph = spec.phantom.expect("validated");
    if ph.count == 0 {
        return Err(Error::Config(format!(
            "dataset '{}': phantom count must be > 0",
            spec.id
        )));
    }
    let range = split_range(ph.count, spec.split_fractions, spec.split);
    if range.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} ({})",
            spec.id,
            spec.split.as_str()
        )));
    }
    range.into_par_iter().map(|i| phantom_slice(spec, i)).collect()
}

/// Loads the spec's split whatever its kind.
pub fn load_dataset(spec: &DatasetSpec) -> Result<(Vec<Slice>, Option<LoadReport>)> {
    match spec.kind {
        DatasetKind::ComplexSlices => Ok((load_complex_dataset(spec)?, None)),
        DatasetKind::NaturalImages => {
            let (s, r) = load_natural_dataset(spec)?;
            Ok((s, Some(r)))
        }
        DatasetKind::Phantom => Ok((generate_phantoms(spec)?, None)),
    }
}
