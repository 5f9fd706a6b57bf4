//! Class-directory datasets, stratified splits, manifest and annotation
//! files, and a procedural synthetic leaf generator.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::detector::BBox;
use crate::image::{ImageError, ImageRgb8};

pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.2;
pub const ANNOTATION_FILE: &str = "annotations.txt";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset: {0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: ImageError,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Sample {
    /// Path relative to the manifest root, `/`-separated.
    pub path: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Manifest {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
    pub classes: Vec<String>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn absolute(&self, sample: &Sample) -> PathBuf {
        self.root.join(&sample.path)
    }

    /// Re-indexes samples against another class registry.
    pub fn with_classes(&self, classes: &[String]) -> Result<Manifest> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let name = &self.classes[s.label];
                let label = classes.iter().position(|c| c == name).ok_or_else(|| {
                    DatasetError::Validation(format!("class '{name}' is not in the registry"))
                })?;
                Ok(Sample {
                    path: s.path.clone(),
                    label,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Manifest {
            root: self.root.clone(),
            samples,
            classes: classes.to_vec(),
        })
    }

    /// Decodes every image in manifest order.
    pub fn load_images(&self) -> Result<Vec<ImageRgb8>> {
        self.samples
            .par_iter()
            .map(|s| {
                let path = self.absolute(s);
                ImageRgb8::open(&path).map_err(|source| DatasetError::Image {
                    path: path.display().to_string(),
                    source,
                })
            })
            .collect()
    }
}

fn is_ppm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(io_error(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(io_error(dir))?;
    entries.sort();
    Ok(entries)
}

/// One class per immediate subdirectory, `.ppm` files as samples.
pub fn scan(root: &Path) -> Result<Manifest> {
    let mut classes = Vec::new();
    let mut per_class = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let Some(name) = dir.file_name().and_then(|n| n.to_str()).map(str::to_string) else {
            return Err(DatasetError::Validation(format!(
                "class directory {} is not valid UTF-8",
                dir.display()
            )));
        };
        let files: Vec<String> = sorted_entries(&dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_ppm(p))
            .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(|f| format!("{name}/{f}")))
            .collect();
        classes.push(name);
        per_class.push(files);
    }
    if classes.is_empty() {
        return Err(DatasetError::Validation(format!(
            "{} contains no class directories",
            root.display()
        )));
    }
    let empty: Vec<&str> = classes
        .iter()
        .zip(&per_class)
        .filter(|(_, f)| f.is_empty())
        .map(|(c, _)| c.as_str())
        .collect();
    if !empty.is_empty() {
        return Err(DatasetError::Validation(format!(
            "classes without samples: {}",
            empty.join(", ")
        )));
    }
    let mut samples: Vec<Sample> = per_class
        .into_iter()
        .enumerate()
        .flat_map(|(label, files)| files.into_iter().map(move |path| Sample { path, label }))
        .collect();
    samples.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(Manifest {
        root: root.to_path_buf(),
        samples,
        classes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitConfig {
    pub validation_fraction: f64,
    pub seed: u64,
}

impl SplitConfig {
    pub fn new(validation_fraction: f64, seed: u64) -> Result<Self> {
        if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
            return Err(DatasetError::Validation(format!(
                "validation fraction must lie in (0, 1), got {validation_fraction}"
            )));
        }
        Ok(Self {
            validation_fraction,
            seed,
        })
    }
}

/// Number of validation samples for a class of `n`.
pub fn validation_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n - 1)
}

/// Stratified split; returns `(train, validation)`.
pub fn split(manifest: &Manifest, config: SplitConfig) -> Result<(Manifest, Manifest)> {
    let counts = manifest.class_counts();
    let small: Vec<&str> = counts
        .iter()
        .zip(&manifest.classes)
        .filter(|(&n, _)| n < 2)
        .map(|(_, c)| c.as_str())
        .collect();
    if !small.is_empty() {
        return Err(DatasetError::Validation(format!(
            "classes need at least 2 samples to split: {}",
            small.join(", ")
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (label, &n) in counts.iter().enumerate() {
        let mut members: Vec<&Sample> = manifest.samples.iter().filter(|s| s.label == label).collect();
        members.shuffle(&mut rng);
        let k = validation_count(n, config.validation_fraction);
        val.extend(members[..k].iter().map(|s| (*s).clone()));
        train.extend(members[k..].iter().map(|s| (*s).clone()));
    }
    let build = |mut samples: Vec<Sample>| {
        samples.sort_by(|a, b| a.path.cmp(&b.path));
        Manifest {
            root: manifest.root.clone(),
            samples,
            classes: manifest.classes.clone(),
        }
    };
    Ok((build(train), build(val)))
}

/// `relative_path<TAB>label` lines, sorted.
pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut lines: Vec<String> = manifest
        .samples
        .iter()
        .map(|s| format!("{}\t{}", s.path, manifest.classes[s.label]))
        .collect();
    lines.sort();
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(io_error(path))
}

/// Reads a manifest file; the registry is the sorted set of labels and the
/// root defaults to the file's directory.
pub fn read_manifest(path: &Path, root: Option<&Path>) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (file, label) = line.split_once('\t').ok_or_else(|| DatasetError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            reason: "expected relative_path<TAB>label".into(),
        })?;
        if file.is_empty() || label.is_empty() {
            return Err(DatasetError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                reason: "empty path or label".into(),
            });
        }
        entries.push((file.to_string(), label.to_string()));
    }
    if entries.is_empty() {
        return Err(DatasetError::Validation(format!("{} lists no samples", path.display())));
    }
    let classes: Vec<String> = entries
        .iter()
        .map(|(_, l)| l.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut seen = BTreeSet::new();
    let mut samples = Vec::with_capacity(entries.len());
    for (file, label) in entries {
        if !seen.insert(file.clone()) {
            return Err(DatasetError::Validation(format!("duplicate sample path {file}")));
        }
        let label = classes.binary_search(&label).expect("label collected above");
        samples.push(Sample { path: file, label });
    }
    samples.sort_by(|a, b| a.path.cmp(&b.path));
    let root = match root {
        Some(r) => r.to_path_buf(),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    Ok(Manifest {
        root,
        samples,
        classes,
    })
}

/// `relative_path cx cy w h` lines, sorted by path.
pub fn write_annotations(entries: &BTreeMap<String, Vec<BBox>>, path: &Path) -> Result<()> {
    let mut text = String::new();
    for (file, boxes) in entries {
        for b in boxes {
            text.push_str(&format!("{file} {:.6} {:.6} {:.6} {:.6}\n", b.cx, b.cy, b.w, b.h));
        }
    }
    fs::write(path, text).map_err(io_error(path))
}

pub fn read_annotations(path: &Path) -> Result<BTreeMap<String, Vec<BBox>>> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    let mut out: BTreeMap<String, Vec<BBox>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_error = |reason: String| DatasetError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(parse_error(format!("expected 5 fields, found {}", fields.len())));
        }
        let mut v = [0f32; 4];
        for (slot, field) in v.iter_mut().zip(&fields[1..]) {
            *slot = field
                .parse()
                .map_err(|_| parse_error(format!("'{field}' is not a number")))?;
        }
        let b = BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| parse_error(e.to_string()))?;
        out.entry(fields[0].to_string()).or_default().push(b);
    }
    Ok(out)
}

/// Directory names used by the generator for the first ten classes.
pub const SYNTHETIC_CLASS_NAMES: [&str; 10] = [
    "Tomato___Bacterial_spot",
    "Tomato___Early_blight",
    "Tomato___Late_blight",
    "Tomato___Leaf_Mold",
    "Tomato___Septoria_leaf_spot",
    "Tomato___Spider_mites_Two-spotted_spider_mite",
    "Tomato___Target_Spot",
    "Tomato___Tomato_Yellow_Leaf_Curl_Virus",
    "Tomato___Tomato_mosaic_virus",
    "Tomato___healthy",
];

pub fn synthetic_class_name(k: usize) -> String {
    SYNTHETIC_CLASS_NAMES
        .get(k)
        .map_or_else(|| format!("synthetic_{k:03}"), |s| s.to_string())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 150,
            image_size: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SyntheticSummary {
    pub images: usize,
    pub classes: Vec<String>,
    pub annotations: PathBuf,
}

/// Analytic ellipse with semi-axes `a`, `b` (pixels) rotated by `angle`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Point in the ellipse's unit frame: inside when `u² + v² ≤ 1`.
    fn unit(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        ((dx * c + dy * s) / self.a, (-dx * s + dy * c) / self.b)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.unit(x, y);
        u * u + v * v <= 1.0
    }

    /// Half extents of the axis-aligned bounding rectangle.
    pub fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (
            (self.a * self.a * c * c + self.b * self.b * s * s).sqrt(),
            (self.a * self.a * s * s + self.b * self.b * c * c).sqrt(),
        )
    }

    pub fn bbox(&self, width: usize, height: usize) -> BBox {
        let (hx, hy) = self.half_extents();
        let (w, h) = (width as f64, height as f64);
        BBox {
            cx: (self.cx / w) as f32,
            cy: (self.cy / h) as f32,
            w: (2.0 * hx / w) as f32,
            h: (2.0 * hy / h) as f32,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Texture drawn on top of the leaf body.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Texture {
    Spots,
    Stripes,
    Rings,
}

/// Renders one leaf image for class `k` of `classes`.
pub fn render_leaf(k: usize, classes: usize, size: usize, rng: &mut ChaCha8Rng) -> (ImageRgb8, Ellipse) {
    let s = size as f64;
    let hue = 360.0 * k as f64 / classes as f64 + rng.random_range(-3.0..3.0);
    let leaf = hsv_to_rgb(hue, rng.random_range(0.7..0.85), rng.random_range(0.7..0.82));
    let mark = hsv_to_rgb(hue + 25.0, 0.8, rng.random_range(0.3..0.4));
    let bg_hue = rng.random_range(0.0..360.0);
    let background = hsv_to_rgb(bg_hue, rng.random_range(0.0..0.08), rng.random_range(0.58..0.68));
    let texture = match k % 3 {
        0 => Texture::Spots,
        1 => Texture::Stripes,
        _ => Texture::Rings,
    };

    let a = rng.random_range(0.32..0.38) * s;
    let b = rng.random_range(0.25..0.30) * s;
    let angle = rng.random_range(0.0..PI);
    let mut ellipse = Ellipse { cx: 0.0, cy: 0.0, a, b, angle };
    let (hx, hy) = ellipse.half_extents();
    let margin = 0.08 * s;
    ellipse.cx = rng.random_range(margin + hx..=s - margin - hx);
    ellipse.cy = rng.random_range(margin + hy..=s - margin - hy);

    let spots: Vec<(f64, f64, f64)> = (0..4 + k % 5)
        .map(|_| {
            let r = rng.random_range(0.0..0.8f64).sqrt();
            let t = rng.random_range(0.0..2.0 * PI);
            (r * t.cos(), r * t.sin(), rng.random_range(0.08..0.16))
        })
        .collect();
    let period = 0.25 + 0.05 * (k % 4) as f64;
    let phase = rng.random_range(0.0..1.0);

    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let noise = rng.random_range(-0.025..0.025);
            let color = if ellipse.contains(px, py) {
                let (u, v) = ellipse.unit(px, py);
                let marked = match texture {
                    Texture::Spots => spots
                        .iter()
                        .any(|&(su, sv, r)| (u - su).powi(2) + (v - sv).powi(2) <= r * r),
                    Texture::Stripes => ((u / period + phase).rem_euclid(1.0)) < 0.35,
                    Texture::Rings => (((u * u + v * v).sqrt() / period + phase).rem_euclid(1.0)) < 0.3,
                };
                if marked {
                    mark
                } else {
                    leaf
                }
            } else {
                background
            };
            pixels.extend(color.map(|c| to_u8(c + noise)));
        }
    }
    (ImageRgb8::new(size, size, pixels).expect("sized buffer"), ellipse)
}

/// Writes `classes × per_class` images plus an annotation file under `out`.
pub fn generate_synthetic(out: &Path, config: &SyntheticConfig) -> Result<SyntheticSummary> {
    if config.classes < 2 || config.per_class < 2 {
        return Err(DatasetError::Validation(
            "synthetic data needs at least 2 classes and 2 images per class".into(),
        ));
    }
    if config.image_size < 16 {
        return Err(DatasetError::Validation("synthetic image size must be at least 16".into()));
    }
    fs::create_dir_all(out).map_err(io_error(out))?;
    let mut annotations = BTreeMap::new();
    let mut names = Vec::with_capacity(config.classes);
    for k in 0..config.classes {
        let name = synthetic_class_name(k);
        let dir = out.join(&name);
        fs::create_dir_all(&dir).map_err(io_error(&dir))?;
        for i in 0..config.per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream((k * config.per_class + i) as u64);
            let (image, ellipse) = render_leaf(k, config.classes, config.image_size, &mut rng);
            let rel = format!("{name}/img_{i:04}.ppm");
            let path = out.join(&rel);
            image.save(&path).map_err(|source| DatasetError::Image {
                path: path.display().to_string(),
                source,
            })?;
            annotations.insert(rel, vec![ellipse.bbox(config.image_size, config.image_size)]);
        }
        names.push(name);
    }
    let annotation_path = out.join(ANNOTATION_FILE);
    write_annotations(&annotations, &annotation_path)?;
    Ok(SyntheticSummary {
        images: config.classes * config.per_class,
        classes: names,
        annotations: annotation_path,
    })
}
