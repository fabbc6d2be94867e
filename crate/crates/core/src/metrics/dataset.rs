//! YOLO-format dataset ingestion.
//!
//! A dataset root holds `images/` and `labels/`. Either both contain
//! `train/`, `val/` and `test/` subdirectories, or both are flat and the
//! samples are split by a seeded shuffle. Each label file shares its image's
//! stem and lists one object per line: `class_id cx cy w h`, with
//! coordinates normalized to `[0, 1]`.

use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::{BBox, GroundTruth};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::Scene;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YoloLabel {
    pub class: usize,
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl YoloLabel {
    /// Pixel-space truth for an image of `width`×`height`.
    pub fn to_ground_truth(&self, width: usize, height: usize) -> GroundTruth {
        let (w, h) = (width as f32, height as f32);
        GroundTruth {
            class: self.class,
            bbox: BBox::from_center(self.cx * w, self.cy * h, self.w * w, self.h * h),
        }
    }

    /// Shrinks the box to the unit square. Returns whether anything changed.
    fn clamp(&mut self) -> bool {
        let inside = |c: f32, e: f32| c - e / 2.0 >= 0.0 && c + e / 2.0 <= 1.0;
        if inside(self.cx, self.w) && inside(self.cy, self.h) {
            return false;
        }
        let x1 = (self.cx - self.w / 2.0).clamp(0.0, 1.0);
        let x2 = (self.cx + self.w / 2.0).clamp(0.0, 1.0);
        let y1 = (self.cy - self.h / 2.0).clamp(0.0, 1.0);
        let y2 = (self.cy + self.h / 2.0).clamp(0.0, 1.0);
        let clamped = Self {
            class: self.class,
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        };
        *self = clamped;
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YoloSample {
    pub image: PathBuf,
    pub labels: Vec<YoloLabel>,
}

impl YoloSample {
    pub fn ground_truths(&self, width: usize, height: usize) -> Vec<GroundTruth> {
        self.labels.iter().map(|l| l.to_ground_truth(width, height)).collect()
    }
}

/// Parses label text. `path` is only used in error messages and warnings.
pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<YoloLabel>> {
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("class id {:?} is not a non-negative integer", fields[0])))?;
        let mut v = [0f32; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse::<f32>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("{f:?} is not a finite number")))?;
        }
        if v[2] <= 0.0 || v[3] <= 0.0 {
            return Err(err("box width and height must be positive".into()));
        }
        let mut label = YoloLabel {
            class,
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        };
        if label.clamp() {
            warn!("{}:{line_no}: box extends outside the image, clamped", path.display());
        }
        if label.w <= 0.0 || label.h <= 0.0 {
            return Err(err("box lies entirely outside the image".into()));
        }
        labels.push(label);
    }
    Ok(labels)
}

pub fn parse_label_file(path: &Path) -> Result<Vec<YoloLabel>> {
    parse_labels(&std::fs::read_to_string(path)?, path)
}

/// Split ratios (train, val, test) and shuffle seed for flat layouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

impl SplitSpec {
    fn validate(&self) -> Result<()> {
        let sum: f64 = self.ratios.iter().sum();
        if self.ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "split",
                format!("ratios {:?} must be non-negative and sum to 1", self.ratios),
            ));
        }
        Ok(())
    }

    /// Sizes of the three parts for `n` samples; the test part takes the rest.
    pub fn sizes(&self, n: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let train = ((n as f64 * self.ratios[0]).round() as usize).min(n);
        let val = ((n as f64 * self.ratios[1]).round() as usize).min(n - train);
        Ok([train, val, n - train - val])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct YoloDataset {
    pub train: Vec<YoloSample>,
    pub val: Vec<YoloSample>,
    pub test: Vec<YoloSample>,
}

impl YoloDataset {
    pub fn split(&self, name: &str) -> Result<&[YoloSample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::invalid("split", format!("unknown split {name:?}"))),
        }
    }
}

/// Shuffles `samples` with `spec.seed` and cuts them by `spec.ratios`.
pub fn split_samples<S>(mut samples: Vec<S>, spec: &SplitSpec) -> Result<[Vec<S>; 3]> {
    let [train, val, _] = spec.sizes(samples.len())?;
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut rest = samples.split_off(train);
    let test = rest.split_off(val);
    Ok([samples, rest, test])
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn load_dir(images: &Path, labels: &Path) -> Result<Vec<YoloSample>> {
    image_files(images)?
        .into_iter()
        .map(|image| {
            let mut name = image.file_stem().unwrap_or_default().to_os_string();
            name.push(".txt");
            let label_path = labels.join(name);
            let labels = if label_path.is_file() {
                parse_label_file(&label_path)?
            } else {
                warn!("no label file for {}, treating it as background", image.display());
                Vec::new()
            };
            Ok(YoloSample { image, labels })
        })
        .collect()
}

/// Loads a dataset root. Samples are ordered by image path; with a flat
/// layout they are then split by `spec`.
pub fn load_yolo_dataset(root: impl AsRef<Path>, spec: &SplitSpec) -> Result<YoloDataset> {
    let root = root.as_ref();
    let images = root.join("images");
    let labels = root.join("labels");
    if !images.is_dir() {
        return Err(Error::invalid(
            "load_yolo_dataset",
            format!("{} has no images/ directory", root.display()),
        ));
    }
    if images.join("train").is_dir() {
        let part = |name: &str| -> Result<Vec<YoloSample>> {
            let dir = images.join(name);
            if dir.is_dir() {
                load_dir(&dir, &labels.join(name))
            } else {
                Ok(Vec::new())
            }
        };
        return Ok(YoloDataset {
            train: part("train")?,
            val: part("val")?,
            test: part("test")?,
        });
    }
    let [train, val, test] = split_samples(load_dir(&images, &labels)?, spec)?;
    Ok(YoloDataset { train, val, test })
}

/// Decodes an image to a `[3, size, size]` tensor in `[0, 1]`, resizing with
/// a triangle filter.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img
        .resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle)
        .to_rgb8();
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, size, size], data)
}

/// Writes a `[3, H, W]` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    let [c, h, w] = match *t.shape() {
        [c, h, w] => [c, h, w],
        _ => return Err(Error::shape("save_image", &[3, 0, 0], t.shape())),
    };
    if c != 3 {
        return Err(Error::shape("save_image", &[3, h, w], t.shape()));
    }
    let plane = h * w;
    let d = t.data();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|k| (d[k * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

impl YoloLabel {
    /// Normalized label for a pixel-space truth in a `width`×`height` image.
    pub fn from_ground_truth(gt: &GroundTruth, width: usize, height: usize) -> Self {
        let (cx, cy) = gt.bbox.center();
        let (w, h) = (width as f32, height as f32);
        Self {
            class: gt.class,
            cx: cx / w,
            cy: cy / h,
            w: gt.bbox.width() / w,
            h: gt.bbox.height() / h,
        }
    }
}

/// Writes `images/{split}/NNNNN.png` and `labels/{split}/NNNNN.txt` under
/// `root`, one pair per scene.
pub fn write_yolo_split(root: &Path, split: &str, scenes: &[Scene]) -> Result<()> {
    let images = root.join("images").join(split);
    let labels = root.join("labels").join(split);
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&labels)?;
    for (i, scene) in scenes.iter().enumerate() {
        let [_, h, w] = match *scene.image.shape() {
            [c, h, w] => [c, h, w],
            _ => return Err(Error::shape("write_yolo_split", &[3, 0, 0], scene.image.shape())),
        };
        save_image(&scene.image, &images.join(format!("{i:05}.png")))?;
        let mut text = String::new();
        for gt in &scene.objects {
            let l = YoloLabel::from_ground_truth(gt, w, h);
            text.push_str(&format!("{} {:.6} {:.6} {:.6} {:.6}\n", l.class, l.cx, l.cy, l.w, l.h));
        }
        std::fs::write(labels.join(format!("{i:05}.txt")), text)?;
    }
    Ok(())
}

/// Decodes samples into scenes of `size`×`size` pixels.
pub fn load_scenes(samples: &[YoloSample], size: usize) -> Result<Vec<Scene>> {
    samples
        .iter()
        .map(|s| {
            Ok(Scene {
                image: load_image(&s.image, size)?,
                objects: s.ground_truths(size, size),
            })
        })
        .collect()
}
