//! Procedural scenes of flat shapes on noisy backgrounds.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::{BBox, GroundTruth};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Class names in id order.
pub const SHAPE_CLASSES: [&str; 3] = ["disc", "rectangle", "triangle"];

/// An image `(3, size, size)` in `[0, 1]` with its labelled objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub objects: Vec<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object extent range in pixels, inclusive.
    pub min_extent: usize,
    pub max_extent: usize,
    /// Amplitude of uniform per-pixel noise.
    pub noise: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            size: 64,
            min_objects: 1,
            max_objects: 3,
            min_extent: 12,
            max_extent: 30,
            noise: 0.05,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid("synthetic dataset", msg.to_string()));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range must satisfy 1 <= min <= max");
        }
        if self.min_extent < 4 || self.min_extent > self.max_extent || self.max_extent > self.size {
            return bad("extent range must satisfy 4 <= min <= max <= image size");
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return bad("noise must lie in [0, 0.5]");
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Disc,
    Rectangle,
    Triangle,
}

impl Shape {
    fn from_class(c: usize) -> Self {
        match c {
            0 => Shape::Disc,
            1 => Shape::Rectangle,
            _ => Shape::Triangle,
        }
    }

    /// Whether the pixel centre `(px, py)` lies inside the shape drawn in `b`.
    fn covers(self, b: &BBox, px: f32, py: f32) -> bool {
        match self {
            Shape::Disc => {
                let (cx, cy) = b.center();
                let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
                let (dx, dy) = ((px - cx) / rx, (py - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
            Shape::Rectangle => px >= b.x1 && px <= b.x2 && py >= b.y1 && py <= b.y2,
            Shape::Triangle => {
                // Apex at the top centre, base along the bottom edge.
                if py < b.y1 || py > b.y2 {
                    return false;
                }
                let t = (py - b.y1) / b.height();
                let half = t * b.width() / 2.0;
                let cx = (b.x1 + b.x2) / 2.0;
                (px - cx).abs() <= half
            }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn contrasting_color(rng: &mut ChaCha8Rng, background: [f32; 3]) -> [f32; 3] {
    loop {
        let c = random_color(rng);
        let d: f32 = c.iter().zip(&background).map(|(a, b)| (a - b).abs()).sum();
        if d >= 0.9 {
            return c;
        }
    }
}

fn place(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig, class: usize, taken: &[GroundTruth]) -> Option<BBox> {
    let size = cfg.size as f32;
    let tries = 200;
    for k in 0..tries {
        // Crowded scenes gradually fall back to smaller shapes.
        let hi = cfg.max_extent - (cfg.max_extent - cfg.min_extent) * k / tries;
        let w = rng.random_range(cfg.min_extent..=hi) as f32;
        let h = match Shape::from_class(class) {
            Shape::Disc => w,
            _ => rng.random_range(cfg.min_extent..=hi) as f32,
        };
        let x1 = rng.random_range(0.0..=size - w).round();
        let y1 = rng.random_range(0.0..=size - h).round();
        let b = BBox::new(x1, y1, x1 + w, y1 + h);
        // Keep a one-pixel gap so shapes never touch.
        let clear = taken.iter().all(|t| {
            b.x1 > t.bbox.x2 + 1.0 || t.bbox.x1 > b.x2 + 1.0 || b.y1 > t.bbox.y2 + 1.0 || t.bbox.y1 > b.y2 + 1.0
        });
        if clear {
            return Some(b);
        }
    }
    None
}

fn render(seed: u64, index: usize, classes: &[usize], cfg: &SyntheticConfig) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let n = cfg.size;
    let background = random_color(&mut rng);
    let mut objects: Vec<GroundTruth> = Vec::with_capacity(classes.len());
    let mut colors = Vec::with_capacity(classes.len());
    for &class in classes {
        let bbox = place(&mut rng, cfg, class, &objects).ok_or_else(|| {
            Error::invalid("synthetic dataset", "could not place objects without overlap")
        })?;
        objects.push(GroundTruth { class, bbox });
        colors.push(contrasting_color(&mut rng, background));
    }
    let plane = n * n;
    let mut data = vec![0f32; 3 * plane];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let mut color = background;
            for (o, c) in objects.iter().zip(&colors) {
                if Shape::from_class(o.class).covers(&o.bbox, px, py) {
                    color = *c;
                }
            }
            for (ch, v) in color.iter().enumerate() {
                let noise = if cfg.noise > 0.0 {
                    rng.random_range(-cfg.noise..=cfg.noise)
                } else {
                    0.0
                };
                data[ch * plane + y * n + x] = (v + noise).clamp(0.0, 1.0);
            }
        }
    }
    Ok(Scene {
        image: Tensor::new(vec![3, n, n], data)?,
        objects,
    })
}

/// `n` scenes drawn deterministically from `seed`.
///
/// Object classes are dealt from shuffled blocks holding one of each class,
/// so class counts over the dataset differ by at most one.
pub fn generate_synthetic_with(n: usize, seed: u64, cfg: &SyntheticConfig) -> Result<Vec<Scene>> {
    if n == 0 {
        return Err(Error::invalid("synthetic dataset", "n must be at least 1"));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts: Vec<usize> = (0..n)
        .map(|_| rng.random_range(cfg.min_objects..=cfg.max_objects))
        .collect();
    let total: usize = counts.iter().sum();
    let k = SHAPE_CLASSES.len();
    let mut deck = Vec::with_capacity(total + k);
    while deck.len() < total {
        let mut block: Vec<usize> = (0..k).collect();
        block.shuffle(&mut rng);
        deck.extend(block);
    }
    let mut assigned = Vec::with_capacity(n);
    let mut offset = 0;
    for c in counts {
        assigned.push(deck[offset..offset + c].to_vec());
        offset += c;
    }
    par::map_range(n, |i| render(seed, i, &assigned[i], cfg))
        .into_iter()
        .collect()
}

pub fn generate_synthetic_dataset(n: usize, seed: u64) -> Result<Vec<Scene>> {
    generate_synthetic_with(n, seed, &SyntheticConfig::default())
}
