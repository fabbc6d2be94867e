//! Brute-force average precision and randomized fixtures.

use qcfs_core::bbox::{iou, BBox};
use qcfs_core::metrics::{ScoredBox, TruthBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// True positives among the detections with confidence ≥ `c`, matched from
/// scratch: highest confidence first (input order on ties), each taking the
/// unmatched same-image truth of highest IoU (lowest index on ties).
fn true_positives_at(dets: &[ScoredBox], truths: &[TruthBox], c: f32, thr: f64) -> (u32, u32) {
    let mut pending: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].confidence >= c).collect();
    let kept = pending.len() as u32;
    let mut taken = vec![false; truths.len()];
    let mut tp = 0;
    while !pending.is_empty() {
        let mut best = 0;
        for k in 1..pending.len() {
            if dets[pending[k]].confidence > dets[pending[best]].confidence {
                best = k;
            }
        }
        let d = dets[pending.remove(best)];
        let mut claim: Option<(usize, f64)> = None;
        for (j, t) in truths.iter().enumerate() {
            if t.image != d.image || taken[j] {
                continue;
            }
            let v = iou(&d.bbox, &t.bbox);
            if claim.is_none_or(|(_, b)| v > b) {
                claim = Some((j, v));
            }
        }
        if let Some((j, v)) = claim {
            if v >= thr {
                taken[j] = true;
                tp += 1;
            }
        }
    }
    (tp, kept)
}

/// All-points AP from one P-R operating point per distinct confidence.
pub fn brute_force_ap(dets: &[ScoredBox], truths: &[TruthBox], thr: f64) -> f64 {
    if truths.is_empty() || dets.is_empty() {
        return 0.0;
    }
    let mut confs: Vec<f32> = dets.iter().map(|d| d.confidence).collect();
    confs.sort_by(|a, b| b.total_cmp(a));
    confs.dedup();
    let points: Vec<(u32, f64)> = confs
        .iter()
        .map(|&c| {
            let (tp, n) = true_positives_at(dets, truths, c, thr);
            (tp, tp as f64 / n as f64)
        })
        .collect();
    let mut area = 0.0;
    let mut prev_tp = 0;
    for k in 0..points.len() {
        let gained = points[k].0 - prev_tp;
        prev_tp = points[k].0;
        if gained == 0 {
            continue;
        }
        let best = points[k..].iter().map(|p| p.1).fold(0.0f64, f64::max);
        area += gained as f64 * best;
    }
    area / truths.len() as f64
}

pub struct Fixture {
    pub dets: Vec<ScoredBox>,
    pub truths: Vec<TruthBox>,
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.random_range(0..12) as f32;
    let y = rng.random_range(0..12) as f32;
    BBox::new(x, y, x + rng.random_range(2..8) as f32, y + rng.random_range(2..8) as f32)
}

/// Up to three images, up to four truths per image and at most ten
/// detections. Confidences come from a coarse grid so ties occur.
pub fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = rng.random_range(1..=3);
    let mut truths = Vec::new();
    for image in 0..images {
        for _ in 0..rng.random_range(0..=4) {
            truths.push(TruthBox {
                image,
                bbox: random_box(&mut rng),
            });
        }
    }
    let mut dets = Vec::new();
    for _ in 0..rng.random_range(1..=10) {
        let confidence = rng.random_range(1..=8) as f32 / 8.0;
        let (image, bbox) = if !truths.is_empty() && rng.random_bool(0.7) {
            let t = truths[rng.random_range(0..truths.len())];
            let j = |rng: &mut ChaCha8Rng| rng.random_range(-1.0..1.0f32);
            let b = t.bbox;
            (t.image, BBox::new(b.x1 + j(&mut rng), b.y1 + j(&mut rng), b.x2 + j(&mut rng), b.y2 + j(&mut rng)))
        } else {
            (rng.random_range(0..images), random_box(&mut rng))
        };
        dets.push(ScoredBox { image, confidence, bbox });
    }
    Fixture { dets, truths }
}
